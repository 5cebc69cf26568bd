"""Sample manifests and label harmonisation maps.

Manifest: UTF-8 CSV with a leading format tag and a header row::

    %manifest 1
    path,source,frame,Weather Type,Visibility
    img/000.ppm,video07,120,Clear,Good

Label cells hold a class name or a class index; empty cells and
``Unknown`` mean -1 (missing). Tasks of the taxonomy without a column are
-1 for every record.

Label map::

    %labelmap 1
    task: Weather Type
    classes: sun | fog | rain | snow
    Clear -> sun
    None -> !drop
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from ..errors import DataError
from .taxonomy import Task, Taxonomy

MANIFEST_TAG = "%manifest 1"
LABELMAP_TAG = "%labelmap 1"
MISSING = ("", "Unknown")
DROP = "!drop"


@dataclass(frozen=True)
class SampleRecord:
    path: str
    source: str
    frame: int
    labels: tuple       # one int per taxonomy task, -1 = missing

    @property
    def id(self):
        return self.path


def _parse_label(cell, task, where):
    cell = cell.strip()
    if cell in MISSING:
        return -1
    if cell in task.classes:
        return task.classes.index(cell)
    try:
        idx = int(cell)
    except ValueError:
        raise DataError(f"{where}: unknown label {cell!r} for task {task.name!r}") from None
    if not -1 <= idx < task.n_classes:
        raise DataError(f"{where}: label index {idx} out of range for task {task.name!r}")
    return idx


def parse_manifest(text, taxonomy: Taxonomy, origin="manifest"):
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_TAG:
        raise DataError(f"{origin} line 1: expected format tag {MANIFEST_TAG!r}")
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{origin}: missing header row") from None
    if header[:3] != ["path", "source", "frame"]:
        raise DataError(f"{origin} line 2: header must start with path,source,frame")
    cols = header[3:]
    for c in cols:
        if c not in taxonomy.names:
            raise DataError(f"{origin} line 2: column {c!r} is not a taxonomy task")
    col_tasks = [taxonomy.task(c) for c in cols]
    records = []
    for lineno, row in enumerate(reader, start=3):
        if not row:
            continue
        where = f"{origin} line {lineno}"
        if len(row) != len(header):
            raise DataError(f"{where}: expected {len(header)} fields, got {len(row)}")
        try:
            frame = int(row[2])
        except ValueError:
            raise DataError(f"{where}: frame index {row[2]!r} is not an integer") from None
        if frame < 0:
            raise DataError(f"{where}: negative frame index")
        by_task = {t.name: _parse_label(cell, t, where) for t, cell in zip(col_tasks, row[3:])}
        labels = tuple(by_task.get(n, -1) for n in taxonomy.names)
        records.append(SampleRecord(row[0], row[1], frame, labels))
    return records


def read_manifest(path, taxonomy):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read(), taxonomy, origin=str(path))


def format_manifest(records, taxonomy):
    buf = io.StringIO()
    buf.write(MANIFEST_TAG + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "source", "frame", *taxonomy.names])
    for r in records:
        cells = ["" if y < 0 else t.classes[y] for t, y in zip(taxonomy.tasks, r.labels)]
        w.writerow([r.path, r.source, r.frame, *cells])
    return buf.getvalue()


def write_manifest(path, records, taxonomy):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_manifest(records, taxonomy))


# --------------------------------------------------------------------------
# label maps


@dataclass
class LabelMap:
    """Per task: source class label -> target class label, or None (drop to -1)."""

    mapping: dict          # task -> {source label: target label | None}
    target_classes: dict   # task -> tuple of target labels, in order

    def tasks(self):
        return list(self.mapping)

    def target_taxonomy(self):
        return Taxonomy(tuple(Task(t, tuple(self.target_classes[t])) for t in self.mapping))

    def map_index(self, task: Task, idx):
        """Target index for a source class index; -1 for missing or dropped."""
        if idx < 0:
            return -1
        label = task.classes[idx]
        table = self.mapping[task.name]
        if label not in table:
            raise DataError(f"label {label!r} of task {task.name!r} has no mapping")
        tgt = table[label]
        return -1 if tgt is None else self.target_classes[task.name].index(tgt)

    @classmethod
    def identity(cls, taxonomy):
        return cls({t.name: {c: c for c in t.classes} for t in taxonomy.tasks},
                   {t.name: tuple(t.classes) for t in taxonomy.tasks})


def parse_labelmap(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != LABELMAP_TAG:
        raise DataError(f"line 1: expected format tag {LABELMAP_TAG!r}")
    mapping, targets, cur = {}, {}, None
    for no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("task:"):
            cur = line[5:].strip()
            if cur in mapping:
                raise DataError(f"line {no}: duplicate task {cur!r}")
            mapping[cur], targets[cur] = {}, []
        elif cur is None:
            raise DataError(f"line {no}: entry outside a task stanza")
        elif line.startswith("classes:"):
            targets[cur] = [c.strip() for c in line[8:].split("|") if c.strip()]
        elif "->" in line:
            src, tgt = (s.strip() for s in line.split("->", 1))
            if src in mapping[cur]:
                raise DataError(f"line {no}: {src!r} mapped twice")
            if tgt == DROP:
                mapping[cur][src] = None
            else:
                mapping[cur][src] = tgt
                if tgt not in targets[cur]:
                    targets[cur].append(tgt)
        else:
            raise DataError(f"line {no}: cannot parse {raw!r}")
    return LabelMap(mapping, {k: tuple(v) for k, v in targets.items()})


def load_labelmap(path):
    with open(path, encoding="utf-8") as fh:
        return parse_labelmap(fh.read())


def format_labelmap(lm):
    out = [LABELMAP_TAG]
    for task, table in lm.mapping.items():
        out += ["", f"task: {task}", "classes: " + " | ".join(lm.target_classes[task])]
        out += [f"{s} -> {DROP if t is None else t}" for s, t in table.items()]
    return "\n".join(out) + "\n"


def remap_labels(records, lm: LabelMap, taxonomy: Taxonomy):
    """Relabel records (under ``taxonomy``) into the map's target taxonomy.

    Only mapped tasks are kept, in map order.
    """
    src_tasks = [taxonomy.task(t) for t in lm.tasks()]
    cols = [taxonomy.names.index(t) for t in lm.tasks()]
    out = []
    for r in records:
        labels = tuple(lm.map_index(t, r.labels[c]) for t, c in zip(src_tasks, cols))
        out.append(SampleRecord(r.path, r.source, r.frame, labels))
    return out, lm.target_taxonomy()


def harmonized_weather_map():
    """Four-way external weather harmonisation (sun, fog, rain, snow)."""
    return LabelMap(
        {"Weather Type": {"Clear": "sun", "Sunny + Clear": "sun", "Fog": "fog", "Fog + Rain": "fog",
                          "Fog + Snow": "fog", "Rain": "rain", "Snow": "snow", "None": None}},
        {"Weather Type": ("sun", "fog", "rain", "snow")})
