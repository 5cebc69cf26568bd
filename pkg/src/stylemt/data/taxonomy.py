"""Task/class taxonomy and its stanza file format.

File format (UTF-8)::

    %taxonomy 1
    task: Weather Type
    - Clear
    - Sunny + Clear

    task: Viewpoint
    kind: auxiliary
    - Onboard Vehicle

Blank lines and ``#`` comments are ignored. ``kind`` is ``weather``
(default) or ``auxiliary``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

from ..errors import DataError

FORMAT_TAG = "%taxonomy 1"


@dataclass(frozen=True)
class Task:
    name: str
    classes: tuple
    kind: str = "weather"

    @property
    def n_classes(self):
        return len(self.classes)

    def index(self, label):
        return self.classes.index(label)


@dataclass(frozen=True)
class Taxonomy:
    tasks: tuple = field(default_factory=tuple)

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise DataError("duplicate task names in taxonomy")
        for t in self.tasks:
            if not t.classes:
                raise DataError(f"task {t.name!r} has no classes")
            if len(set(t.classes)) != len(t.classes):
                raise DataError(f"duplicate class label in task {t.name!r}")

    @property
    def names(self):
        return [t.name for t in self.tasks]

    @property
    def n_classes(self):
        return sum(t.n_classes for t in self.tasks)

    @property
    def weather_classes(self):
        return sum(t.n_classes for t in self.tasks if t.kind == "weather")

    def task(self, name):
        for t in self.tasks:
            if t.name == name:
                return t
        raise DataError(f"unknown task {name!r}")

    def subset(self, names):
        return Taxonomy(tuple(self.task(n) for n in names))

    def weather_only(self):
        return Taxonomy(tuple(t for t in self.tasks if t.kind == "weather"))

    def __len__(self):
        return len(self.tasks)

    def to_dict(self):
        return {"tasks": [{"name": t.name, "classes": list(t.classes), "kind": t.kind} for t in self.tasks]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Task(t["name"], tuple(t["classes"]), t.get("kind", "weather")) for t in d["tasks"]))

    def to_text(self):
        out = [FORMAT_TAG]
        for t in self.tasks:
            out += ["", f"task: {t.name}"]
            if t.kind != "weather":
                out.append(f"kind: {t.kind}")
            out += [f"- {c}" for c in t.classes]
        return "\n".join(out) + "\n"


def parse_taxonomy(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise DataError(f"line 1: expected format tag {FORMAT_TAG!r}")
    tasks = []
    cur = None   # [name, classes, kind, line]

    def close():
        if cur is None:
            return
        name, classes, kind, at = cur
        if not classes:
            raise DataError(f"line {at}: task {name!r} has no classes")
        tasks.append(Task(name, tuple(classes), kind))

    seen = set()
    for no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("task:"):
            close()
            name = line[5:].strip()
            if not name:
                raise DataError(f"line {no}: empty task name")
            if name in seen:
                raise DataError(f"line {no}: duplicate task {name!r}")
            seen.add(name)
            cur = [name, [], "weather", no]
        elif line.startswith("kind:"):
            if cur is None:
                raise DataError(f"line {no}: kind outside a task stanza")
            kind = line[5:].strip()
            if kind not in ("weather", "auxiliary"):
                raise DataError(f"line {no}: unknown kind {kind!r}")
            cur[2] = kind
        elif line.startswith("-"):
            if cur is None:
                raise DataError(f"line {no}: class outside a task stanza")
            label = line[1:].strip()
            if not label:
                raise DataError(f"line {no}: empty class label")
            if label in cur[1]:
                raise DataError(f"line {no}: duplicate class {label!r} in task {cur[0]!r}")
            cur[1].append(label)
        else:
            raise DataError(f"line {no}: cannot parse {raw!r}")
    close()
    if not tasks:
        raise DataError("taxonomy defines no tasks")
    return Taxonomy(tuple(tasks))


def load_taxonomy(path=None):
    """Parse a taxonomy file; with no path, the bundled 13-criteria scheme."""
    if path is None:
        return parse_taxonomy(resources.files("stylemt.data").joinpath("weather13.txt").read_text("utf-8"))
    with open(path, encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def default_taxonomy():
    return load_taxonomy()
