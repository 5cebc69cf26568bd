"""Source-stratified train/test splits with a frame-spacing constraint.

All randomness comes from SplitMix64. Each source draws from its own
stream, seeded with ``mix64(seed ^ fnv1a64(source id))``, so adding or
removing one video never perturbs the selection of another.
"""
from __future__ import annotations

import bisect
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from ..errors import ConfigError, DataError

MASK64 = (1 << 64) - 1


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    """The 64-bit SplitMix generator (Steele, Lea and Flood)."""

    GOLDEN = 0x9E3779B97F4A7C15

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + self.GOLDEN) & MASK64
        return mix64(self.state)

    def below(self, n):
        """Uniform integer in [0, n) by multiply-shift."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def random(self):
        return (self.next_u64() >> 11) / float(1 << 53)

    def shuffle(self, items):
        """In-place Fisher-Yates, high index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n):
        return self.shuffle(list(range(n)))

    @classmethod
    def for_stream(cls, seed, name):
        return cls(mix64((int(seed) & MASK64) ^ fnv1a64(name)))


@dataclass(frozen=True)
class SplitSpec:
    min_gap: int = 1
    train_quota: int | None = None    # per source; None = unlimited
    test_quota: int | None = None
    test_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if self.min_gap < 1:
            raise ConfigError(f"min_gap must be >= 1, got {self.min_gap}")
        for name in ("train_quota", "test_quota"):
            q = getattr(self, name)
            if q is not None and q < 0:
                raise ConfigError(f"{name} must be >= 0, got {q}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        return self


@dataclass
class SplitReport:
    spec: dict
    n_train: int
    n_test: int
    mean_gap_train: float | None
    mean_gap_test: float | None
    mean_gap_all: float | None
    per_source: dict = field(default_factory=dict)     # source -> [n_train, n_test]
    warnings: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def _fits(selected, frame, gap):
    i = bisect.bisect_left(selected, frame)
    if i < len(selected) and selected[i] - frame < gap:
        return False
    if i > 0 and frame - selected[i - 1] < gap:
        return False
    return True


def _mean_gap(groups):
    diffs = []
    for frames in groups:
        f = sorted(frames)
        diffs += [b - a for a, b in zip(f, f[1:])]
    return sum(diffs) / len(diffs) if diffs else None


def _room(count, quota):
    return quota is None or count < quota


def generate_splits(records, spec: SplitSpec):
    """Returns (train ids, test ids, SplitReport).

    Per source, frames are visited in a shuffled order. The first two go one
    to each side; after that each frame goes to whichever side is behind its
    target ratio, falling back to the other side, subject to gap and quota.
    """
    spec.validate()
    if not records:
        raise DataError("cannot split an empty record list")
    by_source = defaultdict(list)
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
        by_source[r.source].append(r)

    train, test, warnings, per_source = [], [], [], {}
    gaps = {"train": [], "test": []}
    quota = {"train": spec.train_quota, "test": spec.test_quota}
    for src in sorted(by_source):
        recs = sorted(by_source[src], key=lambda r: (r.frame, r.id))
        rng = SplitMix64.for_stream(spec.seed, src)
        order = rng.permutation(len(recs))
        chosen = {"train": [], "test": []}
        frames = {"train": [], "test": []}

        def place(rec, side):
            if not _room(len(chosen[side]), quota[side]):
                return False
            if not _fits(frames[side], rec.frame, spec.min_gap):
                return False
            bisect.insort(frames[side], rec.frame)
            chosen[side].append(rec)
            return True

        for k, idx in enumerate(order):
            rec = recs[idx]
            if k == 0:
                prefs = ("test", "train")
            elif k == 1 or not chosen["train"]:
                prefs = ("train", "test")
            else:
                n_test, total = len(chosen["test"]), len(chosen["train"]) + len(chosen["test"])
                behind = n_test < spec.test_fraction * (total + 1)
                prefs = ("test", "train") if behind else ("train", "test")
            for side in prefs:
                if place(rec, side):
                    break

        for side in ("train", "test"):
            q = quota[side]
            if q is not None and len(chosen[side]) < q and len(recs) >= 2:
                warnings.append(f"source {src}: {side} got {len(chosen[side])} of quota {q}")
            gaps[side].append(frames[side])
        if len(recs) >= 2 and (not chosen["train"] or not chosen["test"]):
            warnings.append(f"source {src}: could not populate both splits")
        per_source[src] = [len(chosen["train"]), len(chosen["test"])]
        train += sorted(chosen["train"], key=lambda r: (r.frame, r.id))
        test += sorted(chosen["test"], key=lambda r: (r.frame, r.id))

    all_frames = [[r.frame for r in by_source[s]] for s in sorted(by_source)]
    report = SplitReport(asdict(spec), len(train), len(test), _mean_gap(gaps["train"]),
                         _mean_gap(gaps["test"]), _mean_gap(all_frames), per_source, warnings)
    return [r.id for r in train], [r.id for r in test], report


def write_id_list(path, ids):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{i}\n" for i in ids))


def read_id_list(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]
