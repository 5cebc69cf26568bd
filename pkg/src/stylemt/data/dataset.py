"""In-memory image/label arrays built from a manifest."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .imageio import decode_image
from .records import read_manifest


@dataclass
class Dataset:
    images: np.ndarray      # N x 3 x H x W float32
    labels: np.ndarray      # N x T int64, -1 = missing
    ids: list
    taxonomy: object

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], self.taxonomy)

    def select_ids(self, ids):
        pos = {v: i for i, v in enumerate(self.ids)}
        missing = [i for i in ids if i not in pos]
        if missing:
            raise DataError(f"unknown record id {missing[0]!r}")
        return self.subset([pos[i] for i in ids])


def load_records(records, taxonomy, root=".", workers=1):
    """Decode every record's image (relative paths resolve against root)."""
    if not records:
        raise DataError("no records to load")
    paths = [r.path if os.path.isabs(r.path) else os.path.join(root, r.path) for r in records]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            imgs = list(ex.map(decode_image, paths))
    else:
        imgs = [decode_image(p) for p in paths]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DataError(f"images differ in size: {sorted(shapes)}")
    labels = np.array([r.labels for r in records], dtype=np.int64).reshape(len(records), len(taxonomy))
    return Dataset(np.stack(imgs), labels, [r.id for r in records], taxonomy)


def load_dataset(manifest, taxonomy, workers=1):
    records = read_manifest(manifest, taxonomy)
    return load_records(records, taxonomy, root=os.path.dirname(os.path.abspath(manifest)), workers=workers)
