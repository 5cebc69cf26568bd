"""Synthetic style dataset: labels live in global appearance, not content.

Three tasks, each a style factor applied to random smooth content:

* tint  - per-channel gain (neutral, warm, cool)
* grain - additive noise of fixed strength, smoothed to correlation
          length 0, 1.5 or 4 pixels
* veil  - none, or a 50% blend toward flat gray (halves contrast)
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError
from .imageio import encode_image
from .records import SampleRecord, write_manifest
from .taxonomy import Task, Taxonomy

TINT_GAINS = np.array([[1.0, 1.0, 1.0], [1.15, 1.0, 0.8], [0.8, 0.97, 1.18]])
GRAIN_SIGMAS = (0.0, 1.5, 4.0)
GRAIN_STD = 0.06
VEIL_ALPHA = 0.5
VEIL_GRAY = 0.7
CONTENT_STD = (0.12, 0.18)

SYNTH_TAXONOMY = Taxonomy((
    Task("tint", ("neutral", "warm", "cool")),
    Task("grain", ("fine", "medium", "coarse")),
    Task("veil", ("clear", "veiled")),
))


@dataclass
class SynthConfig:
    n_train: int = 600
    n_test: int = 200
    size: int = 64
    # per task, relative class frequencies; None = balanced
    proportions: dict | None = None

    def validate(self):
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError("synthetic dataset needs positive train and test counts")
        if self.size < 8:
            raise ConfigError(f"image size {self.size} too small")
        return self


@dataclass
class SynthDataset:
    root: str
    train_manifest: str
    test_manifest: str
    taxonomy_file: str
    taxonomy: Taxonomy = SYNTH_TAXONOMY


def _class_counts(n, k, props):
    if props is None:
        props = [1.0] * k
    p = np.asarray(props, dtype=np.float64)
    if p.shape != (k,) or np.any(p < 0) or p.sum() <= 0:
        raise ConfigError(f"bad class proportions {props} for {k} classes")
    exact = n * p / p.sum()
    counts = np.floor(exact).astype(int)
    rest = np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]
    counts[rest] += 1
    return counts


def _labels(n, rng, props):
    cols = []
    for t in SYNTH_TAXONOMY.tasks:
        counts = _class_counts(n, t.n_classes, (props or {}).get(t.name))
        col = np.repeat(np.arange(t.n_classes), counts)
        rng.shuffle(col)
        cols.append(col)
    return np.stack(cols, axis=1)


def render(labels, size, rng):
    """One 3 x size x size image in [0, 1] for (tint, grain, veil) labels."""
    tint, grain, veil = (int(v) for v in labels)
    base = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    chroma = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, size / 8, size / 8), mode="wrap")
    content = base[None] + 0.25 * chroma
    content -= content.mean()
    content *= rng.uniform(*CONTENT_STD) / content.std()
    img = 0.5 + content
    img = img * TINT_GAINS[tint][:, None, None]
    noise = rng.standard_normal((size, size))
    if GRAIN_SIGMAS[grain] > 0:
        noise = gaussian_filter(noise, sigma=GRAIN_SIGMAS[grain], mode="wrap")
    img = img + GRAIN_STD * noise / noise.std()
    if veil:
        img = (1 - VEIL_ALPHA) * img + VEIL_ALPHA * VEIL_GRAY
    return np.clip(img, 0.0, 1.0)


def contrast(img):
    """Global contrast: std of the Rec.601 luminance."""
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return float(lum.std())


def synth_style_dataset(cfg: SynthConfig, seed, root):
    """Write images, two manifests and the taxonomy under ``root``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    out = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        labels = _labels(n, rng, cfg.proportions)
        records = []
        for i in range(n):
            rel = f"images/{split}_{i:05d}.ppm"
            encode_image(os.path.join(root, rel), render(labels[i], cfg.size, rng))
            records.append(SampleRecord(rel, f"{split}-{i // 50:03d}", i % 50, tuple(int(v) for v in labels[i])))
        path = os.path.join(root, f"{split}.csv")
        write_manifest(path, records, SYNTH_TAXONOMY)
        out[split] = path
    tax_path = os.path.join(root, "taxonomy.txt")
    with open(tax_path, "w", encoding="utf-8") as fh:
        fh.write(SYNTH_TAXONOMY.to_text())
    return SynthDataset(root, out["train"], out["test"], tax_path)
