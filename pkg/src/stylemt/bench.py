"""Frame-by-frame throughput benchmark with head toggling.

Frames are replayed one at a time (batch 1) from an image directory or
from synthetic frames. Every frame goes through decode -> shared trunk ->
enabled heads; the time before ``warmup`` seconds is not counted.
"""
from __future__ import annotations

import glob
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .checkpoint import load_checkpoint
from .data.imageio import decode_ppm, encode_ppm
from .errors import ConfigError, DataError


@dataclass
class BenchConfig:
    checkpoint: str
    source: str | None = None       # directory of .ppm frames; None = synthetic
    frame_size: int | None = None   # synthetic frame side; default = model input size
    duration: float = 3.0
    warmup: float = 0.5
    heads: list | None = None       # None = all heads
    repetitions: int = 3
    mode: str = "async"             # async | serial
    n_synthetic: int = 16
    seed: int = 0

    def validate(self):
        if not self.duration > self.warmup >= 0:
            raise ConfigError(f"need duration > warmup >= 0, got duration={self.duration}, warmup={self.warmup}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.mode not in ("async", "serial"):
            raise ConfigError(f"unknown bench mode {self.mode!r}")
        return self


@dataclass
class BenchReport:
    mean_fps: float
    std_fps: float | None
    fps: list
    heads: dict                     # task -> enabled
    frames: int                     # counted frames, all repetitions
    latency_ms: dict = field(default_factory=dict)   # stage -> mean ms per frame
    mode: str = "async"

    def to_dict(self):
        return asdict(self)


def _frames(cfg, size):
    if cfg.source is None:
        rng = np.random.default_rng(cfg.seed)
        side = cfg.frame_size or size
        return [encode_ppm(rng.random((3, side, side))) for _ in range(cfg.n_synthetic)]
    paths = sorted(glob.glob(os.path.join(cfg.source, "*.ppm")))
    if not paths:
        raise DataError(f"no .ppm frames in {cfg.source}")
    out = []
    for p in paths:
        with open(p, "rb") as fh:
            out.append(fh.read())
    return out


def _run_once(model, tasks, frames, cfg):
    heads = [model.heads[t] for t in tasks]
    t_dec = t_enc = t_head = 0.0
    counted = 0
    pool = ThreadPoolExecutor(1) if cfg.mode == "async" else None

    def decode(i):
        t0 = time.perf_counter()
        img = decode_ppm(frames[i % len(frames)])[None]
        return img, time.perf_counter() - t0

    try:
        nxt = pool.submit(decode, 0) if pool else None
        start = time.perf_counter()
        i = 0
        while True:
            if pool:
                img, dd = nxt.result()
                nxt = pool.submit(decode, i + 1)
            else:
                img, dd = decode(i)
            t1 = time.perf_counter()
            feats = model.features(img)
            t2 = time.perf_counter()
            for h in heads:
                h(feats)
            t3 = time.perf_counter()
            i += 1
            now = t3 - start
            if now > cfg.duration:
                break
            if now > cfg.warmup:
                counted += 1
                t_dec += dd
                t_enc += t2 - t1
                t_head += t3 - t2
    finally:
        if pool:
            pool.shutdown(wait=True)
    fps = counted / (cfg.duration - cfg.warmup)
    return fps, counted, (t_dec, t_enc, t_head)


def bench_throughput(cfg: BenchConfig, model=None):
    """Mean +- std fps over repetitions for the configured head subset."""
    cfg.validate()
    if model is None:
        model = load_checkpoint(cfg.checkpoint).to_model()
    model.eval()
    tasks = model.task_names if cfg.heads is None else list(cfg.heads)
    for t in tasks:
        if t not in model.heads:
            raise ConfigError(f"checkpoint has no head {t!r}")
    if not tasks:
        raise ConfigError("no heads selected")
    frames = _frames(cfg, model.cfg.input_size)
    fps, total, acc = [], 0, np.zeros(3)
    for _ in range(cfg.repetitions):
        f, n, times = _run_once(model, tasks, frames, cfg)
        fps.append(f)
        total += n
        acc += times
    lat = {k: (1000.0 * v / total if total else float("nan"))
           for k, v in zip(("decode", "encoder_forward", "heads"), acc)}
    std = statistics.stdev(fps) if len(fps) >= 2 else None
    return BenchReport(statistics.fmean(fps), std, fps, {t: t in tasks for t in model.task_names},
                       total, lat, cfg.mode)


def monotonic_check(reports, alpha=0.05):
    """For reports ordered by nested, shrinking head sets, test with a
    one-sided Welch t-test whether fewer heads gives significantly lower fps.

    Returns a list of (i, p_value, ok) per consecutive pair.
    """
    out = []
    for i in range(len(reports) - 1):
        more, fewer = reports[i], reports[i + 1]
        if not set(t for t, on in fewer.heads.items() if on) <= set(t for t, on in more.heads.items() if on):
            raise ConfigError("head subsets are not nested")
        if len(more.fps) < 2 or len(fewer.fps) < 2:
            raise ConfigError("monotonicity test needs >= 2 repetitions per subset")
        if np.ptp(more.fps) == 0 and np.ptp(fewer.fps) == 0:
            p = 0.0 if fewer.mean_fps < more.mean_fps else 1.0
        else:
            p = float(stats.ttest_ind(fewer.fps, more.fps, equal_var=False, alternative="less").pvalue)
        out.append((i, p, p >= alpha))
    return out
