"""Point-cloud primitives: normalization, farthest-point sampling, I/O,
train-time augmentation.

A point cloud is a float64 numpy array of shape (l, 3), one ordered row
per point.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError


@dataclass
class LabeledInstance:
    cloud: np.ndarray
    class_id: int
    class_name: str
    domain: str  # "synthetic" | "real"
    split: str   # "train" | "test"


@dataclass
class AugmentConfig:
    shift_range: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.25)
    dropout_prob: float = 0.1
    seed: int = 0


def check_cloud(cloud: np.ndarray) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
        raise InputError(f"cloud must be (l, 3) with l >= 1, got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise InputError("cloud contains non-finite coordinates")
    return cloud


def normalize_cloud(cloud: np.ndarray) -> np.ndarray:
    """Center at the origin and scale so the farthest point sits at radius 1."""
    cloud = check_cloud(cloud)
    centered = cloud - cloud.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1).max())
    if radius > 0.0:
        centered = centered / radius
    return centered


def fps_sample(cloud: np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling.

    Each new point maximizes the distance to its nearest already-selected
    point; ties break toward the lowest index.  Clouds shorter than k are
    padded by repeating points so downstream tensors keep a fixed shape.
    """
    cloud = check_cloud(cloud)
    l = cloud.shape[0]
    if k < 1:
        raise InputError("k must be >= 1")
    if start_index < 0 or start_index >= l:
        raise InputError("start_index outside the cloud")
    n_pick = min(k, l)
    chosen = np.empty(n_pick, dtype=np.intp)
    chosen[0] = start_index
    dist = ((cloud - cloud[start_index]) ** 2).sum(axis=1)
    for i in range(1, n_pick):
        nxt = int(np.argmax(dist))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        new_dist = ((cloud - cloud[nxt]) ** 2).sum(axis=1)
        np.minimum(dist, new_dist, out=dist)
    sampled = cloud[chosen]
    if k > l:
        pad = sampled[np.arange(k - l) % l]
        sampled = np.vstack([sampled, pad])
    return sampled


def augment(instance: LabeledInstance, cfg: AugmentConfig) -> LabeledInstance:
    """One shared shift and scale per cloud, then independent point dropout.

    Deterministic in cfg.seed; at least one point always survives.
    """
    cloud = check_cloud(instance.cloud)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.scale_range
    if lo <= 0.0 or hi < lo:
        raise InputError(f"bad scale_range {cfg.scale_range}")
    if not 0.0 <= cfg.dropout_prob < 1.0:
        raise InputError(f"bad dropout_prob {cfg.dropout_prob}")
    shift = rng.uniform(-cfg.shift_range, cfg.shift_range, size=3)
    scale = rng.uniform(lo, hi)
    out = cloud * scale + shift
    if cfg.dropout_prob > 0.0:
        keep = rng.random(out.shape[0]) >= cfg.dropout_prob
        if not keep.any():
            keep[0] = True
        out = out[keep]
    return replace(instance, cloud=out)


def augment_batch(clouds: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Fixed-shape augmentation used inside training loops.

    Same shift/scale/dropout semantics as :func:`augment` per cloud, but
    dropped points are overwritten with surviving ones so the (B, l, 3)
    shape is preserved for batched tensor math.
    """
    rng = np.random.default_rng(cfg.seed)
    b, l, _ = clouds.shape
    lo, hi = cfg.scale_range
    shifts = rng.uniform(-cfg.shift_range, cfg.shift_range, size=(b, 1, 3))
    scales = rng.uniform(lo, hi, size=(b, 1, 1))
    out = clouds * scales + shifts
    if cfg.dropout_prob > 0.0:
        for i in range(b):
            keep = rng.random(l) >= cfg.dropout_prob
            if not keep.any():
                keep[0] = True
            survivors = np.flatnonzero(keep)
            dropped = np.flatnonzero(~keep)
            if dropped.size:
                out[i, dropped] = out[i, survivors[dropped % survivors.size]]
    return out


def write_cloud(cloud: np.ndarray, path) -> None:
    """Text format: one "x y z" line per point, 9 significant digits."""
    cloud = check_cloud(cloud)
    lines = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in cloud]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> np.ndarray:
    points = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 fields")
        try:
            points.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: not a number") from None
    if not points:
        raise ParseError(f"{path}: empty cloud file")
    return np.array(points, dtype=np.float64)
