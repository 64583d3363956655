"""Deterministic procedural dataset generator.

Emits surface-sampled clouds for a handful of shape families in two
domains: "synthetic" clouds are clean, "real" clouds are corrupted with
jitter, a half-space occlusion cut, clutter points, and a density bias,
imitating the gap between CAD models and real scans.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import LabeledInstance, normalize_cloud, write_cloud
from .errors import ConfigError, InputError, ParseError

FAMILY_KINDS = (
    "sphere", "cuboid", "cylinder", "cone", "torus",
    "ellipsoid", "capsule", "pyramid", "composite-legged", "composite-stacked",
)


@dataclass
class CorruptionProfile:
    jitter_sigma: float = 0.02
    occlusion_fraction: float = 0.25
    clutter_fraction: float = 0.10
    density_bias: float = 0.5


@dataclass
class ShapeFamily:
    name: str
    kind: str
    domain: str = "synthetic"  # "synthetic" -> clean, "real" -> corrupted
    params: dict = field(default_factory=dict)  # key -> (lo, hi) range overrides
    corruption: CorruptionProfile = field(default_factory=CorruptionProfile)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        if self.domain not in ("synthetic", "real"):
            raise ConfigError(f"unknown domain {self.domain!r}")


@dataclass
class ManifestRow:
    path: str
    class_name: str
    class_id: int
    domain: str
    split: str


# Default parameter ranges per kind; a ShapeFamily can narrow any of them
# to make several distinguishable classes out of one kind.
_DEFAULT_RANGES = {
    "sphere": {},
    "ellipsoid": {"b": (0.35, 0.7), "c": (0.2, 0.5)},
    "cuboid": {"sy": (0.4, 1.0), "sz": (0.2, 0.8)},
    "cylinder": {"radius": (0.2, 0.5)},
    "cone": {"radius": (0.3, 0.7)},
    "torus": {"tube": (0.15, 0.4)},
    "capsule": {"radius": (0.2, 0.45)},
    "pyramid": {"half_base": (0.4, 0.8)},
    "composite-legged": {"leg": (0.05, 0.12), "top": (0.08, 0.18)},
    "composite-stacked": {"ratio": (0.4, 0.7)},
}


def _draw_params(family: ShapeFamily, rng: np.random.Generator) -> dict:
    ranges = dict(_DEFAULT_RANGES[family.kind])
    ranges.update(family.params)
    drawn = {}
    for key, (lo, hi) in ranges.items():
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
            raise ConfigError(f"{family.name}: degenerate range for {key!r}")
        drawn[key] = rng.uniform(lo, hi)
    return drawn


def _unit_dirs(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, l, p):
    # Antithetic pairs keep the empirical centroid at exactly zero, so the
    # normalized cloud sits exactly on the unit sphere.
    half = l // 2
    dirs = _unit_dirs(rng, half)
    points = [dirs, -dirs]
    if l % 2:
        d = _unit_dirs(rng, 1)[0]
        helper = _unit_dirs(rng, 1)[0]
        ortho = helper - d * (helper @ d)
        ortho /= np.linalg.norm(ortho)
        # planar triple at 120 degrees sums to zero
        triple = np.stack([
            d,
            -0.5 * d + np.sqrt(3) / 2 * ortho,
            -0.5 * d - np.sqrt(3) / 2 * ortho,
        ])
        points = [dirs[:-1], -dirs[:-1], triple]
    return np.vstack(points)


def _box_surface(rng, n, half_sizes, center=(0.0, 0.0, 0.0)):
    hx, hy, hz = half_sizes
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    pts = np.empty((n, 3))
    for i, (f, a, b) in enumerate(zip(faces, u, v)):
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        p = [0.0, 0.0, 0.0]
        p[axis] = sign * half_sizes[axis]
        rest = [j for j in range(3) if j != axis]
        p[rest[0]] = a * half_sizes[rest[0]]
        p[rest[1]] = b * half_sizes[rest[1]]
        pts[i] = p
    return pts + np.asarray(center)


def _sample_cuboid(rng, l, p):
    return _box_surface(rng, l, (1.0, p["sy"], p["sz"]))


def _sample_cylinder(rng, l, p):
    r, h = p["radius"], 1.0
    side_area = 2 * np.pi * r * 2 * h
    cap_area = 2 * np.pi * r * r
    n_side = int(round(l * side_area / (side_area + cap_area)))
    ang = rng.uniform(0, 2 * np.pi, size=l)
    pts = np.empty((l, 3))
    pts[:n_side, 0] = r * np.cos(ang[:n_side])
    pts[:n_side, 1] = r * np.sin(ang[:n_side])
    pts[:n_side, 2] = rng.uniform(-h, h, size=n_side)
    rad = r * np.sqrt(rng.random(l - n_side))
    pts[n_side:, 0] = rad * np.cos(ang[n_side:])
    pts[n_side:, 1] = rad * np.sin(ang[n_side:])
    pts[n_side:, 2] = np.where(rng.random(l - n_side) < 0.5, h, -h)
    return pts


def _sample_cone(rng, l, p):
    r, h = p["radius"], 1.0
    n_side = int(round(l * 0.75))
    t = np.sqrt(rng.random(n_side))  # area-uniform along the slant
    ang = rng.uniform(0, 2 * np.pi, size=l)
    pts = np.empty((l, 3))
    pts[:n_side, 0] = r * t * np.cos(ang[:n_side])
    pts[:n_side, 1] = r * t * np.sin(ang[:n_side])
    pts[:n_side, 2] = h * (1.0 - t)
    rad = r * np.sqrt(rng.random(l - n_side))
    pts[n_side:, 0] = rad * np.cos(ang[n_side:])
    pts[n_side:, 1] = rad * np.sin(ang[n_side:])
    pts[n_side:, 2] = 0.0
    return pts


def _sample_torus(rng, l, p):
    rr, tube = 1.0, p["tube"]
    u = rng.uniform(0, 2 * np.pi, size=l)
    v = rng.uniform(0, 2 * np.pi, size=l)
    ring = rr + tube * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), tube * np.sin(v)])


def _sample_ellipsoid(rng, l, p):
    dirs = _unit_dirs(rng, l)
    return dirs * np.array([1.0, p["b"], p["c"]])


def _sample_capsule(rng, l, p):
    r, h = p["radius"], 1.0
    side = 2 * np.pi * r * 2 * h
    caps = 4 * np.pi * r * r
    n_side = int(round(l * side / (side + caps)))
    ang = rng.uniform(0, 2 * np.pi, size=n_side)
    pts = [np.column_stack([r * np.cos(ang), r * np.sin(ang),
                            rng.uniform(-h, h, size=n_side)])]
    dirs = _unit_dirs(rng, l - n_side) * r
    dirs[:, 2] = np.abs(dirs[:, 2]) * np.where(
        rng.random(l - n_side) < 0.5, 1.0, -1.0)
    dirs[:, 2] += np.sign(dirs[:, 2]) * h
    pts.append(dirs)
    return np.vstack(pts)


def _sample_pyramid(rng, l, p):
    hb, h = p["half_base"], 1.0
    n_base = int(round(l * 0.3))
    pts = np.empty((l, 3))
    pts[:n_base, 0] = rng.uniform(-hb, hb, size=n_base)
    pts[:n_base, 1] = rng.uniform(-hb, hb, size=n_base)
    pts[:n_base, 2] = 0.0
    n_side = l - n_base
    face = rng.choice(4, size=n_side)
    t = 1.0 - np.sqrt(rng.random(n_side))  # toward-apex height fraction
    s = rng.uniform(-1, 1, size=n_side)
    half = hb * (1.0 - t)
    x = np.where(face < 2, np.where(face == 0, half, -half), s * half)
    y = np.where(face < 2, s * half, np.where(face == 2, half, -half))
    pts[n_base:] = np.column_stack([x, y, h * t])
    return pts


def _sample_composite_legged(rng, l, p):
    leg, top = p["leg"], p["top"]
    n_top = int(round(l * 0.5))
    pts = [_box_surface(rng, n_top, (1.0, 1.0, top), center=(0, 0, 1.0))]
    n_leg = l - n_top
    per = [n_leg // 4] * 4
    per[0] += n_leg - sum(per)
    for (cx, cy), n in zip([(0.8, 0.8), (0.8, -0.8), (-0.8, 0.8), (-0.8, -0.8)], per):
        pts.append(_box_surface(rng, n, (leg, leg, 0.5), center=(cx, cy, 0.5)))
    return np.vstack(pts)


def _sample_composite_stacked(rng, l, p):
    ratio = p["ratio"]
    n_low = int(round(l * 0.6))
    lower = _box_surface(rng, n_low, (1.0, 1.0, 0.5), center=(0, 0, 0.5))
    upper = _box_surface(rng, l - n_low, (ratio, ratio, 0.5 * ratio),
                         center=(0, 0, 1.0 + 0.5 * ratio))
    return np.vstack([lower, upper])


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cuboid": _sample_cuboid,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "ellipsoid": _sample_ellipsoid,
    "capsule": _sample_capsule,
    "pyramid": _sample_pyramid,
    "composite-legged": _sample_composite_legged,
    "composite-stacked": _sample_composite_stacked,
}


def corrupt_cloud(cloud: np.ndarray, profile: CorruptionProfile,
                  rng: np.random.Generator) -> np.ndarray:
    """Apply jitter, half-space occlusion, clutter, and density bias."""
    out = cloud.copy()
    if profile.jitter_sigma > 0.0:
        out = out + rng.normal(scale=profile.jitter_sigma, size=out.shape)
    f = profile.occlusion_fraction
    if f > 0.0:
        normal = _unit_dirs(rng, 1)[0]
        proj = out @ normal
        keep_count = int(np.ceil((1.0 - f) * out.shape[0]))
        keep_count = max(keep_count, 1)
        order = np.argsort(proj, kind="stable")
        out = out[np.sort(order[:keep_count])]
    if profile.density_bias > 0.0:
        axis = _unit_dirs(rng, 1)[0]
        proj = out @ axis
        upper = proj > np.median(proj)
        drop = upper & (rng.random(out.shape[0]) < profile.density_bias)
        if drop.all():
            drop[0] = False
        out = out[~drop]
    if profile.clutter_fraction > 0.0:
        n_clutter = int(round(profile.clutter_fraction * out.shape[0]))
        if n_clutter:
            lo = out.min(axis=0)
            hi = out.max(axis=0)
            clutter = rng.uniform(lo, hi, size=(n_clutter, 3))
            out = np.vstack([out, clutter])
    return out


def sample_family(family: ShapeFamily, l: int, seed) -> np.ndarray:
    """One normalized cloud of the family; clean or corrupted per its domain."""
    if l < 3:
        raise InputError("need at least 3 points per cloud")
    rng = np.random.default_rng(seed)
    params = _draw_params(family, rng)
    cloud = _SAMPLERS[family.kind](rng, l, params)
    if family.domain == "real":
        cloud = corrupt_cloud(cloud, family.corruption, rng)
    return normalize_cloud(cloud)


def generate_dataset(families: list[ShapeFamily], per_class_counts: tuple[int, int],
                     l: int, seed: int
                     ) -> tuple[list[LabeledInstance], list[ManifestRow]]:
    """Generate (train, test) instances for every family; class_id = index."""
    if not families:
        raise ConfigError("no shape families given")
    n_train, n_test = per_class_counts
    if n_train < 1 or n_test < 1:
        raise ConfigError("per-class counts must be >= 1")
    instances: list[LabeledInstance] = []
    manifest: list[ManifestRow] = []
    for class_id, family in enumerate(families):
        for split, count, split_code in (("train", n_train, 0), ("test", n_test, 1)):
            for index in range(count):
                inst_seed = np.random.SeedSequence(
                    [seed, class_id, split_code, index])
                cloud = sample_family(family, l, inst_seed)
                instances.append(LabeledInstance(
                    cloud=cloud, class_id=class_id, class_name=family.name,
                    domain=family.domain, split=split))
                manifest.append(ManifestRow(
                    path=f"{family.name}/{split}_{index:04d}.xyz",
                    class_name=family.name, class_id=class_id,
                    domain=family.domain, split=split))
    return instances, manifest


def write_manifest(rows: list[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class_name", "class_id", "domain", "split"])
        for r in rows:
            writer.writerow([r.path, r.class_name, r.class_id, r.domain, r.split])


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"path", "class_name", "class_id", "domain", "split"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise ParseError(f"{path}: bad manifest header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(ManifestRow(
                    path=row["path"], class_name=row["class_name"],
                    class_id=int(row["class_id"]), domain=row["domain"],
                    split=row["split"]))
            except (TypeError, ValueError):
                raise ParseError(f"{path}: line {lineno}: bad row") from None
    return rows


def write_dataset(out_dir, instances: list[LabeledInstance],
                  manifest: list[ManifestRow]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for inst, row in zip(instances, manifest):
        target = out_dir / row.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_cloud(inst.cloud, target)
    write_manifest(manifest, out_dir / "manifest.csv")


def load_dataset(data_dir) -> tuple[list[LabeledInstance], list[ManifestRow]]:
    from .cloud import read_cloud
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / "manifest.csv")
    instances = [
        LabeledInstance(cloud=read_cloud(data_dir / r.path), class_id=r.class_id,
                        class_name=r.class_name, domain=r.domain, split=r.split)
        for r in manifest
    ]
    return instances, manifest
