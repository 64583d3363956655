"""Orthonormal microshape basis: K-means over base-task point features,
SVD of the cluster centers, energy-thresholded truncation, and the
permutation-invariant projected feature of a cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbone import BackboneParams, extract_point_features
from .cloud import LabeledInstance
from .errors import ConfigError, InputError, ProtocolError

DEFAULT_ENERGY_THRESHOLD = 0.95
DEFAULT_FEATURE_CAP = 500_000


@dataclass
class ClusterCenters:
    centers: np.ndarray  # (q, m), one center per column
    inertia_history: list[float]
    seed: int

    @property
    def m(self) -> int:
        return self.centers.shape[1]


@dataclass
class MicroshapeBasis:
    basis: np.ndarray  # (q, u), orthonormal columns
    singular_values: np.ndarray
    energy_threshold: float
    provenance: dict = field(default_factory=dict)

    @property
    def u(self) -> int:
        return self.basis.shape[1]


def collect_base_features(backbone: BackboneParams,
                          base_train: list[LabeledInstance],
                          cap: int = DEFAULT_FEATURE_CAP,
                          seed: int = 0) -> np.ndarray:
    """Point features of all base training clouds, row-stacked in
    (instance, point) order; uniformly subsampled to `cap` rows if larger.
    """
    if not backbone.frozen:
        raise ProtocolError("feature collection requires a frozen backbone")
    if not base_train:
        raise ProtocolError("empty base training set")
    rows = np.vstack([extract_point_features(backbone, inst.cloud)
                      for inst in base_train])
    if rows.shape[0] > cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(rows.shape[0], size=cap, replace=False))
        rows = rows[keep]
    return rows


def kmeans(features: np.ndarray, m: int, seed: int = 0, max_iters: int = 100,
           tol: float = 1e-6) -> ClusterCenters:
    """Lloyd iterations with seeded farthest-first initialization.

    Empty clusters are re-seeded to the point farthest from its assigned
    center.  The recorded inertia (sum of squared distances at assignment
    time) is non-increasing across iterations.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < m:
        raise InputError(f"{n} feature rows < {m} clusters")
    rng = np.random.default_rng(seed)

    # farthest-first spread: greedy maximization of distance to chosen set
    centers = np.empty((m, features.shape[1]))
    first = int(rng.integers(n))
    centers[0] = features[first]
    dist = ((features - centers[0]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        centers[i] = features[nxt]
        np.minimum(dist, ((features - centers[i]) ** 2).sum(axis=1), out=dist)

    sq_feat = (features * features).sum(axis=1)
    inertia_history: list[float] = []
    prev_assign = None
    for _ in range(max_iters):
        # squared distances via the expansion ||x||^2 - 2 x.c + ||c||^2
        d2 = (sq_feat[:, None] - 2.0 * features @ centers.T
              + (centers * centers).sum(axis=1)[None, :])
        assign = d2.argmin(axis=1)
        point_cost = ((features - centers[assign]) ** 2).sum(axis=1)
        if prev_assign is not None:
            # exact-cost guard: the expansion can flip near-ties, so never
            # accept a reassignment that the exact distance says is worse
            prev_cost = ((features - centers[prev_assign]) ** 2).sum(axis=1)
            worse = prev_cost < point_cost
            assign[worse] = prev_assign[worse]
            point_cost[worse] = prev_cost[worse]
        prev_assign = assign
        inertia_history.append(float(point_cost.sum()))
        new_centers = centers.copy()
        for j in range(m):
            mask = assign == j
            if mask.any():
                new_centers[j] = features[mask].mean(axis=0)
            else:
                new_centers[j] = features[int(np.argmax(point_cost))]
        movement = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if movement < tol:
            break
    return ClusterCenters(centers=centers.T.copy(),
                          inertia_history=inertia_history, seed=seed)


def basis_size(singular_values: np.ndarray, energy_threshold: float,
               squared_energy: bool = True) -> int:
    """Smallest count whose cumulative spectrum energy meets the threshold."""
    s = np.asarray(singular_values, dtype=np.float64)
    energy = s * s if squared_energy else np.abs(s)
    total = energy.sum()
    if total <= 0.0:
        raise InputError("rank-0 center matrix has no basis")
    cum = np.cumsum(energy) / total
    return int(np.searchsorted(cum, energy_threshold - 1e-12) + 1)


def build_basis(centers: ClusterCenters,
                energy_threshold: float = DEFAULT_ENERGY_THRESHOLD,
                squared_energy: bool = True,
                provenance: dict | None = None) -> MicroshapeBasis:
    """SVD of the center matrix; keep leading left singular vectors."""
    c = np.asarray(centers.centers, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise InputError("non-finite cluster centers")
    left, sigma, _ = np.linalg.svd(c, full_matrices=False)
    u = basis_size(sigma, energy_threshold, squared_energy)
    prov = {"m": centers.m, "seed": centers.seed,
            "energy_threshold": energy_threshold,
            "squared_energy": squared_energy}
    prov.update(provenance or {})
    return MicroshapeBasis(basis=left[:, :u].copy(), singular_values=sigma,
                           energy_threshold=energy_threshold, provenance=prov)


def microshape_feature(cloud: np.ndarray, backbone: BackboneParams,
                       basis: MicroshapeBasis) -> np.ndarray:
    """Average inner product of every point feature with every basis column."""
    feats = extract_point_features(backbone, cloud)
    if feats.shape[1] != basis.basis.shape[0]:
        raise ConfigError(
            f"feature width {feats.shape[1]} != basis rows {basis.basis.shape[0]}")
    return (feats @ basis.basis).mean(axis=0)


def embed(e: np.ndarray, projection: nn.Mlp) -> np.ndarray:
    """Single ReLU layer mapping the pooled basis feature to prototype space."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if e.shape[1] != projection.in_dim:
        raise ConfigError(
            f"feature width {e.shape[1]} != projection input {projection.in_dim}")
    z, _ = nn.mlp_forward(projection, e)
    return z[0] if z.shape[0] == 1 else z
