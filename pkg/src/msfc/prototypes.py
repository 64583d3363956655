"""Per-class prototype vectors: loaded word vectors, microshape feature
means, or deterministic synthetic semantics for desk-scale runs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .backbone import BackboneParams
from .cloud import LabeledInstance
from .errors import MsfcError, ParseError, ProtocolError
from .microshape import MicroshapeBasis, embed, microshape_feature


class PrototypeLoadError(MsfcError):
    """A requested class is missing or the file dimensions disagree."""


@dataclass
class PrototypeTable:
    mode: str  # "language" | "feature" | "synthetic"
    dim: int
    entries: dict[int, np.ndarray] = field(default_factory=dict)
    source: str = ""

    def vector(self, class_id: int) -> np.ndarray:
        if class_id not in self.entries:
            raise ProtocolError(f"no prototype for class {class_id}")
        return self.entries[class_id]

    def covers(self, class_ids) -> bool:
        return all(cid in self.entries for cid in class_ids)


def load_language_prototypes(path, class_names: dict[int, str]) -> PrototypeTable:
    """Read "name v1 ... vd" lines; unknown names are ignored.

    class_names maps class_id -> name for every class that must be present.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: not a number") from None
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise PrototypeLoadError(
                f"{path}: line {lineno}: dimension {vec.size}, expected {dim}")
        vectors[parts[0]] = vec
    if dim is None:
        raise PrototypeLoadError(f"{path}: no vectors found")
    entries = {}
    for class_id, name in class_names.items():
        if name not in vectors:
            raise PrototypeLoadError(f"{path}: missing class {name!r}")
        entries[class_id] = vectors[name]
    return PrototypeTable(mode="language", dim=dim, entries=entries,
                          source=str(path))


def write_prototypes(path, table: PrototypeTable,
                     class_names: dict[int, str]) -> None:
    lines = []
    for class_id, vec in sorted(table.entries.items()):
        values = " ".join(f"{v:.9g}" for v in vec)
        lines.append(f"{class_names[class_id]} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def feature_prototypes(instances_by_class: dict[int, list[LabeledInstance]],
                       backbone: BackboneParams, basis: MicroshapeBasis,
                       projection: nn.Mlp) -> PrototypeTable:
    """Mean post-projection embedding of each class's available instances."""
    entries = {}
    for class_id, instances in instances_by_class.items():
        if not instances:
            raise ProtocolError(f"class {class_id} has no instances")
        zs = [embed(microshape_feature(inst.cloud, backbone, basis), projection)
              for inst in instances]
        entries[class_id] = np.mean(zs, axis=0)
    return PrototypeTable(mode="feature", dim=projection.out_dim, entries=entries)


def synth_prototypes(class_specs: list[tuple[int, str]], d: int, seed: int = 0,
                     kappa: float = 0.3) -> PrototypeTable:
    """Deterministic stand-in semantics.

    Classes of the same shape family share a base direction; each class adds
    kappa-scaled seeded noise, so within-family cosines exceed cross-family
    ones.
    """
    bases: dict[str, np.ndarray] = {}
    entries = {}
    for class_id, family in class_specs:
        if family not in bases:
            fam_seed = np.random.SeedSequence(
                [seed, zlib.crc32(family.encode("utf-8"))])
            v = np.random.default_rng(fam_seed).normal(size=d)
            bases[family] = v / np.linalg.norm(v)
        cls_rng = np.random.default_rng(np.random.SeedSequence([seed, class_id]))
        noise = cls_rng.normal(size=d)
        noise /= np.linalg.norm(noise)
        vec = bases[family] + kappa * noise
        entries[class_id] = vec / np.linalg.norm(vec)
    return PrototypeTable(mode="synthetic", dim=d, entries=entries,
                          source=f"seed={seed}")
