"""Model snapshot persistence: one checkpoint container for every
parameter group plus a text sidecar describing structure and progress.

Exemplar memory holds raw training clouds and is not serialized; a
reloaded state can keep evaluating but needs its memory re-seeded before
further incremental training.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nn
from .backbone import BackboneParams
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import ExemplarMemory, ModelState
from .errors import ParseError
from .microshape import MicroshapeBasis
from .prototypes import PrototypeTable


def _mlp_arrays(prefix: str, mlp: nn.Mlp, arrays: dict) -> None:
    for i, layer in enumerate(mlp.layers):
        arrays[f"{prefix}.{i}.weight"] = layer.weight
        arrays[f"{prefix}.{i}.bias"] = layer.bias


def _mlp_meta(prefix: str, mlp: nn.Mlp) -> list[str]:
    acts = ",".join(l.activation for l in mlp.layers)
    return [f"{prefix}.activations = {acts}",
            f"{prefix}.frozen = {int(mlp.frozen)}"]


def _mlp_from(prefix: str, arrays: dict, meta: dict) -> nn.Mlp:
    acts = meta[f"{prefix}.activations"].split(",")
    layers = [
        nn.Layer(arrays[f"{prefix}.{i}.weight"].astype(np.float64),
                 arrays[f"{prefix}.{i}.bias"].astype(np.float64), act)
        for i, act in enumerate(acts)
    ]
    return nn.Mlp(layers, frozen=bool(int(meta[f"{prefix}.frozen"])))


def save_backbone(backbone: BackboneParams, path, name: str = "backbone") -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    _mlp_arrays(name, backbone.mlp, arrays)
    save_checkpoint(path, arrays)
    meta = [f"{name}.q = {backbone.q}", f"{name}.role = {backbone.role}"]
    meta.extend(_mlp_meta(name, backbone.mlp))
    path.with_suffix(path.suffix + ".meta").write_text("\n".join(meta) + "\n")


def load_backbone(path, name: str = "backbone") -> BackboneParams:
    path = Path(path)
    arrays = load_checkpoint(path)
    meta = {}
    for line in path.with_suffix(path.suffix + ".meta").read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return BackboneParams(mlp=_mlp_from(name, arrays, meta),
                          q=int(meta[f"{name}.q"]),
                          role=meta.get(f"{name}.role", "pipeline"))


def save_basis(basis: MicroshapeBasis, path) -> None:
    path = Path(path)
    save_checkpoint(path, {"microshape.P": basis.basis,
                           "microshape.sigma": basis.singular_values})
    meta = [f"energy_threshold = {basis.energy_threshold!r}"]
    for key, value in sorted(basis.provenance.items()):
        meta.append(f"provenance.{key} = {value}")
    path.with_suffix(path.suffix + ".meta").write_text("\n".join(meta) + "\n")


def load_basis(path) -> MicroshapeBasis:
    path = Path(path)
    arrays = load_checkpoint(path)
    meta = {}
    for line in path.with_suffix(path.suffix + ".meta").read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    prov = {key[len("provenance."):]: value for key, value in meta.items()
            if key.startswith("provenance.")}
    return MicroshapeBasis(basis=arrays["microshape.P"].astype(np.float64),
                           singular_values=arrays["microshape.sigma"].astype(
                               np.float64),
                           energy_threshold=float(meta["energy_threshold"]),
                           provenance=prov)


def save_state(state: ModelState, path) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    _mlp_arrays("backbone", state.backbone.mlp, arrays)
    _mlp_arrays("projection", state.projection, arrays)
    _mlp_arrays("relation", state.relation, arrays)
    if state.basis is not None:
        arrays["microshape.P"] = state.basis.basis
        arrays["microshape.sigma"] = state.basis.singular_values
    for cid, vec in sorted(state.prototypes.entries.items()):
        arrays[f"prototype.{cid}"] = vec
    save_checkpoint(path, arrays)

    meta = [
        f"task_index = {state.task_index}",
        "seen_classes = " + ",".join(str(c) for c in state.seen_classes),
        f"use_microshape = {int(state.use_microshape)}",
        f"loss_variant = {state.loss_variant}",
        f"backbone.q = {state.backbone.q}",
        f"prototypes.mode = {state.prototypes.mode}",
        f"prototypes.dim = {state.prototypes.dim}",
        f"memory.seed = "
        f"{state.memory.selection_seed if state.memory is not None else ''}",
    ]
    for prefix, mlp in (("backbone", state.backbone.mlp),
                        ("projection", state.projection),
                        ("relation", state.relation)):
        meta.extend(_mlp_meta(prefix, mlp))
    if state.basis is not None:
        meta.append(f"basis.energy_threshold = {state.basis.energy_threshold!r}")
        for key, value in sorted(state.basis.provenance.items()):
            meta.append(f"basis.provenance.{key} = {value}")
    path.with_suffix(path.suffix + ".meta").write_text("\n".join(meta) + "\n")


def load_state(path) -> ModelState:
    path = Path(path)
    arrays = load_checkpoint(path)
    meta: dict[str, str] = {}
    meta_path = path.with_suffix(path.suffix + ".meta")
    for lineno, line in enumerate(meta_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"{meta_path}: line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()

    backbone = BackboneParams(mlp=_mlp_from("backbone", arrays, meta),
                              q=int(meta["backbone.q"]))
    basis = None
    if "microshape.P" in arrays:
        prov = {key[len("basis.provenance."):]: value
                for key, value in meta.items()
                if key.startswith("basis.provenance.")}
        basis = MicroshapeBasis(
            basis=arrays["microshape.P"].astype(np.float64),
            singular_values=arrays["microshape.sigma"].astype(np.float64),
            energy_threshold=float(meta.get("basis.energy_threshold", "0.95")),
            provenance=prov)
    entries = {int(name.split(".")[1]): arr.astype(np.float64)
               for name, arr in arrays.items() if name.startswith("prototype.")}
    prototypes = PrototypeTable(mode=meta["prototypes.mode"],
                                dim=int(meta["prototypes.dim"]),
                                entries=entries)
    seen = [int(v) for v in meta["seen_classes"].split(",") if v]
    memory = None
    if meta.get("memory.seed"):
        memory = ExemplarMemory(selection_seed=int(meta["memory.seed"]))
    return ModelState(
        backbone=backbone,
        projection=_mlp_from("projection", arrays, meta),
        relation=_mlp_from("relation", arrays, meta),
        basis=basis, prototypes=prototypes, seen_classes=seen,
        task_index=int(meta["task_index"]),
        use_microshape=bool(int(meta["use_microshape"])),
        loss_variant=meta["loss_variant"], memory=memory)
