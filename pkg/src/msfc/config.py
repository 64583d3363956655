"""Run configuration: defaults, key-value config files, flag overrides.

Precedence is flags > config file > defaults; the MSFC_SEED environment
variable overrides the seed from any source.  Every command writes its
fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    real_data_dir: str = ""
    out_dir: str = "out"
    prototype_path: str = ""
    # generator
    families: str = ("ball:sphere,box:cuboid,tube:cylinder,spike:cone,"
                     "ring:torus,egg:ellipsoid,pill:capsule,tent:pyramid,"
                     "table:composite-legged,tower:composite-stacked")
    domain: str = "synthetic"
    train_per_class: int = 20
    test_per_class: int = 8
    points: int = 512
    corruption_jitter: float = 0.02
    corruption_occlusion: float = 0.25
    corruption_clutter: float = 0.10
    corruption_density_bias: float = 0.5
    # protocol
    protocol_mode: str = "within"  # within | cross | dfsl | single
    novel_tasks: int = 4
    base_count: int = 0  # 0 -> half of the classes
    novel_per_task: int = 5
    shots: int = 5
    # model
    l: int = 256
    q: int = 64
    m: int = 64
    energy_threshold: float = 0.95
    d: int = 32
    backbone_hidden: str = "64,64,128"
    relation_hidden: str = "600,300"
    lr_pretrain: float = 1e-4
    lr_base: float = 1e-4
    lr_inc: float = 5e-5
    batch_base: int = 64
    batch_inc: int = 16
    epochs_pretrain: int = 50
    epochs_base: int = 50
    epochs_inc: int = 20
    epochs_joint: int = 15
    augment_shift: float = 0.05
    augment_scale: str = "0.9,1.1"
    augment_dropout: float = 0.05
    # ablation switches
    use_microshape: bool = True
    prototype_mode: str = "synthetic"
    freeze: bool = True
    use_svd: bool = True
    use_memory: bool = True
    loss_variant: str = "bce"
    # global
    seed: int = 0

    def int_tuple(self, key: str) -> tuple[int, ...]:
        return tuple(int(v) for v in getattr(self, key).split(",") if v)

    def float_tuple(self, key: str) -> tuple[float, ...]:
        return tuple(float(v) for v in getattr(self, key).split(",") if v)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _cast(key: str, value: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    value = value.strip()
    if kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def parse_config_file(path) -> dict:
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip().replace(".", "_").replace("-", "_")
        values[key] = _cast(key, value)
    return values


def resolve_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if config_path:
        for key, value in parse_config_file(config_path).items():
            setattr(cfg, key, value)
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        setattr(cfg, key, _cast(key, value) if isinstance(value, str) else value)
    env_seed = os.environ.get("MSFC_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def write_resolved(cfg: RunConfig, path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")
