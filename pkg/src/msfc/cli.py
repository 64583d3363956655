"""Command-line orchestration of the full pipeline.

Stages are composable so ablation runs can reuse cached pretraining and
basis artifacts: generate -> protocol -> pretrain -> basis -> run.
Artifacts from different runs are tied together by checksums and rejected
on mismatch.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import snapshot
from .backbone import pretrain_backbone
from .checkpoint import file_checksum
from .config import RunConfig, resolve_config, write_resolved
from .engine import (PipelineConfig, build_pipeline_basis, prepare_instances,
                     run_fscil)
from .errors import ConfigError, MsfcError, ProvenanceError
from .generator import (CorruptionProfile, ShapeFamily, generate_dataset,
                        load_dataset, read_manifest, write_dataset)
from .protocol import (FscilProtocol, build_cross_protocol,
                       build_within_protocol, load_protocol, load_report,
                       make_dfsl_protocol, save_protocol, save_report)


def _families_from_config(cfg: RunConfig) -> list[ShapeFamily]:
    corruption = CorruptionProfile(
        jitter_sigma=cfg.corruption_jitter,
        occlusion_fraction=cfg.corruption_occlusion,
        clutter_fraction=cfg.corruption_clutter,
        density_bias=cfg.corruption_density_bias)
    families = []
    for token in cfg.families.split(","):
        token = token.strip()
        if not token:
            continue
        name, _, kind = token.partition(":")
        families.append(ShapeFamily(name=name, kind=kind or name,
                                    domain=cfg.domain, corruption=corruption))
    if not families:
        raise ConfigError("families list is empty")
    return families


def _write_families(path, families: list[ShapeFamily]) -> None:
    lines = [f"{i} {fam.name} {fam.kind} {fam.domain}"
             for i, fam in enumerate(families)]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_families(data_dir, offset: int = 0) -> dict[int, str]:
    """class_id -> shape kind, used for synthetic prototype semantics."""
    path = Path(data_dir) / "families.txt"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 3:
            out[int(parts[0]) + offset] = parts[2]
    return out


def _real_offset(synth_manifest) -> int:
    return max(row.class_id for row in synth_manifest) + 1


def _load_instances(cfg: RunConfig):
    """Instances plus family map; cross modes merge the real-domain dataset
    with class ids offset past the synthetic ones."""
    instances, manifest = load_dataset(cfg.data_dir)
    families = _read_families(cfg.data_dir)
    if cfg.protocol_mode in ("cross", "dfsl") and cfg.real_data_dir:
        offset = _real_offset(manifest)
        real_instances, real_manifest = load_dataset(cfg.real_data_dir)
        for inst in real_instances:
            inst.class_id += offset
        instances.extend(real_instances)
        families.update(_read_families(cfg.real_data_dir, offset))
    return instances, families


def cmd_generate(cfg: RunConfig) -> int:
    families = _families_from_config(cfg)
    instances, manifest = generate_dataset(
        families, (cfg.train_per_class, cfg.test_per_class),
        l=cfg.points, seed=cfg.seed)
    out = Path(cfg.data_dir)
    write_dataset(out, instances, manifest)
    _write_families(out / "families.txt", families)
    write_resolved(cfg, out / "config.resolved")
    print(f"wrote {len(instances)} clouds for {len(families)} classes to {out}")
    return 0


def _build_protocol(cfg: RunConfig) -> FscilProtocol:
    manifest = read_manifest(Path(cfg.data_dir) / "manifest.csv")
    if cfg.protocol_mode == "within":
        return build_within_protocol(
            manifest, cfg.novel_tasks, seed=cfg.seed,
            base_count=cfg.base_count or None, shots_per_class=cfg.shots)
    if cfg.protocol_mode == "single":
        classes = sorted({row.class_id for row in manifest})
        names = {row.class_id: row.class_name for row in manifest}
        return FscilProtocol(tasks=[classes], mode="single",
                             shots_per_class=cfg.shots, shot_seed=cfg.seed,
                             exemplar_seed=cfg.seed + 1, class_names=names)
    if cfg.protocol_mode in ("cross", "dfsl"):
        if not cfg.real_data_dir:
            raise ConfigError(f"{cfg.protocol_mode} mode needs real_data_dir")
        real = read_manifest(Path(cfg.real_data_dir) / "manifest.csv")
        offset = _real_offset(manifest)
        for row in real:
            row.class_id += offset
        if cfg.protocol_mode == "dfsl":
            return make_dfsl_protocol(manifest, real, k=cfg.shots, seed=cfg.seed)
        return build_cross_protocol(manifest, real, cfg.novel_per_task,
                                    seed=cfg.seed, shots_per_class=cfg.shots)
    raise ConfigError(f"unknown protocol mode {cfg.protocol_mode!r}")


def cmd_protocol(cfg: RunConfig) -> int:
    protocol = _build_protocol(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_protocol(protocol, out / "protocol.txt")
    write_resolved(cfg, out / "config.resolved")
    sizes = "+".join(str(len(t)) for t in protocol.tasks)
    print(f"wrote {protocol.n_tasks}-task protocol ({sizes}) to {out}")
    return 0


def _pipeline_config(cfg: RunConfig) -> PipelineConfig:
    return PipelineConfig(
        q=cfg.q, backbone_hidden=cfg.int_tuple("backbone_hidden"),
        m=cfg.m, energy_threshold=cfg.energy_threshold,
        use_svd=cfg.use_svd, d=cfg.d,
        relation_hidden=cfg.int_tuple("relation_hidden"),
        use_microshape=cfg.use_microshape, prototype_mode=cfg.prototype_mode,
        prototype_path=cfg.prototype_path or None,
        loss_variant=cfg.loss_variant, freeze=cfg.freeze,
        use_memory=cfg.use_memory,
        pretrain_epochs=cfg.epochs_pretrain, pretrain_lr=cfg.lr_pretrain,
        base_epochs=cfg.epochs_base, base_lr=cfg.lr_base,
        base_batch=cfg.batch_base, inc_epochs=cfg.epochs_inc,
        inc_lr=cfg.lr_inc, inc_batch=cfg.batch_inc,
        joint_epochs=cfg.epochs_joint, l=cfg.l,
        augment_shift=cfg.augment_shift,
        augment_scale=cfg.float_tuple("augment_scale"),
        augment_dropout=cfg.augment_dropout, seed=cfg.seed)


def _require(path, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing input {path} (run `msfc {stage}` first)")
    return path


def cmd_pretrain(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    protocol = load_protocol(_require(out / "protocol.txt", "protocol"))
    instances, _ = _load_instances(cfg)
    pcfg = _pipeline_config(cfg)
    base = set(protocol.tasks[0])
    base_train = [i for i in prepare_instances(instances, pcfg.l)
                  if i.split == "train" and i.class_id in base]
    result = pretrain_backbone(
        base_train, q=pcfg.q, hidden=pcfg.backbone_hidden,
        head_hidden=pcfg.head_hidden, epochs=pcfg.pretrain_epochs,
        lr=pcfg.pretrain_lr, batch_size=pcfg.pretrain_batch, seed=pcfg.seed)
    ckpt = out / "backbone_star.ckpt"
    snapshot.save_backbone(result.backbone, ckpt, name="backbone_star")
    (out / "backbone_star.sha256").write_text(file_checksum(ckpt) + "\n")
    write_resolved(cfg, out / "config.resolved")
    print(f"pretrained backbone: train accuracy {result.train_accuracy:.3f}, "
          f"checkpoint {ckpt}")
    return 0


def _verify_star(out: Path) -> str:
    ckpt = _require(out / "backbone_star.ckpt", "pretrain")
    recorded = _require(out / "backbone_star.sha256", "pretrain")
    actual = file_checksum(ckpt)
    if actual != recorded.read_text().strip():
        raise ProvenanceError(
            "backbone_star.ckpt does not match the checksum recorded at "
            "pretrain time")
    return actual


def cmd_basis(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    checksum = _verify_star(out)
    star = snapshot.load_backbone(out / "backbone_star.ckpt",
                                  name="backbone_star")
    protocol = load_protocol(_require(out / "protocol.txt", "protocol"))
    instances, _ = _load_instances(cfg)
    pcfg = _pipeline_config(cfg)
    base = set(protocol.tasks[0])
    base_train = [i for i in prepare_instances(instances, pcfg.l)
                  if i.split == "train" and i.class_id in base]
    basis = build_pipeline_basis(pcfg, star, base_train,
                                 provenance={"backbone_checksum": checksum})
    snapshot.save_basis(basis, out / "basis.ckpt")
    write_resolved(cfg, out / "config.resolved")
    print(f"built basis with {basis.u} microshapes from m={pcfg.m} centers")
    return 0


def _run_common(cfg: RunConfig, variant: str) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    protocol = load_protocol(_require(out / "protocol.txt", "protocol"))
    instances, families = _load_instances(cfg)
    pcfg = _pipeline_config(cfg)
    star = basis = None
    if (out / "backbone_star.ckpt").exists():
        checksum = _verify_star(out)
        star = snapshot.load_backbone(out / "backbone_star.ckpt",
                                      name="backbone_star")
        if (out / "basis.ckpt").exists():
            basis = snapshot.load_basis(out / "basis.ckpt")
            recorded = basis.provenance.get("backbone_checksum")
            if recorded and recorded != checksum:
                raise ProvenanceError(
                    "basis.ckpt was built from a different pretrained backbone")
    report, state = run_fscil(instances, protocol, pcfg, variant=variant,
                              class_families=families, star=star, basis=basis)
    suffix = "" if variant == "ours" else f"_{variant}"
    save_report(report, out / f"report{suffix}.csv")
    snapshot.save_state(state, out / f"model{suffix}.ckpt")
    write_resolved(cfg, out / "config.resolved")
    print(report.to_table())
    return 0


def cmd_run(cfg: RunConfig) -> int:
    return _run_common(cfg, "ours")


def cmd_baseline(cfg: RunConfig, which: str) -> int:
    return _run_common(cfg, which)


def cmd_report(run_dirs: list[str]) -> int:
    rows = []
    for run_dir in run_dirs:
        for path in sorted(Path(run_dir).glob("report*.csv")):
            report = load_report(path)
            label = f"{Path(run_dir).name}/{path.stem}"
            rows.append((label, report))
    if not rows:
        raise ConfigError("no report*.csv found in the given directories")
    n_tasks = max(len(r.per_task) for _, r in rows)
    width = max(len(label) for label, _ in rows)
    header = f"{'run':<{width}} " + " ".join(
        f"t{t:<5}" for t in range(n_tasks)) + "  delta"
    print(header)
    print("-" * len(header))
    for label, report in rows:
        accs = " ".join(f"{acc:6.3f}" for acc in report.accuracies)
        delta = f"{report.delta:6.2f}" if len(report.per_task) > 1 else "     -"
        print(f"{label:<{width}} {accs}  {delta}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="msfc",
        description="Few-shot class-incremental learning on 3D point clouds")
    sub = parser.add_subparsers(dest="command", required=True)
    names = [f.name for f in fields(RunConfig)]
    for command in ("generate", "protocol", "pretrain", "basis", "run"):
        p = sub.add_parser(command)
        p.add_argument("--config", default=None)
        for name in names:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name)
    p = sub.add_parser("baseline")
    p.add_argument("which", choices=["ft", "joint"])
    p.add_argument("--config", default=None)
    for name in names:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name)
    p = sub.add_parser("report")
    p.add_argument("run_dirs", nargs="+")

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dirs)
        overrides = {name: getattr(args, name) for name in names
                     if getattr(args, name, None) is not None}
        cfg = resolve_config(args.config, overrides)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "protocol":
            return cmd_protocol(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "basis":
            return cmd_basis(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "baseline":
            return cmd_baseline(cfg, args.which)
        raise ConfigError(f"unknown command {args.command!r}")
    except MsfcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
