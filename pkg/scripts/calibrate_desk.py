"""Calibration harness for the desk-scale protocol (not part of the package)."""
import sys, time
from msfc.generator import ShapeFamily, generate_dataset
from msfc.protocol import build_cross_protocol
from msfc.engine import PipelineConfig, run_fscil, prepare_instances
from msfc.backbone import pretrain_backbone
from msfc.engine import build_pipeline_basis

SYNTH = ["sphere", "cuboid", "cylinder", "cone", "torus",
         "ellipsoid", "capsule", "pyramid", "composite-legged", "composite-stacked"]
REAL = ["sphere", "cuboid", "cylinder", "cone", "torus",
        "ellipsoid", "capsule", "pyramid"]


def desk_dataset(seed):
    fams_s = [ShapeFamily(name=f"s_{k}", kind=k, domain="synthetic") for k in SYNTH]
    fams_r = [ShapeFamily(name=f"r_{k}", kind=k, domain="real") for k in REAL]
    inst_s, man_s = generate_dataset(fams_s, (20, 8), l=512, seed=seed)
    inst_r, man_r = generate_dataset(fams_r, (10, 8), l=512, seed=seed + 1)
    off = max(r.class_id for r in man_s) + 1
    for i in inst_r:
        i.class_id += off
    for r in man_r:
        r.class_id += off
    families = {r.class_id: r.class_name.split("_", 1)[1] for r in man_s + man_r}
    return inst_s + inst_r, man_s, man_r, families


def desk_config(seed, **kw):
    cfg = PipelineConfig(
        q=64, backbone_hidden=(32, 32), m=64, d=32, relation_hidden=(96, 48),
        l=256, energy_threshold=0.999,
        pretrain_epochs=40, pretrain_lr=1e-3, pretrain_batch=32,
        base_epochs=150, base_lr=3e-3, base_batch=16,
        inc_epochs=25, inc_lr=1e-3, inc_batch=8,
        joint_epochs=12, seed=seed)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def main(seeds):
    for seed in seeds:
        t0 = time.time()
        instances, man_s, man_r, families = desk_dataset(seed * 100)
        protocol = build_cross_protocol(man_s, man_r, novel_per_task=2, seed=seed)
        cfg = desk_config(seed)
        prepared = prepare_instances(instances, cfg.l)
        base = set(protocol.tasks[0])
        base_train = [i for i in prepared if i.split == "train" and i.class_id in base]
        star = pretrain_backbone(base_train, q=cfg.q, hidden=cfg.backbone_hidden,
                                 head_hidden=cfg.head_hidden,
                                 epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                                 batch_size=cfg.pretrain_batch, seed=seed).backbone
        basis = build_pipeline_basis(cfg, star, base_train)
        t1 = time.time()
        results = {}
        for variant in ("ours", "ft", "joint"):
            rep, _ = run_fscil(prepared, protocol, cfg, variant=variant,
                               class_families=families, star=star, basis=basis)
            results[variant] = rep
        for name, kw in (("no_ms", dict(use_microshape=False)),
                         ("featproto", dict(prototype_mode="feature"))):
            rep, _ = run_fscil(prepared, protocol, desk_config(seed, **kw),
                               variant="ours", class_families=families,
                               star=star, basis=basis)
            results[name] = rep
        t2 = time.time()
        print(f"seed {seed}: pretrain+basis {t1-t0:.1f}s, runs {t2-t1:.1f}s, u={basis.u}")
        for name, rep in results.items():
            accs = " ".join(f"{a:.3f}" for a in rep.accuracies)
            print(f"  {name:>10}: {accs}  d={rep.delta:.1f}")
        ours = results["ours"].accuracies
        ft = results["ft"].accuracies
        joint = results["joint"].accuracies
        print(f"  base>=0.85: {ours[0] >= 0.85}, "
              f"order: {joint[-1] >= ours[-1] >= ft[-1]}, "
              f"gap>=0.2: {ours[-1]-ft[-1] >= 0.2}, "
              f"delta: {results['ours'].delta < results['ft'].delta}, "
              f"ms>=no_ms: {ours[-1] >= results['no_ms'].accuracies[-1]}, "
              f"syn>=feat: {ours[-1] >= results['featproto'].accuracies[-1]}")


if __name__ == "__main__":
    main([int(s) for s in sys.argv[1:]] or [0])
