"""Training and inference over incremental tasks: relation scoring,
exemplar memory, the freezing schedule, and the FT/Joint reference
baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .backbone import BackboneParams, forward_batch, pretrain_backbone
from .cloud import AugmentConfig, LabeledInstance, augment_batch, fps_sample, normalize_cloud
from .errors import ConfigError, FreezeViolationError, ProtocolError
from .microshape import (MicroshapeBasis, build_basis, collect_base_features,
                         kmeans)
from .prototypes import (PrototypeTable, load_language_prototypes,
                         synth_prototypes)
from .protocol import EvalReport, FscilProtocol, evaluate, sample_shots

RELATION_HIDDEN = (600, 300)


@dataclass
class ExemplarMemory:
    entries: dict[int, LabeledInstance] = field(default_factory=dict)
    selection_seed: int = 0

    def add_class(self, class_id: int, pool: list[LabeledInstance]) -> None:
        if not pool:
            raise ProtocolError(f"no candidates to memorize for class {class_id}")
        rng = np.random.default_rng(
            np.random.SeedSequence([self.selection_seed, class_id]))
        self.entries[class_id] = pool[int(rng.integers(len(pool)))]

    def exemplars(self) -> list[LabeledInstance]:
        return [self.entries[cid] for cid in sorted(self.entries)]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 64
    augment: AugmentConfig | None = None
    seed: int = 0


@dataclass
class ModelState:
    backbone: BackboneParams
    projection: nn.Mlp  # "W": single ReLU layer into prototype space
    relation: nn.Mlp
    basis: MicroshapeBasis | None
    prototypes: PrototypeTable
    seen_classes: list[int] = field(default_factory=list)
    task_index: int = -1  # -1 before the base task trains
    use_microshape: bool = True
    loss_variant: str = "bce"  # "bce" | "mse"
    memory: ExemplarMemory | None = None

    def copy(self) -> "ModelState":
        mem = None
        if self.memory is not None:
            mem = ExemplarMemory(entries=dict(self.memory.entries),
                                 selection_seed=self.memory.selection_seed)
        return ModelState(
            backbone=self.backbone.copy(), projection=self.projection.copy(),
            relation=self.relation.copy(), basis=self.basis,
            prototypes=self.prototypes, seen_classes=list(self.seen_classes),
            task_index=self.task_index, use_microshape=self.use_microshape,
            loss_variant=self.loss_variant, memory=mem)


def make_relation(d: int, hidden=RELATION_HIDDEN, seed: int = 0) -> nn.Mlp:
    rng = np.random.default_rng(seed)
    sizes = [2 * d, *hidden, 1]
    acts = ["leaky_relu"] * len(hidden) + ["sigmoid"]
    return nn.init_mlp(sizes, acts, rng)


def make_projection(in_dim: int, d: int, seed: int = 0) -> nn.Mlp:
    rng = np.random.default_rng(seed)
    return nn.init_mlp([in_dim, d], ["relu"], rng)


def _pooled_feature_dim(state: ModelState) -> int:
    if state.use_microshape:
        if state.basis is None:
            raise ProtocolError("microshape basis missing")
        return state.basis.u
    return state.backbone.q


def _embed_forward(state: ModelState, clouds: np.ndarray):
    """Clouds (B, l, 3) -> embeddings z (B, d) plus caches for backward."""
    b, l, _ = clouds.shape
    feats, bb_cache = forward_batch(state.backbone, clouds)
    if state.use_microshape:
        pooled = (feats.reshape(b * l, -1) @ state.basis.basis
                  ).reshape(b, l, -1).mean(axis=1)
    else:
        pooled = feats.mean(axis=1)
    z, proj_cache = nn.mlp_forward(state.projection, pooled)
    return z, (bb_cache, proj_cache, l)


def _embed_backward(state: ModelState, caches, dz: np.ndarray,
                    need_backbone: bool):
    bb_cache, proj_cache, l = caches
    proj_grads, dpooled = nn.mlp_backward(state.projection, proj_cache, dz)
    bb_grads = None
    if need_backbone:
        dflat = np.repeat(dpooled, l, axis=0) / l
        if state.use_microshape:
            dflat = dflat @ state.basis.basis.T
        bb_grads, _ = nn.mlp_backward(state.backbone.mlp, bb_cache, dflat)
    return proj_grads, bb_grads


def _prototype_matrix(state: ModelState, class_ids: list[int]) -> np.ndarray:
    return np.stack([state.prototypes.vector(cid) for cid in class_ids])


def _scores_forward(state: ModelState, z: np.ndarray, class_ids: list[int]):
    """Sigmoid relation scores (B, C) for every (sample, class) pair."""
    b, d = z.shape
    s = _prototype_matrix(state, class_ids)
    rel_in = np.hstack([np.repeat(z, len(class_ids), axis=0),
                        np.tile(s, (b, 1))])
    out, rel_cache = nn.mlp_forward(state.relation, rel_in)
    return out.reshape(b, len(class_ids)), rel_cache


def relation_scores(state: ModelState, cloud: np.ndarray) -> np.ndarray:
    """Scores over state.seen_classes (same order) for a single cloud."""
    if not state.seen_classes:
        raise ProtocolError("no classes seen yet")
    if not state.prototypes.covers(state.seen_classes):
        raise ProtocolError("prototype table does not cover the seen classes")
    z, _ = _embed_forward(state, cloud[None, :, :])
    scores, _ = _scores_forward(state, z, state.seen_classes)
    return scores[0]


def predict(state: ModelState, cloud: np.ndarray) -> int:
    """Argmax class over all seen classes; ties break to the lowest id."""
    ordered = sorted(state.seen_classes)
    z, _ = _embed_forward(state, cloud[None, :, :])
    scores, _ = _scores_forward(state, z, ordered)
    return ordered[int(np.argmax(scores[0]))]


def predict_batch(state: ModelState, instances: list[LabeledInstance],
                  batch_size: int = 64) -> np.ndarray:
    ordered = sorted(state.seen_classes)
    out = np.empty(len(instances), dtype=int)
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        clouds = np.stack([inst.cloud for inst in chunk])
        z, _ = _embed_forward(state, clouds)
        scores, _ = _scores_forward(state, z, ordered)
        out[start:start + len(chunk)] = [
            ordered[j] for j in scores.argmax(axis=1)]
    return out


def batch_predictor(state: ModelState):
    return lambda instances: predict_batch(state, instances)


def _train_scoring(state: ModelState, instances: list[LabeledInstance],
                   class_ids: list[int], cfg: TrainConfig,
                   train_backbone: bool, train_projection: bool) -> list[float]:
    """Shared minibatch loop; relation always trains.  Returns epoch losses."""
    if not state.prototypes.covers(class_ids):
        raise ProtocolError("prototype table does not cover the scored classes")
    col_of = {cid: j for j, cid in enumerate(class_ids)}
    clouds = np.stack([inst.cloud for inst in instances])
    labels = np.array([col_of[inst.class_id] for inst in instances])
    n = clouds.shape[0]

    rng = np.random.default_rng(cfg.seed)
    opt_rel = nn.AdamState.for_mlp(state.relation, cfg.lr)
    opt_proj = (nn.AdamState.for_mlp(state.projection, cfg.lr)
                if train_projection else None)
    opt_bb = (nn.AdamState.for_mlp(state.backbone.mlp, cfg.lr)
              if train_backbone else None)
    loss_fn = nn.bce_multi_class if state.loss_variant == "bce" else nn.mse_multi_class

    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            batch_clouds = clouds[batch]
            if cfg.augment is not None:
                aug = replace(cfg.augment, seed=int(rng.integers(2**63)))
                batch_clouds = augment_batch(batch_clouds, aug)
            z, caches = _embed_forward(state, batch_clouds)
            scores, rel_cache = _scores_forward(state, z, class_ids)
            loss, dscores = loss_fn(scores, labels[batch], len(class_ids))
            rel_grads, drel_in = nn.mlp_backward(
                state.relation, rel_cache, dscores.reshape(-1, 1))
            d = z.shape[1]
            dz = drel_in[:, :d].reshape(len(batch), len(class_ids), d).sum(axis=1)
            if train_projection or train_backbone:
                proj_grads, bb_grads = _embed_backward(
                    state, caches, dz, need_backbone=train_backbone)
                if train_projection:
                    nn.optimizer_step(state.projection, proj_grads, opt_proj)
                if train_backbone:
                    nn.optimizer_step(state.backbone.mlp, bb_grads, opt_bb)
            nn.optimizer_step(state.relation, rel_grads, opt_rel)
            epoch_loss += loss * len(batch)
        history.append(epoch_loss / n)
    return history


def _feature_prototypes_for(state: ModelState, class_ids: list[int],
                            pools: dict[int, list[LabeledInstance]]) -> None:
    """Fill missing feature-mode prototypes as mean embeddings (in place)."""
    for cid in class_ids:
        if cid in state.prototypes.entries:
            continue
        pool = pools.get(cid, [])
        if not pool:
            raise ProtocolError(f"class {cid} has no instances for prototypes")
        clouds = np.stack([inst.cloud for inst in pool])
        z, _ = _embed_forward(state, clouds)
        state.prototypes.entries[cid] = z.mean(axis=0)


def train_base(state: ModelState, base_train: list[LabeledInstance],
               base_classes: list[int], cfg: TrainConfig,
               freeze: bool = True) -> list[float]:
    """Base-task training of backbone, projection, and relation.

    On completion the backbone and projection freeze (unless disabled for
    the no-freezing ablation) and the memory gains one exemplar per base
    class.
    """
    if state.task_index != -1:
        raise ProtocolError("base task already trained")
    if state.use_microshape and state.basis is None:
        raise ProtocolError("microshape basis must be built before base training")
    if state.prototypes.mode == "feature":
        pools: dict[int, list[LabeledInstance]] = {}
        for inst in base_train:
            pools.setdefault(inst.class_id, []).append(inst)
        _feature_prototypes_for(state, base_classes, pools)
    history = _train_scoring(state, base_train, base_classes, cfg,
                             train_backbone=True, train_projection=True)
    if freeze:
        state.backbone.mlp.frozen = True
        state.projection.frozen = True
    state.seen_classes = list(base_classes)
    state.task_index = 0
    if state.memory is not None:
        pools = {}
        for inst in base_train:
            pools.setdefault(inst.class_id, []).append(inst)
        for cid in base_classes:
            state.memory.add_class(cid, pools.get(cid, []))
    return history


def train_increment(state: ModelState, task_data: list[LabeledInstance],
                    task_classes: list[int], cfg: TrainConfig,
                    enforce_freeze: bool = True) -> list[float]:
    """One incremental task: fine-tune the relation module on the k-shot
    samples plus all memory exemplars, scored against every seen class.
    """
    if state.task_index < 0:
        raise ProtocolError("base task must train before increments")
    overlap = set(state.seen_classes).intersection(task_classes)
    if overlap:
        raise ProtocolError(f"task classes already seen: {sorted(overlap)}")
    train_backbone = train_projection = False
    if enforce_freeze:
        if not (state.backbone.frozen and state.projection.frozen):
            raise FreezeViolationError(
                "backbone/projection must be frozen for incremental tasks")
    else:
        train_backbone = not state.backbone.frozen
        train_projection = not state.projection.frozen
    if state.prototypes.mode == "feature":
        pools: dict[int, list[LabeledInstance]] = {}
        for inst in task_data:
            pools.setdefault(inst.class_id, []).append(inst)
        _feature_prototypes_for(state, task_classes, pools)
    training_set = list(task_data)
    if state.memory is not None:
        training_set.extend(state.memory.exemplars())
    all_classes = [*state.seen_classes, *task_classes]
    history = _train_scoring(state, training_set, all_classes, cfg,
                             train_backbone=train_backbone,
                             train_projection=train_projection)
    state.seen_classes = all_classes
    state.task_index += 1
    if state.memory is not None:
        pools = {}
        for inst in task_data:
            pools.setdefault(inst.class_id, []).append(inst)
        for cid in task_classes:
            state.memory.add_class(cid, pools.get(cid, []))
    return history


# --------------------------------------------------------------------------
# Full pipeline orchestration

@dataclass
class PipelineConfig:
    # backbone / basis
    q: int = 64
    backbone_hidden: tuple = (64, 64, 128)
    head_hidden: tuple = (64,)
    m: int = 64
    energy_threshold: float = 0.95
    squared_energy: bool = True
    use_svd: bool = True
    feature_cap: int = 500_000
    # embedding / relation
    d: int = 32
    relation_hidden: tuple = RELATION_HIDDEN
    # ablation switches
    use_microshape: bool = True
    prototype_mode: str = "synthetic"  # "synthetic" | "language" | "feature"
    prototype_path: str | None = None
    prototype_kappa: float = 0.3
    loss_variant: str = "bce"
    freeze: bool = True
    use_memory: bool = True
    # training schedules
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-4
    pretrain_batch: int = 32
    base_epochs: int = 50
    base_lr: float = 1e-4
    base_batch: int = 64
    inc_epochs: int = 20
    inc_lr: float = 5e-5
    inc_batch: int = 16
    joint_epochs: int = 15
    # data
    l: int = 256
    augment_shift: float = 0.05
    augment_scale: tuple = (0.9, 1.1)
    augment_dropout: float = 0.05
    seed: int = 0


def prepare_instances(instances: list[LabeledInstance], l: int
                      ) -> list[LabeledInstance]:
    """Normalize and farthest-point sample every cloud to exactly l points."""
    return [replace(inst, cloud=fps_sample(normalize_cloud(inst.cloud), l))
            for inst in instances]


def build_pipeline_basis(cfg: PipelineConfig, star: BackboneParams,
                         base_train: list[LabeledInstance],
                         provenance: dict | None = None) -> MicroshapeBasis:
    feats = collect_base_features(star, base_train, cap=cfg.feature_cap,
                                  seed=cfg.seed)
    centers = kmeans(feats, m=min(cfg.m, feats.shape[0]), seed=cfg.seed)
    if cfg.use_svd:
        return build_basis(centers, cfg.energy_threshold, cfg.squared_energy,
                           provenance)
    # ablation: raw cluster centers as (non-orthogonal) projection directions
    sigma = np.linalg.svd(centers.centers, compute_uv=False)
    prov = {"m": centers.m, "seed": centers.seed, "use_svd": False}
    prov.update(provenance or {})
    return MicroshapeBasis(basis=centers.centers.copy(), singular_values=sigma,
                           energy_threshold=1.0, provenance=prov)


def build_prototypes(cfg: PipelineConfig, protocol: FscilProtocol,
                     class_families: dict[int, str] | None = None
                     ) -> PrototypeTable:
    all_ids = protocol.classes_through(protocol.n_tasks - 1)
    if cfg.prototype_mode == "synthetic":
        families = class_families or {}
        specs = [(cid, families.get(cid, protocol.class_names.get(cid, str(cid))))
                 for cid in all_ids]
        return synth_prototypes(specs, d=cfg.d, seed=cfg.seed,
                                kappa=cfg.prototype_kappa)
    if cfg.prototype_mode == "language":
        if cfg.prototype_path is None:
            raise ConfigError("language prototypes need a prototype file path")
        names = {cid: protocol.class_names[cid] for cid in all_ids}
        return load_language_prototypes(cfg.prototype_path, names)
    if cfg.prototype_mode == "feature":
        return PrototypeTable(mode="feature", dim=cfg.d)
    raise ConfigError(f"unknown prototype mode {cfg.prototype_mode!r}")


def init_state(cfg: PipelineConfig, star: BackboneParams,
               basis: MicroshapeBasis | None,
               prototypes: PrototypeTable) -> ModelState:
    """Fresh trainable state; the pipeline backbone starts from the
    pretrained copy's weights."""
    theta = star.copy(role="pipeline", frozen=False)
    in_dim = basis.u if (cfg.use_microshape and basis is not None) else cfg.q
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    projection = make_projection(in_dim, cfg.d, seed=int(rng.integers(2**63)))
    relation = make_relation(cfg.d, cfg.relation_hidden,
                             seed=int(rng.integers(2**63)))
    memory = ExemplarMemory(selection_seed=cfg.seed) if cfg.use_memory else None
    return ModelState(backbone=theta, projection=projection, relation=relation,
                      basis=basis if cfg.use_microshape else None,
                      prototypes=prototypes, use_microshape=cfg.use_microshape,
                      loss_variant=cfg.loss_variant, memory=memory)


def _augment_cfg(cfg: PipelineConfig) -> AugmentConfig:
    return AugmentConfig(shift_range=cfg.augment_shift,
                         scale_range=cfg.augment_scale,
                         dropout_prob=cfg.augment_dropout, seed=cfg.seed)


def _split(instances, class_ids, split):
    wanted = set(class_ids)
    return [i for i in instances if i.split == split and i.class_id in wanted]


def run_fscil(instances: list[LabeledInstance], protocol: FscilProtocol,
              cfg: PipelineConfig, variant: str = "ours",
              class_families: dict[int, str] | None = None,
              star: BackboneParams | None = None,
              basis: MicroshapeBasis | None = None
              ) -> tuple[EvalReport, ModelState]:
    """End-to-end run over all tasks; returns the per-task report.

    variant "ours" is the full method; "ft" disables memory and freezing and
    fine-tunes everything on the k-shot data alone; "joint" retrains on the
    full data of all seen classes at every boundary (upper bound).

    A pretrained backbone and basis may be passed in to share work between
    variants; they are computed here when absent.
    """
    if variant not in ("ours", "ft", "joint"):
        raise ConfigError(f"unknown variant {variant!r}")
    instances = prepare_instances(instances, cfg.l)
    base_classes = protocol.tasks[0]
    base_train = _split(instances, base_classes, "train")

    if star is None:
        star = pretrain_backbone(
            base_train, q=cfg.q, hidden=cfg.backbone_hidden,
            head_hidden=cfg.head_hidden, epochs=cfg.pretrain_epochs,
            lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch,
            seed=cfg.seed).backbone
    if basis is None and cfg.use_microshape:
        basis = build_pipeline_basis(cfg, star, base_train)

    prototypes = build_prototypes(cfg, protocol, class_families)
    state = init_state(cfg, star, basis, prototypes)
    if variant == "ft":
        state.memory = None

    aug = _augment_cfg(cfg)
    freeze = cfg.freeze and variant == "ours"
    base_cfg = TrainConfig(epochs=cfg.base_epochs, lr=cfg.base_lr,
                           batch_size=cfg.base_batch, augment=aug,
                           seed=cfg.seed)
    train_base(state, base_train, base_classes, base_cfg, freeze=freeze)
    if variant == "joint":
        state.memory = None

    report_rows = [(0, len(base_classes),
                    evaluate(batch_predictor(state), instances, protocol, 0))]
    for t in range(1, protocol.n_tasks):
        task_classes = protocol.tasks[t]
        if variant == "joint":
            state.seen_classes = [*state.seen_classes, *task_classes]
            state.task_index += 1
            if state.prototypes.mode == "feature":
                pools: dict[int, list[LabeledInstance]] = {}
                for inst in _split(instances, task_classes, "train"):
                    pools.setdefault(inst.class_id, []).append(inst)
                _feature_prototypes_for(state, task_classes, pools)
            joint_train = _split(instances, state.seen_classes, "train")
            joint_cfg = TrainConfig(epochs=cfg.joint_epochs, lr=cfg.base_lr,
                                    batch_size=cfg.base_batch, augment=aug,
                                    seed=cfg.seed + t)
            _train_scoring(state, joint_train, state.seen_classes, joint_cfg,
                           train_backbone=True, train_projection=True)
        else:
            shots = sample_shots(protocol, instances, t)
            inc_cfg = TrainConfig(epochs=cfg.inc_epochs, lr=cfg.inc_lr,
                                  batch_size=cfg.inc_batch, augment=aug,
                                  seed=cfg.seed + t)
            train_increment(state, shots, task_classes, inc_cfg,
                            enforce_freeze=freeze)
        report_rows.append(
            (t, len(state.seen_classes),
             evaluate(batch_predictor(state), instances, protocol, t)))
    return EvalReport(per_task=report_rows), state


def run_ft_baseline(instances, protocol, cfg,
                    class_families=None, star=None, basis=None):
    return run_fscil(instances, protocol, cfg, variant="ft",
                     class_families=class_families, star=star, basis=basis)


def run_joint_baseline(instances, protocol, cfg,
                       class_families=None, star=None, basis=None):
    return run_fscil(instances, protocol, cfg, variant="joint",
                     class_families=class_families, star=star, basis=basis)


def run_dfsl_episodes(instances: list[LabeledInstance], protocol: FscilProtocol,
                      cfg: PipelineConfig, n_episodes: int = 20,
                      class_families: dict[int, str] | None = None,
                      star: BackboneParams | None = None
                      ) -> list[float]:
    """Episode accuracies for the two-task protocol: each episode re-samples
    the k-shot support set and fine-tunes a fresh copy of the base state.
    """
    if protocol.n_tasks != 2:
        raise ProtocolError("dfsl needs exactly 2 tasks")
    prepared = prepare_instances(instances, cfg.l)
    base_classes = protocol.tasks[0]
    base_train = _split(prepared, base_classes, "train")
    if star is None:
        star = pretrain_backbone(
            base_train, q=cfg.q, hidden=cfg.backbone_hidden,
            head_hidden=cfg.head_hidden, epochs=cfg.pretrain_epochs,
            lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch,
            seed=cfg.seed).backbone
    basis = build_pipeline_basis(cfg, star, base_train) if cfg.use_microshape else None
    prototypes = build_prototypes(cfg, protocol, class_families)
    state = init_state(cfg, star, basis, prototypes)
    base_cfg = TrainConfig(epochs=cfg.base_epochs, lr=cfg.base_lr,
                           batch_size=cfg.base_batch, augment=_augment_cfg(cfg),
                           seed=cfg.seed)
    train_base(state, base_train, base_classes, base_cfg, freeze=cfg.freeze)

    accuracies = []
    for episode in range(n_episodes):
        ep_state = state.copy()
        shots = sample_shots(protocol, prepared, 1,
                             seed=protocol.shot_seed + 1000 + episode)
        inc_cfg = TrainConfig(epochs=cfg.inc_epochs, lr=cfg.inc_lr,
                              batch_size=cfg.inc_batch,
                              augment=_augment_cfg(cfg), seed=cfg.seed + episode)
        train_increment(ep_state, shots, protocol.tasks[1], inc_cfg,
                        enforce_freeze=cfg.freeze)
        accuracies.append(
            evaluate(batch_predictor(ep_state), prepared, protocol, 1))
    return accuracies
