"""Per-point feature extractor with shared weights across points.

The same MLP maps every 3D point to a q-dimensional feature, so feature
rows permute exactly with input rows.  Pretraining attaches a max-pool
classifier head trained with softmax cross-entropy; the head is discarded
and the pretrained copy is returned frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cloud import LabeledInstance, check_cloud
from .errors import ConfigError, ProtocolError

DEFAULT_HIDDEN = (64, 64, 128)


@dataclass
class BackboneParams:
    mlp: nn.Mlp
    q: int
    role: str = "pipeline"  # "pretrain_star" | "pipeline"

    @property
    def frozen(self) -> bool:
        return self.mlp.frozen

    def copy(self, role: str | None = None, frozen: bool | None = None
             ) -> "BackboneParams":
        out = BackboneParams(self.mlp.copy(), self.q, role or self.role)
        if frozen is not None:
            out.mlp.frozen = frozen
        return out


def make_backbone(q: int, hidden=DEFAULT_HIDDEN, seed: int = 0,
                  role: str = "pipeline") -> BackboneParams:
    rng = np.random.default_rng(seed)
    sizes = [3, *hidden, q]
    mlp = nn.init_mlp(sizes, ["relu"] * (len(sizes) - 1), rng)
    return BackboneParams(mlp=mlp, q=q, role=role)


def extract_point_features(backbone: BackboneParams, cloud: np.ndarray) -> np.ndarray:
    """Feature matrix (l, q); row i is the feature of point i."""
    cloud = check_cloud(cloud)
    out, _ = nn.mlp_forward(backbone.mlp, cloud)
    return out


def forward_batch(backbone: BackboneParams, clouds: np.ndarray
                  ) -> tuple[np.ndarray, list]:
    """Features for a (B, l, 3) stack, returned as (B, l, q) plus cache."""
    b, l, three = clouds.shape
    if three != 3:
        raise ConfigError(f"expected (B, l, 3), got {clouds.shape}")
    flat, cache = nn.mlp_forward(backbone.mlp, clouds.reshape(b * l, 3))
    return flat.reshape(b, l, backbone.q), cache


def _maxpool(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = feats.argmax(axis=1)
    pooled = feats.max(axis=1)
    return pooled, idx


def _maxpool_backward(dpooled: np.ndarray, idx: np.ndarray, l: int) -> np.ndarray:
    b, q = dpooled.shape
    dfeats = np.zeros((b, l, q))
    rows = np.repeat(np.arange(b), q)
    cols = np.tile(np.arange(q), b)
    dfeats[rows, idx.ravel(), cols] = dpooled.ravel()
    return dfeats


@dataclass
class PretrainResult:
    backbone: BackboneParams
    head: nn.Mlp
    loss_history: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def pretrain_backbone(train_instances: list[LabeledInstance], q: int,
                      hidden=DEFAULT_HIDDEN, head_hidden=(64,), epochs: int = 50,
                      lr: float = 1e-4, batch_size: int = 32, seed: int = 0
                      ) -> PretrainResult:
    """Cross-entropy pretraining over the base classes.

    Returns the frozen pretrained copy together with its (discardable)
    classifier head and the per-epoch training loss.
    """
    class_ids = sorted({inst.class_id for inst in train_instances})
    if len(class_ids) < 2:
        raise ProtocolError("pretraining needs at least 2 classes")
    col_of = {cid: j for j, cid in enumerate(class_ids)}

    rng = np.random.default_rng(seed)
    backbone = make_backbone(q, hidden, seed=rng.integers(2**63),
                             role="pretrain_star")
    head_sizes = [q, *head_hidden, len(class_ids)]
    head = nn.init_mlp(head_sizes, ["relu"] * len(head_hidden) + ["none"], rng)

    clouds = np.stack([inst.cloud for inst in train_instances])
    labels = np.array([col_of[inst.class_id] for inst in train_instances])
    n, l = clouds.shape[0], clouds.shape[1]

    opt_backbone = nn.AdamState.for_mlp(backbone.mlp, lr)
    opt_head = nn.AdamState.for_mlp(head, lr)
    loss_history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            feats, cache = forward_batch(backbone, clouds[batch])
            pooled, idx = _maxpool(feats)
            logits, head_cache = nn.mlp_forward(head, pooled)
            loss, dlogits = nn.softmax_cross_entropy(logits, labels[batch])
            head_grads, dpooled = nn.mlp_backward(head, head_cache, dlogits)
            dfeats = _maxpool_backward(dpooled, idx, l)
            bb_grads, _ = nn.mlp_backward(
                backbone.mlp, cache, dfeats.reshape(-1, q))
            nn.optimizer_step(head, head_grads, opt_head)
            nn.optimizer_step(backbone.mlp, bb_grads, opt_backbone)
            epoch_loss += loss * len(batch)
        loss_history.append(epoch_loss / n)

    feats, _ = forward_batch(backbone, clouds)
    pooled, _ = _maxpool(feats)
    logits, _ = nn.mlp_forward(head, pooled)
    accuracy = float(np.mean(logits.argmax(axis=1) == labels))

    backbone.mlp.frozen = True
    return PretrainResult(backbone=backbone, head=head,
                          loss_history=loss_history, train_accuracy=accuracy)
