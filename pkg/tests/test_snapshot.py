"""Model snapshot persistence: backbones, bases, full states."""

import numpy as np

from msfc.backbone import make_backbone
from msfc.engine import ExemplarMemory, ModelState, make_projection, make_relation
from msfc.microshape import build_basis, kmeans
from msfc.prototypes import synth_prototypes
from msfc.snapshot import (load_backbone, load_basis, load_state, save_backbone,
                           save_basis, save_state)


def sample_basis(seed=0):
    rows = np.random.default_rng(seed).normal(size=(100, 8))
    return build_basis(kmeans(rows, m=8, seed=seed), 0.95,
                       provenance={"backbone_checksum": "deadbeef"})


def sample_state(task_index=0, with_memory=True, with_basis=True):
    bb = make_backbone(q=8, hidden=(6,), seed=1)
    bb.mlp.frozen = True
    basis = sample_basis() if with_basis else None
    u = basis.u if with_basis else 8
    state = ModelState(
        backbone=bb,
        projection=make_projection(u, 4, seed=2),
        relation=make_relation(4, hidden=(10, 6), seed=3),
        basis=basis,
        prototypes=synth_prototypes([(0, "sphere"), (1, "cuboid")], d=4, seed=4),
        seen_classes=[0, 1], task_index=task_index,
        use_microshape=with_basis,
        memory=ExemplarMemory(selection_seed=9) if with_memory else None)
    state.projection.frozen = True
    return state


def test_backbone_round_trip(tmp_path):
    bb = make_backbone(q=8, hidden=(6, 4), seed=0, role="pretrain_star")
    bb.mlp.frozen = True
    path = tmp_path / "bb.ckpt"
    save_backbone(bb, path, name="backbone_star")
    back = load_backbone(path, name="backbone_star")
    assert back.q == 8 and back.role == "pretrain_star" and back.frozen
    for a, b in zip(bb.mlp.layers, back.mlp.layers):
        np.testing.assert_array_equal(a.weight.astype(np.float32),
                                      b.weight.astype(np.float32))
        assert a.activation == b.activation


def test_backbone_save_load_save_identical(tmp_path):
    bb = make_backbone(q=4, hidden=(5,), seed=2)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_backbone(bb, p1)
    save_backbone(load_backbone(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_basis_round_trip(tmp_path):
    basis = sample_basis()
    path = tmp_path / "basis.ckpt"
    save_basis(basis, path)
    back = load_basis(path)
    assert back.u == basis.u
    np.testing.assert_array_equal(back.basis.astype(np.float32),
                                  basis.basis.astype(np.float32))
    assert back.energy_threshold == basis.energy_threshold
    assert back.provenance["backbone_checksum"] == "deadbeef"


def test_state_round_trip(tmp_path):
    state = sample_state()
    path = tmp_path / "model.ckpt"
    save_state(state, path)
    back = load_state(path)
    assert back.task_index == 0
    assert back.seen_classes == [0, 1]
    assert back.use_microshape
    assert back.loss_variant == "bce"
    assert back.backbone.frozen and back.projection.frozen
    assert back.basis is not None and back.basis.u == state.basis.u
    assert set(back.prototypes.entries) == {0, 1}
    for cid in (0, 1):
        np.testing.assert_array_equal(
            back.prototypes.vector(cid),
            state.prototypes.vector(cid).astype(np.float32).astype(np.float64))
    # memory seed survives; contents intentionally do not
    assert back.memory is not None
    assert back.memory.selection_seed == 9
    assert len(back.memory) == 0


def test_state_round_trip_without_optionals(tmp_path):
    state = sample_state(with_memory=False, with_basis=False)
    path = tmp_path / "model.ckpt"
    save_state(state, path)
    back = load_state(path)
    assert back.memory is None
    assert back.basis is None
    assert not back.use_microshape


def test_state_predictions_survive_round_trip(tmp_path):
    from msfc.engine import predict
    state = sample_state()
    path = tmp_path / "model.ckpt"
    save_state(state, path)
    back = load_state(path)
    rng = np.random.default_rng(5)
    agree = sum(
        predict(state, cloud) == predict(back, cloud)
        for cloud in (rng.normal(size=(16, 3)) for _ in range(20)))
    # float32 storage may flip near-ties; near-total agreement expected
    assert agree >= 18
