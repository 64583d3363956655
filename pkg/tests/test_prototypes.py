"""Prototype tables: language files, feature means, synthetic semantics."""

import itertools

import numpy as np
import pytest

from msfc import nn
from msfc.backbone import make_backbone
from msfc.cloud import LabeledInstance
from msfc.errors import ProtocolError
from msfc.microshape import MicroshapeBasis
from msfc.prototypes import (PrototypeLoadError, PrototypeTable,
                             feature_prototypes, load_language_prototypes,
                             synth_prototypes, write_prototypes)


def test_load_single_class(tmp_path):
    path = tmp_path / "protos.txt"
    values = " ".join(str(0.1 * i) for i in range(300))
    path.write_text(f"chair {values}\nextra 1 2 3\n" if False else
                    f"chair {values}\n")
    table = load_language_prototypes(path, {0: "chair"})
    assert table.mode == "language" and table.dim == 300
    assert table.vector(0).shape == (300,)


def test_load_ignores_unknown_names(tmp_path):
    path = tmp_path / "protos.txt"
    path.write_text("chair 1 2 3\nsofa 4 5 6\n")
    table = load_language_prototypes(path, {0: "chair"})
    assert set(table.entries) == {0}


def test_load_missing_class_named_in_error(tmp_path):
    path = tmp_path / "protos.txt"
    path.write_text("chair 1 2 3\n")
    with pytest.raises(PrototypeLoadError, match="sofa"):
        load_language_prototypes(path, {0: "chair", 1: "sofa"})


def test_load_inconsistent_dim(tmp_path):
    path = tmp_path / "protos.txt"
    path.write_text("chair 1 2 3\nsofa 4 5\n")
    with pytest.raises(PrototypeLoadError):
        load_language_prototypes(path, {0: "chair", 1: "sofa"})


def test_write_load_round_trip(tmp_path):
    table = synth_prototypes([(0, "sphere"), (1, "cuboid")], d=16, seed=3)
    path = tmp_path / "protos.txt"
    names = {0: "ball", 1: "box"}
    write_prototypes(path, table, names)
    back = load_language_prototypes(path, names)
    for cid in (0, 1):
        np.testing.assert_allclose(back.vector(cid), table.vector(cid),
                                   atol=1e-8)


def test_vector_missing_class_is_protocol_error():
    table = PrototypeTable(mode="synthetic", dim=4)
    with pytest.raises(ProtocolError):
        table.vector(7)
    assert not table.covers([7])


# --------------------------------------------------------- feature mode

def make_embedding_stack(q=6, u=3, d=4):
    bb = make_backbone(q=q, hidden=(5,), seed=0)
    bb.mlp.frozen = True
    mat = np.random.default_rng(1).normal(size=(q, q))
    left, _, _ = np.linalg.svd(mat)
    basis = MicroshapeBasis(basis=left[:, :u], singular_values=np.ones(q),
                            energy_threshold=0.95)
    proj = nn.init_mlp([u, d], ["relu"], np.random.default_rng(2))
    return bb, basis, proj


def instance(seed, cid=0):
    return LabeledInstance(
        cloud=np.random.default_rng(seed).normal(size=(8, 3)), class_id=cid,
        class_name="c", domain="synthetic", split="train")


def test_feature_prototype_single_instance_is_its_embedding():
    bb, basis, proj = make_embedding_stack()
    from msfc.microshape import embed, microshape_feature
    inst = instance(5)
    table = feature_prototypes({0: [inst]}, bb, basis, proj)
    expected = embed(microshape_feature(inst.cloud, bb, basis), proj)
    np.testing.assert_allclose(table.vector(0), expected, atol=1e-12)


def test_feature_prototype_mean_oracle():
    bb, basis, proj = make_embedding_stack()
    from msfc.microshape import embed, microshape_feature
    instances = [instance(s) for s in range(5)]
    table = feature_prototypes({0: instances}, bb, basis, proj)
    zs = np.stack([embed(microshape_feature(i.cloud, bb, basis), proj)
                   for i in instances])
    np.testing.assert_allclose(table.vector(0), zs.mean(axis=0), atol=1e-12)


def test_feature_prototype_empty_class_rejected():
    bb, basis, proj = make_embedding_stack()
    with pytest.raises(ProtocolError):
        feature_prototypes({0: []}, bb, basis, proj)


# --------------------------------------------------------- synthetic mode

def test_synth_kappa_zero_shares_family_vector():
    table = synth_prototypes([(0, "sphere"), (1, "sphere")], d=8, seed=0,
                             kappa=0.0)
    np.testing.assert_array_equal(table.vector(0), table.vector(1))


def test_synth_within_family_cosine_exceeds_cross():
    for seed in range(20):
        table = synth_prototypes(
            [(0, "sphere"), (1, "sphere"), (2, "cuboid"), (3, "cuboid")],
            d=32, seed=seed, kappa=0.3)
        vecs = {cid: table.vector(cid) for cid in range(4)}
        within = [vecs[0] @ vecs[1], vecs[2] @ vecs[3]]
        cross = [vecs[a] @ vecs[b]
                 for a, b in itertools.product((0, 1), (2, 3))]
        assert np.mean(within) > np.mean(cross)


def test_synth_deterministic():
    specs = [(0, "torus"), (1, "cone")]
    a = synth_prototypes(specs, d=16, seed=7)
    b = synth_prototypes(specs, d=16, seed=7)
    for cid in (0, 1):
        np.testing.assert_array_equal(a.vector(cid), b.vector(cid))


def test_synth_vectors_unit_norm():
    table = synth_prototypes([(0, "sphere"), (1, "pyramid")], d=12, seed=4)
    for cid in (0, 1):
        assert np.linalg.norm(table.vector(cid)) == pytest.approx(1.0)
