"""Protocol construction, shot sampling, evaluation, delta metric."""

import numpy as np
import pytest

from msfc.cloud import LabeledInstance
from msfc.errors import ConfigError, InputError, ParseError, ProtocolError
from msfc.generator import ManifestRow
from msfc.protocol import (EvalReport, FscilProtocol, build_cross_protocol,
                           build_within_protocol, delta_metric, evaluate,
                           load_protocol, load_report, make_dfsl_protocol,
                           sample_shots, save_protocol, save_report)

try:
    from hypothesis import given, settings
    from hypothesis import strategies as st
    HAVE_HYPOTHESIS = True
except ImportError:
    HAVE_HYPOTHESIS = False


def manifest_for(class_counts, prefix="c", test_per_class=2):
    """class_counts: class index -> number of training rows."""
    rows = []
    for cid, n_train in class_counts.items():
        for i in range(n_train):
            rows.append(ManifestRow(f"{prefix}{cid}/t{i}.xyz", f"{prefix}{cid}",
                                    cid, "synthetic", "train"))
        for i in range(test_per_class):
            rows.append(ManifestRow(f"{prefix}{cid}/s{i}.xyz", f"{prefix}{cid}",
                                    cid, "synthetic", "test"))
    return rows


def uniform_manifest(n_classes, prefix="c", train=10, domain="synthetic"):
    rows = manifest_for({cid: train for cid in range(n_classes)}, prefix=prefix)
    for row in rows:
        row.domain = domain
    return rows


# --------------------------------------------------------- within protocol

def test_within_modelnet_shape():
    proto = build_within_protocol(uniform_manifest(40), novel_tasks=4)
    assert [len(t) for t in proto.tasks] == [20, 5, 5, 5, 5]


def test_within_shapenet_shape():
    proto = build_within_protocol(uniform_manifest(55), novel_tasks=6,
                                  base_count=25)
    assert len(proto.tasks) == 7
    assert len(proto.tasks[0]) == 25
    assert sum(len(t) for t in proto.tasks[1:]) == 30


def test_within_frequency_sorting():
    manifest = manifest_for({0: 10, 1: 9, 2: 2, 3: 1})
    proto = build_within_protocol(manifest, novel_tasks=2)
    assert proto.tasks == [[0, 1], [2], [3]]


def test_within_sort_stable_under_reordering():
    manifest = uniform_manifest(8)
    proto_a = build_within_protocol(manifest, novel_tasks=2)
    proto_b = build_within_protocol(list(reversed(manifest)), novel_tasks=2)
    assert proto_a.tasks == proto_b.tasks


def test_within_too_few_classes():
    with pytest.raises(ConfigError):
        build_within_protocol(uniform_manifest(3), novel_tasks=1)
    with pytest.raises(ConfigError):
        build_within_protocol(uniform_manifest(8), novel_tasks=9)


# --------------------------------------------------------- cross protocol

def test_cross_shapenet_co3d_shape():
    synth = uniform_manifest(39, prefix="s")
    real = uniform_manifest(50, prefix="r", domain="real")
    for row in real:
        row.class_id += 39
    proto = build_cross_protocol(synth, real, novel_per_task=5)
    assert len(proto.tasks) == 11
    assert len(proto.tasks[0]) == 39
    assert all(len(t) == 5 for t in proto.tasks[1:])


def test_cross_modelnet_scanobject_shape():
    synth = uniform_manifest(26, prefix="s")
    real = uniform_manifest(11, prefix="r", domain="real")
    for row in real:
        row.class_id += 26
    proto = build_cross_protocol(synth, real, novel_per_task=4)
    assert [len(t) for t in proto.tasks] == [26, 4, 4, 3]


def test_cross_overlap_dropped_from_base():
    synth = uniform_manifest(4, prefix="s")
    real = uniform_manifest(2, prefix="r", domain="real")
    for row in real:
        row.class_id += 4
    # give one real class the same name as a synthetic one
    for row in real:
        if row.class_id == 4:
            row.class_name = "s1"
    proto = build_cross_protocol(synth, real, novel_per_task=2)
    assert 1 not in proto.tasks[0]          # overlapping name left out of base
    assert 4 in proto.tasks[1]              # kept as novel


def test_cross_empty_real_rejected():
    with pytest.raises(ConfigError):
        build_cross_protocol(uniform_manifest(4), [], novel_per_task=2)


def test_dfsl_two_tasks():
    synth = uniform_manifest(4, prefix="s")
    real = uniform_manifest(3, prefix="r", domain="real")
    for row in real:
        row.class_id += 4
    proto = make_dfsl_protocol(synth, real, k=1)
    assert proto.n_tasks == 2
    assert proto.mode == "dfsl"
    assert proto.shots_per_class == 1


def test_protocol_disjointness_enforced():
    with pytest.raises(ProtocolError):
        FscilProtocol(tasks=[[0, 1], [1, 2]])


# --------------------------------------------------------- shot sampling

def make_instances(class_counts, split="train"):
    out = []
    for cid, n in class_counts.items():
        for i in range(n):
            out.append(LabeledInstance(
                cloud=np.zeros((4, 3)) + i, class_id=cid, class_name=f"c{cid}",
                domain="synthetic", split=split))
    return out


def test_sample_shots_exact_k_and_reproducible():
    proto = FscilProtocol(tasks=[[0], [1]], shots_per_class=5, shot_seed=3)
    pool = make_instances({0: 10, 1: 100})
    a = sample_shots(proto, pool, 1)
    b = sample_shots(proto, pool, 1)
    assert len(a) == 5
    assert all(i.class_id == 1 for i in a)
    assert [id(x) for x in a] == [id(x) for x in b]


def test_sample_shots_short_class_warns():
    proto = FscilProtocol(tasks=[[0], [1]], shots_per_class=5)
    pool = make_instances({0: 10, 1: 3})
    with pytest.warns(UserWarning):
        shots = sample_shots(proto, pool, 1)
    assert len(shots) == 3


def test_sample_shots_empty_class_rejected():
    proto = FscilProtocol(tasks=[[0], [1]])
    with pytest.raises(ProtocolError):
        sample_shots(proto, make_instances({0: 5}), 1)


def test_sample_shots_base_task_rejected():
    proto = FscilProtocol(tasks=[[0], [1]])
    with pytest.raises(ProtocolError):
        sample_shots(proto, make_instances({0: 5, 1: 5}), 0)


def test_sample_shots_overlap_matches_hypergeometric():
    proto = FscilProtocol(tasks=[[0], [1]], shots_per_class=5)
    pool = make_instances({1: 20})
    pool_ids = {id(p): i for i, p in enumerate(pool)}
    draws = []
    for seed in range(1000):
        picks = sample_shots(proto, pool, 1, seed=seed)
        draws.append(frozenset(pool_ids[id(p)] for p in picks))
    overlaps = [len(a & b) for a, b in zip(draws[:500], draws[500:])]
    # E[overlap] for two independent 5-of-20 draws = 25/20 = 1.25
    mean = np.mean(overlaps)
    # binomial-ish spread; generous 5-sigma band around 1.25
    assert abs(mean - 1.25) < 0.25


# --------------------------------------------------------- evaluation

def test_evaluate_perfect_predictor():
    proto = FscilProtocol(tasks=[[0, 1], [2]])
    pool = make_instances({0: 5, 1: 5, 2: 5}, split="test")
    acc = evaluate(lambda insts: [i.class_id for i in insts], pool, proto, 1)
    assert acc == 1.0


def test_evaluate_excludes_future_tasks():
    proto = FscilProtocol(tasks=[[0], [1], [2]])
    pool = make_instances({0: 3, 1: 3, 2: 3}, split="test")
    seen_ids = []
    def spy(insts):
        seen_ids.extend(i.class_id for i in insts)
        return [i.class_id for i in insts]
    evaluate(spy, pool, proto, 1)
    assert set(seen_ids) == {0, 1}


def test_evaluate_random_predictor_near_chance():
    proto = FscilProtocol(tasks=[[0, 1, 2, 3]])
    pool = make_instances({c: 500 for c in range(4)}, split="test")
    rng = np.random.default_rng(0)
    acc = evaluate(lambda insts: rng.integers(4, size=len(insts)), pool, proto, 0)
    # 2000 draws at p = 1/4: 3 sigma ~ 0.029
    assert abs(acc - 0.25) < 0.03


def test_evaluate_no_test_instances():
    proto = FscilProtocol(tasks=[[0]])
    with pytest.raises(ProtocolError):
        evaluate(lambda insts: [], make_instances({0: 2}, split="train"),
                 proto, 0)


# --------------------------------------------------------- delta metric

def test_delta_published_values():
    assert delta_metric([93.6, 88.3, 82.5, 74.0, 67.1]) == pytest.approx(
        28.3, abs=0.05)
    assert delta_metric([89.8, 45.0, 20.0, 9.0, 3.0]) == pytest.approx(
        96.7, abs=0.05)
    assert delta_metric([87.6, 80.0, 75.0, 72.6]) == pytest.approx(17.1, abs=0.05)


def test_delta_constant_is_zero():
    assert delta_metric([0.5, 0.5, 0.5]) == 0.0


def test_delta_requires_positive_start():
    with pytest.raises(InputError):
        delta_metric([0.0, 0.5])
    with pytest.raises(InputError):
        delta_metric([0.5])


if HAVE_HYPOTHESIS:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=8),
           st.floats(0.1, 10.0))
    def test_delta_scale_invariant(accs, scale):
        scaled = [a * scale for a in accs]
        assert delta_metric(scaled) == pytest.approx(delta_metric(accs),
                                                     abs=1e-9)


# --------------------------------------------------------- persistence

def test_report_round_trip(tmp_path):
    report = EvalReport(per_task=[(0, 10, 0.9), (1, 12, 0.8)])
    path = tmp_path / "report.csv"
    save_report(report, path)
    text = path.read_text()
    assert text.startswith("task_index,classes_seen,accuracy\n")
    assert "delta," in text
    back = load_report(path)
    assert back.per_task == [(0, 10, 0.9), (1, 12, 0.8)]
    assert back.delta == pytest.approx(report.delta)


def test_report_table_renders():
    report = EvalReport(per_task=[(0, 10, 0.9), (1, 12, 0.8)])
    table = report.to_table()
    assert "delta" in table and "0.9000" in table


def test_report_bad_header(tmp_path):
    path = tmp_path / "report.csv"
    path.write_text("nope\n")
    with pytest.raises(ParseError):
        load_report(path)


def test_protocol_round_trip(tmp_path):
    proto = FscilProtocol(tasks=[[0, 1], [2]], shots_per_class=3,
                          mode="cross", shot_seed=5, exemplar_seed=6,
                          class_names={0: "a", 1: "b", 2: "c"})
    path = tmp_path / "protocol.txt"
    save_protocol(proto, path)
    back = load_protocol(path)
    assert back.tasks == proto.tasks
    assert back.shots_per_class == 3
    assert back.mode == "cross"
    assert back.shot_seed == 5 and back.exemplar_seed == 6
    assert back.class_names == proto.class_names


def test_protocol_parse_errors(tmp_path):
    path = tmp_path / "protocol.txt"
    path.write_text("0 stray\n")
    with pytest.raises(ParseError):
        load_protocol(path)
    path.write_text("mode = within\n")
    with pytest.raises(ParseError):
        load_protocol(path)


def test_classes_through_accumulates():
    proto = FscilProtocol(tasks=[[0, 1], [2], [3]])
    assert proto.classes_through(0) == [0, 1]
    assert proto.classes_through(2) == [0, 1, 2, 3]
