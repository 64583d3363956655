"""Point-cloud primitives: normalization, FPS, augmentation, I/O."""

import numpy as np
import pytest

from msfc.cloud import (AugmentConfig, LabeledInstance, augment, augment_batch,
                        fps_sample, normalize_cloud, read_cloud, write_cloud)
from msfc.errors import InputError, ParseError

try:
    from hypothesis import given, settings
    from hypothesis import strategies as st
    from hypothesis.extra.numpy import arrays
    HAVE_HYPOTHESIS = True
except ImportError:
    HAVE_HYPOTHESIS = False


def instance(cloud):
    return LabeledInstance(cloud=np.asarray(cloud, dtype=float), class_id=0,
                           class_name="c", domain="synthetic", split="train")


# ------------------------------------------------------------ normalization

def test_normalize_centroid_and_radius():
    cloud = np.random.default_rng(0).normal(size=(50, 3)) + 5.0
    out = normalize_cloud(cloud)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    assert np.linalg.norm(out, axis=1).max() == pytest.approx(1.0, abs=1e-12)


def test_normalize_idempotent():
    cloud = np.random.default_rng(1).normal(size=(30, 3)) * 7.0
    once = normalize_cloud(cloud)
    np.testing.assert_allclose(normalize_cloud(once), once, atol=1e-12)


def test_normalize_rejects_non_finite():
    with pytest.raises(InputError):
        normalize_cloud(np.array([[0.0, 0.0, np.inf]]))


def test_normalize_rejects_bad_shape():
    with pytest.raises(InputError):
        normalize_cloud(np.zeros((4, 2)))


if HAVE_HYPOTHESIS:
    from hypothesis import assume

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (12, 3),
                  elements=st.floats(-100, 100, allow_nan=False)))
    def test_normalize_idempotence_property(cloud):
        # degenerate near-coincident clouds amplify rounding residuals
        assume(np.ptp(cloud, axis=0).max() > 1e-6)
        once = normalize_cloud(cloud)
        np.testing.assert_allclose(normalize_cloud(once), once, atol=1e-12)


# ------------------------------------------------------------ fps

def test_fps_full_cloud_returned():
    cloud = np.random.default_rng(2).normal(size=(8, 3))
    out = fps_sample(cloud, 8)
    assert sorted(map(tuple, out)) == sorted(map(tuple, cloud))


def test_fps_farthest_pair():
    cloud = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.1, 0, 0]])
    out = fps_sample(cloud, 2, start_index=0)
    np.testing.assert_array_equal(out, [[0.0, 0, 0], [1.0, 0, 0]])


def naive_fps(cloud, k, start=0):
    chosen = [start]
    for _ in range(1, min(k, len(cloud))):
        best, best_d = None, -1.0
        for i in range(len(cloud)):
            d = min(np.sum((cloud[i] - cloud[j]) ** 2) for j in chosen)
            if d > best_d:  # strict: ties keep the lowest index
                best, best_d = i, d
        chosen.append(best)
    return cloud[chosen]


def test_fps_matches_naive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cloud = rng.normal(size=(50, 3))
        np.testing.assert_array_equal(fps_sample(cloud, 10), naive_fps(cloud, 10))


def test_fps_pads_short_clouds():
    cloud = np.random.default_rng(4).normal(size=(3, 3))
    out = fps_sample(cloud, 7)
    assert out.shape == (7, 3)
    # padding repeats selected points
    for row in out:
        assert any(np.array_equal(row, p) for p in cloud)


def test_fps_coverage_radius_non_increasing():
    cloud = np.random.default_rng(5).normal(size=(60, 3))

    def coverage(sample):
        d = ((cloud[:, None, :] - sample[None, :, :]) ** 2).sum(axis=2)
        return d.min(axis=1).max()

    radii = [coverage(fps_sample(cloud, k)) for k in (2, 4, 8, 16, 32)]
    assert all(a >= b for a, b in zip(radii, radii[1:]))


def test_fps_bad_args():
    cloud = np.zeros((3, 3))
    with pytest.raises(InputError):
        fps_sample(cloud, 0)
    with pytest.raises(InputError):
        fps_sample(cloud, 2, start_index=3)


# ------------------------------------------------------------ augmentation

def test_augment_identity_config():
    inst = instance(np.random.default_rng(6).normal(size=(10, 3)))
    cfg = AugmentConfig(shift_range=0.0, scale_range=(1.0, 1.0),
                        dropout_prob=0.0, seed=1)
    out = augment(inst, cfg)
    np.testing.assert_array_equal(out.cloud, inst.cloud)
    assert (out.class_id, out.domain, out.split) == (0, "synthetic", "train")


def test_augment_pure_scale():
    inst = instance([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]])
    cfg = AugmentConfig(shift_range=0.0, scale_range=(2.0, 2.0),
                        dropout_prob=0.0, seed=0)
    np.testing.assert_allclose(augment(inst, cfg).cloud, inst.cloud * 2.0)


def test_augment_deterministic():
    inst = instance(np.random.default_rng(7).normal(size=(40, 3)))
    cfg = AugmentConfig(seed=123)
    a = augment(inst, cfg).cloud
    b = augment(inst, cfg).cloud
    np.testing.assert_array_equal(a, b)


def test_augment_keeps_at_least_one_point():
    inst = instance(np.zeros((5, 3)))
    cfg = AugmentConfig(shift_range=0.0, scale_range=(1.0, 1.0),
                        dropout_prob=0.99, seed=0)
    for seed in range(20):
        out = augment(inst, AugmentConfig(dropout_prob=0.99, seed=seed))
        assert out.cloud.shape[0] >= 1


def test_augment_rejects_bad_config():
    inst = instance(np.zeros((3, 3)))
    with pytest.raises(InputError):
        augment(inst, AugmentConfig(scale_range=(0.0, 1.0)))
    with pytest.raises(InputError):
        augment(inst, AugmentConfig(dropout_prob=1.0))


def test_augment_batch_shape_preserved():
    clouds = np.random.default_rng(8).normal(size=(4, 16, 3))
    out = augment_batch(clouds, AugmentConfig(dropout_prob=0.3, seed=5))
    assert out.shape == clouds.shape
    assert np.all(np.isfinite(out))


# ------------------------------------------------------------ file I/O

def test_read_simple_file(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("0 0 0\n1 0 0\n")
    cloud = read_cloud(path)
    np.testing.assert_array_equal(cloud, [[0, 0, 0], [1, 0, 0]])


def test_round_trip_precision(tmp_path):
    cloud = np.random.default_rng(9).normal(size=(1024, 3))
    path = tmp_path / "c.xyz"
    write_cloud(cloud, path)
    back = read_cloud(path)
    assert np.abs(back - cloud).max() < 1e-6


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("a b c\n")
    with pytest.raises(ParseError, match="line 1"):
        read_cloud(path)


def test_parse_error_wrong_field_count(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("1 2 3\n4 5\n")
    with pytest.raises(ParseError, match="line 2"):
        read_cloud(path)


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.xyz"
    path.write_text("\n")
    with pytest.raises(ParseError):
        read_cloud(path)
