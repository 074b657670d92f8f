"""Alignment, PCK, and AUC metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import procrustes_residual_numeric, rotation_via_quaternion

from quadfit.metrics import (
    VALIDATION_RATIO,
    DegenerateGeometryError,
    MetricsAccumulator,
    PckSpec,
    auc,
    pa_mpjpe,
    pa_mpvpe,
    pck,
    procrustes_align,
)

# ---------------------------------------------------------------------------
# Procrustes alignment


def test_procrustes_identity():
    rng = np.random.default_rng(70)
    x = rng.normal(size=(12, 3))
    res = procrustes_align(x, x)
    assert res.residual <= 1e-12
    assert np.allclose(res.scale, 1.0, atol=1e-12)
    assert np.allclose(res.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(res.translation, 0.0, atol=1e-12)
    assert np.allclose(res.aligned, x, atol=1e-12)


def test_procrustes_recovers_exact_similarity():
    rng = np.random.default_rng(71)
    x = rng.normal(size=(15, 3))
    rot = rotation_via_quaternion(rng.normal(size=3))
    t = np.array([0.3, -1.2, 2.0])
    y = 2.0 * x @ rot.T + t
    res = procrustes_align(x, y)
    assert res.residual <= 1e-10
    assert np.allclose(res.scale, 2.0, atol=1e-10)
    assert np.allclose(res.rotation, rot, atol=1e-10)
    assert np.allclose(res.translation, t, atol=1e-9)
    assert np.allclose(res.aligned, y, atol=1e-10)


def test_procrustes_rotation_is_proper():
    # a mirrored target cannot pull the solution into a reflection
    rng = np.random.default_rng(72)
    x = rng.normal(size=(10, 3))
    y = x.copy()
    y[:, 0] *= -1.0
    res = procrustes_align(x, y)
    assert np.linalg.det(res.rotation) == pytest.approx(1.0, abs=1e-9)
    assert abs(res.residual - procrustes_residual_numeric(x, y)) <= 1e-6


def test_procrustes_matches_numeric_minimizer():
    rng = np.random.default_rng(73)
    for _ in range(20):
        x = rng.normal(size=(8, 3))
        rot = rotation_via_quaternion(rng.normal(size=3))
        s = float(rng.uniform(0.5, 2.0))
        t = rng.normal(size=3)
        y = s * x @ rot.T + t + 0.05 * rng.normal(size=x.shape)
        res = procrustes_align(x, y)
        assert abs(res.residual - procrustes_residual_numeric(x, y)) <= 1e-6


def test_procrustes_degenerate_sources():
    line = np.outer(np.arange(5.0), np.array([1.0, 2.0, -1.0]))
    with pytest.raises(DegenerateGeometryError):
        procrustes_align(line, np.random.default_rng(0).normal(size=(5, 3)))
    point = np.ones((4, 3))
    with pytest.raises(DegenerateGeometryError):
        procrustes_align(point, np.random.default_rng(1).normal(size=(4, 3)))
    with pytest.raises(DegenerateGeometryError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))


def test_procrustes_shape_errors():
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((4, 2)), np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# PA-MPJPE / PA-MPVPE


def test_pa_mpjpe_zero_after_similarity():
    rng = np.random.default_rng(74)
    x = rng.normal(size=(10, 3))
    rot = rotation_via_quaternion(rng.normal(size=3))
    y = 0.7 * x @ rot.T + np.array([5.0, 0.0, -2.0])
    assert pa_mpjpe(x, y) <= 1e-9
    assert pa_mpvpe is pa_mpjpe


def test_pa_mpjpe_similarity_invariant():
    rng = np.random.default_rng(75)
    pred = rng.normal(size=(12, 3))
    gt = pred + 0.1 * rng.normal(size=pred.shape)
    base = pa_mpjpe(pred, gt)
    for seed in range(5):
        r2 = np.random.default_rng(seed)
        rot = rotation_via_quaternion(r2.normal(size=3))
        s = float(r2.uniform(0.3, 3.0))
        t = r2.normal(size=3)
        moved = s * pred @ rot.T + t
        assert abs(pa_mpjpe(moved, gt) - base) <= 1e-9


def test_pa_mpjpe_bounded_by_unaligned_rms():
    # the identity is one candidate similarity, so the aligned mean error
    # cannot exceed the unaligned root-mean-square error
    rng = np.random.default_rng(76)
    for _ in range(10):
        pred = rng.normal(size=(9, 3))
        gt = pred + 0.3 * rng.normal(size=pred.shape)
        rms = float(np.sqrt((np.linalg.norm(pred - gt, axis=1) ** 2).mean()))
        assert pa_mpjpe(pred, gt) <= rms + 1e-12


def test_pa_mpjpe_correspondence_matters():
    rng = np.random.default_rng(77)
    gt = rng.normal(size=(10, 3))
    pred = gt + 0.2 * rng.normal(size=gt.shape)
    perm = rng.permutation(10)
    together = pa_mpjpe(pred[perm], gt[perm])
    assert abs(together - pa_mpjpe(pred, gt)) <= 1e-9
    scrambled = pa_mpjpe(pred[perm], gt)
    assert scrambled > pa_mpjpe(pred, gt)


# ---------------------------------------------------------------------------
# PCK


def _hth_scene(errors):
    # head at index 0, tail at index 2 (defaults); head-tail distance 100
    k = len(errors)
    gt = np.zeros((k, 2))
    gt[0] = [0.0, 0.0]
    gt[2] = [100.0, 0.0]
    for i in range(k):
        if i not in (0, 2):
            gt[i] = [10.0 * i, 5.0]
    pred = gt.copy()
    pred[:, 1] += np.asarray(errors, dtype=np.float64)
    return pred, gt


def test_pck_all_within():
    pred, gt = _hth_scene([49.0] * 6)
    assert pck(pred, gt, np.ones(6)) == 1.0


def test_pck_all_outside():
    pred, gt = _hth_scene([51.0] * 6)
    assert pck(pred, gt, np.ones(6)) == 0.0


def test_pck_half():
    pred, gt = _hth_scene([0.0, 0.0, 0.0, 99.0, 99.0, 99.0])
    assert pck(pred, gt, np.ones(6)) == 0.5


def test_pck_strict_at_threshold():
    # error exactly at 0.5 * head-tail distance does not count
    pred, gt = _hth_scene([50.0] * 6)
    assert pck(pred, gt, np.ones(6)) == 0.0


def test_pck_skips_invisible_rows():
    pred, gt = _hth_scene([0.0, 200.0, 0.0, 0.0])
    vis = np.array([1, 0, 1, 1])
    assert pck(pred, gt, vis) == 1.0


def test_pck_hth_requires_head_and_tail():
    pred, gt = _hth_scene([0.0] * 4)
    assert pck(pred, gt, np.array([0, 1, 1, 1])) is None
    assert pck(pred, gt, np.array([1, 1, 0, 1])) is None


def test_pck_fraction_mode_bbox_normalizer():
    gt = np.array([[0.0, 0.0], [200.0, 0.0], [0.0, 100.0], [200.0, 100.0]])
    pred = gt.copy()
    pred[:, 1] += 19.0  # bbox longest side 200, pck@0.1 threshold 20
    spec = PckSpec(mode="fraction", fraction=0.1)
    assert pck(pred, gt, np.ones(4), spec) == 1.0
    pred[:, 1] += 2.0
    assert pck(pred, gt, np.ones(4), spec) == 0.0
    # explicit normalizer overrides the bbox
    assert pck(pred, gt, np.ones(4), spec, normalizer=300.0) == 1.0


def test_pck_errors():
    pred, gt = _hth_scene([0.0] * 4)
    with pytest.raises(ValueError):
        pck(pred, gt, np.zeros(4))
    with pytest.raises(ValueError):
        pck(pred, gt, np.ones(4), PckSpec(mode="nope"))


def test_pck_labels():
    assert PckSpec().label() == "pck@0.5hth"
    assert PckSpec(mode="fraction", fraction=0.1).label() == "pck@0.1bbox"


@settings(max_examples=30)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_pck_monotone_in_threshold(f1, f2):
    rng = np.random.default_rng(78)
    gt = rng.uniform(0, 100, size=(15, 2))
    pred = gt + rng.normal(scale=20.0, size=gt.shape)
    lo, hi = sorted([f1, f2])
    v = np.ones(15)
    a = pck(pred, gt, v, PckSpec(mode="fraction", fraction=lo), normalizer=100.0)
    b = pck(pred, gt, v, PckSpec(mode="fraction", fraction=hi), normalizer=100.0)
    assert a <= b


# ---------------------------------------------------------------------------
# AUC


def test_auc_perfect():
    # strict comparison leaves the t=0 sample empty, costing half a step
    gt = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
    assert auc(gt, gt, np.ones(3)) == pytest.approx(0.995, abs=1e-12)
    assert auc(gt, gt, np.ones(3), steps=1000) == pytest.approx(0.9995, abs=1e-12)


def test_auc_half_error_single_keypoint():
    pred = np.array([[150.0, 100.0]])
    gt = np.array([[100.0, 100.0]])
    got = auc(pred, gt, np.ones(1), normalizer=100.0)
    assert got == pytest.approx(0.495, abs=1e-12)
    assert abs(got - 0.5) <= 0.01


def test_auc_all_beyond_normalizer():
    pred = np.array([[500.0, 0.0], [0.0, 500.0], [500.0, 500.0]])
    gt = np.zeros((3, 2))
    assert auc(pred, gt, np.ones(3), normalizer=100.0) == 0.0


def test_auc_normalizer_validation():
    gt = np.zeros((3, 2))
    with pytest.raises(ValueError):
        auc(gt, gt, np.ones(3), normalizer=0.0)
    with pytest.raises(ValueError):
        auc(gt, gt, np.zeros(3))


def test_auc_at_most_pck_at_one():
    rng = np.random.default_rng(79)
    for _ in range(10):
        gt = rng.uniform(0, 200, size=(12, 2))
        pred = gt + rng.normal(scale=40.0, size=gt.shape)
        v = np.ones(12)
        a = auc(pred, gt, v, normalizer=150.0)
        p1 = pck(pred, gt, v, PckSpec(mode="fraction", fraction=1.0),
                 normalizer=150.0)
        assert a <= p1 + 1e-12


def test_auc_monotone_in_normalizer():
    rng = np.random.default_rng(80)
    gt = rng.uniform(0, 100, size=(8, 2))
    pred = gt + rng.normal(scale=10.0, size=gt.shape)
    v = np.ones(8)
    assert auc(pred, gt, v, normalizer=50.0) <= auc(pred, gt, v, normalizer=200.0)


# ---------------------------------------------------------------------------
# accumulator


def test_accumulator_means():
    rng = np.random.default_rng(81)
    acc = MetricsAccumulator()
    singles = []
    for _ in range(4):
        gt = rng.normal(size=(10, 3))
        pred = gt + 0.1 * rng.normal(size=gt.shape)
        singles.append(pa_mpjpe(pred, gt))
        acc.add(pred_kp3d=pred, gt_kp3d=gt)
    rep = acc.report()
    assert rep.pa_mpjpe == pytest.approx(np.mean(singles), rel=1e-12)
    assert rep.pa_mpvpe is None and rep.auc is None
    assert rep.n_instances == 4 and rep.n_skipped_hth == 0


def test_accumulator_counts_hth_skips():
    acc = MetricsAccumulator()
    pred, gt = _hth_scene([0.0] * 4)
    acc.add(pred2d=pred, gt2d=gt, visibility=np.array([0, 1, 1, 1]))
    acc.add(pred2d=pred, gt2d=gt, visibility=np.ones(4))
    rep = acc.report()
    assert rep.n_skipped_hth == 1
    assert rep.pck["pck@0.5hth"] == 1.0
    assert rep.auc is not None and rep.n_instances == 2


def test_accumulator_multiple_specs_and_dict():
    specs = (PckSpec(), PckSpec(mode="fraction", fraction=0.1))
    acc = MetricsAccumulator(pck_specs=specs)
    pred, gt = _hth_scene([0.0] * 4)
    acc.add(pred2d=pred, gt2d=gt, visibility=np.ones(4))
    cloud = np.random.default_rng(82).normal(size=(6, 3))
    acc.add(pred_vertices=cloud, gt_vertices=cloud)
    d = acc.report().to_dict()
    assert set(d["pck"]) == {"pck@0.5hth", "pck@0.1bbox"}
    assert d["pa_mpvpe"] == pytest.approx(0.0, abs=1e-9)
    assert d["n_instances"] == 2


def test_validation_ratio_value():
    assert VALIDATION_RATIO == 0.15
