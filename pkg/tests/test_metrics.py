"""Metric definitions vs brute-force evaluation, breakdown identities."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditr.depthmap import partition
from ditr.metrics import (MetricsError, MetricsReport, aggregate_reports, breakdown,
                          compute_metrics, format_table)


def brute_force_metrics(pred, gt, valid):
    """Independent per-pixel loop evaluation of the three error formulas."""
    se = ae = re = 0.0
    n = 0
    deltas = [0, 0, 0]
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if valid[i, j] and gt[i, j] > 0:
                n += 1
                d = float(pred[i, j]) - float(gt[i, j])
                se += d * d
                ae += abs(d)
                re += abs(d) / float(gt[i, j])
                for k, thr in enumerate((0.05, 0.10, 0.25)):
                    if abs(d) / float(gt[i, j]) < thr:
                        deltas[k] += 1
    return (np.sqrt(se / n), ae / n, re / n, [100.0 * c / n for c in deltas], n)


def test_worked_2x2_example_exact():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    gt = np.array([[1.0, 2.0], [3.0, 5.0]], np.float32)
    rep = compute_metrics(pred, gt, np.ones((2, 2), bool))
    assert rep.mae == pytest.approx(0.25, abs=1e-12)
    assert rep.rmse == pytest.approx(0.5, abs=1e-12)
    assert rep.rel == pytest.approx(0.05, abs=1e-12)


def test_identity_prediction_perfect_scores():
    gt = np.random.default_rng(0).uniform(0.5, 3.0, (8, 8)).astype(np.float32)
    rep = compute_metrics(gt.copy(), gt, np.ones((8, 8), bool))
    assert rep.rmse == rep.mae == rep.rel == 0.0
    assert rep.delta_105 == rep.delta_110 == rep.delta_125 == 100.0


def test_agrees_with_brute_force_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(30):
        gt = rng.uniform(0.2, 4.0, (8, 8)).astype(np.float32)
        gt[rng.random((8, 8)) < 0.2] = 0.0
        pred = (gt + rng.normal(0, 0.3, (8, 8))).clip(0.01).astype(np.float32)
        valid = rng.random((8, 8)) < 0.9
        if not (valid & (gt > 0)).any():
            continue
        rep = compute_metrics(pred, gt, valid)
        rmse, mae, rel, deltas, n = brute_force_metrics(pred, gt, valid)
        assert rep.count == n
        assert rep.rmse == pytest.approx(rmse, rel=1e-9)
        assert rep.mae == pytest.approx(mae, rel=1e-9)
        assert rep.rel == pytest.approx(rel, rel=1e-9)
        assert rep.delta_105 == pytest.approx(deltas[0], abs=1e-9)


def test_empty_evaluated_set_is_an_error():
    gt = np.zeros((4, 4), np.float32)
    with pytest.raises(MetricsError):
        compute_metrics(gt, gt, np.ones((4, 4), bool))
    with pytest.raises(MetricsError):
        compute_metrics(gt + 1, gt + 1, np.zeros((4, 4), bool))


def test_delta_monotonicity_enforced_by_construction():
    with pytest.raises(ValueError):
        MetricsReport("overall", 1, 0.0, 0.0, 0.0, 50.0, 40.0, 60.0)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    gt = rng.uniform(0.5, 3.0, (6, 6)).astype(np.float32)
    pred = gt + rng.normal(0, 0.1, (6, 6)).astype(np.float32)
    rep = compute_metrics(pred, gt, np.ones((6, 6), bool))
    perm = rng.permutation(36)
    rep_p = compute_metrics(pred.reshape(-1)[perm].reshape(6, 6),
                            gt.reshape(-1)[perm].reshape(6, 6), np.ones((6, 6), bool))
    assert rep.rmse == pytest.approx(rep_p.rmse, rel=1e-12)
    assert rep.delta_110 == pytest.approx(rep_p.delta_110, abs=1e-12)


def test_breakdown_constant_error_same_in_both_regions():
    gt = np.full((8, 8), 2.0, np.float32)
    pred = gt + np.float32(0.1)
    mask = np.zeros((8, 8), bool)
    mask[:4] = True
    rep = breakdown(pred, gt, partition(mask, gt))
    assert rep["optical"].mae == pytest.approx(0.1, rel=1e-6)
    assert rep["geometric"].mae == pytest.approx(0.1, rel=1e-6)


def test_breakdown_error_only_inside_optical():
    gt = np.full((8, 8), 2.0, np.float32)
    pred = gt.copy()
    mask = np.zeros((8, 8), bool)
    mask[2:5, 2:5] = True
    pred[mask] += 0.5
    rep = breakdown(pred, gt, partition(mask, gt))
    assert rep["geometric"].mae == 0.0
    assert rep["optical"].mae == pytest.approx(0.5, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_breakdown_weighted_mean_identity(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.3, 4.0, (16, 16)).astype(np.float32)
    pred = (gt + rng.normal(0, 0.2, (16, 16))).clip(0.01).astype(np.float32)
    mask = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
    rep = breakdown(pred, gt, partition(mask, gt))
    parts = [rep[k] for k in ("optical", "geometric") if rep[k] is not None]
    n = sum(p.count for p in parts)
    assert n == rep["overall"].count
    weighted = sum(p.mae * p.count for p in parts) / n
    assert rep["overall"].mae == pytest.approx(weighted, abs=1e-9)
    assert rep["overall"].delta_105 <= rep["overall"].delta_110 <= rep["overall"].delta_125


def test_zero_pixel_region_reports_none_not_zero():
    gt = np.full((4, 4), 1.0, np.float32)
    rep = breakdown(gt, gt, partition(np.zeros((4, 4), bool), gt))
    assert rep["optical"] is None
    assert rep["holes"] is None
    agg = aggregate_reports([rep])
    assert agg["optical"] is None
    text = format_table([("x [optical]", agg["optical"]), ("x [overall]", agg["overall"])])
    assert "n/a" in text


def test_aggregate_means_and_counts():
    gt = np.full((4, 4), 2.0, np.float32)
    r1 = breakdown(gt + np.float32(0.1), gt, partition(np.zeros((4, 4), bool), gt))
    r2 = breakdown(gt + np.float32(0.3), gt, partition(np.zeros((4, 4), bool), gt))
    agg = aggregate_reports([r1, r2])
    assert agg["overall"]["mae"] == pytest.approx(0.2, rel=1e-5)
    assert agg["overall"]["count"] == 32
    assert agg["overall"]["samples"] == 2
