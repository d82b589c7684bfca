import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_metrics, brute_nearest
from semvox.evaluation import (
    EmptyCloudError,
    EvalCloud,
    chamfer_distance,
    evaluate,
    reconstruction_coverage,
    reconstruction_error,
    semantic_scores,
)

NU = 0.1


def _plane(spacing=0.02, extent=1.0):
    g = np.arange(0, extent, spacing)
    x, y = np.meshgrid(g, g, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], 1)


def test_identity():
    p = np.random.default_rng(0).uniform(size=(500, 3))
    assert reconstruction_error(p, p, NU) == 0.0
    assert chamfer_distance(p, p, NU) == 0.0
    assert reconstruction_coverage(p, p, NU) == 100.0


def test_clamp_saturation():
    g = _plane()
    m = g + [0, 0, 5.0]
    assert reconstruction_error(m, g, NU) == pytest.approx(2 * NU)
    assert chamfer_distance(m, g, NU) == pytest.approx(2 * NU)
    assert reconstruction_coverage(m, g, NU) == 0.0


def test_shifted_plane_error():
    g = _plane(0.01, 1.0)
    # shift perpendicular to the plane so every nearest distance is exactly delta
    m = g[::7] + [0, 0, 0.03]
    assert reconstruction_error(m, g, NU) == pytest.approx(0.03, abs=1e-12)
    d, _ = brute_nearest(m, g)
    assert np.allclose(d, 0.03)


def test_chamfer_example_and_symmetry():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    assert chamfer_distance(a, b, 1.0) == 1.0
    rng = np.random.default_rng(4)
    m, g = rng.uniform(size=(300, 3)), rng.uniform(size=(500, 3))
    assert abs(chamfer_distance(m, g, NU) - chamfer_distance(g, m, NU)) <= 1e-9


def test_half_plane_coverage():
    g = _plane(0.05, 1.0)
    m = g[g[:, 0] < 0.5 - 1e-9] + [0, 0, 0.01]
    far = g[:, 0] >= 0.5 + 2 * NU
    assert reconstruction_coverage(m, g[(g[:, 0] < 0.5) | far], NU) == pytest.approx(
        100.0 * np.count_nonzero(g[:, 0] < 0.5) / np.count_nonzero((g[:, 0] < 0.5) | far)
    )
    # with no buffer the covered fraction is counted exactly
    d, _ = brute_nearest(g, m)
    assert reconstruction_coverage(m, g, NU) == 100.0 * np.count_nonzero(d <= 2 * NU) / len(g)


def test_confusion_example():
    g = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    G = EvalCloud(g, [0, 0, 1, 1])
    M = EvalCloud(g, [0, 0, 0, 0])
    miou, acc, per_class, matched, _ = semantic_scores(M, G, NU)
    assert acc == 50.0 and miou == 25.0
    assert per_class == {0: 50.0, 1: 0.0} and matched == 4
    r = evaluate(EvalCloud(g, [0, 0, 1, 1]), G, NU)
    assert r.mIoU == 100.0 and r.Acc == 100.0


def test_unlabeled_predictions_excluded():
    g = np.array([[0.0, 0, 0], [1, 0, 0]])
    miou, acc, _, matched, unl = semantic_scores(EvalCloud(g, [0, -1]), EvalCloud(g, [0, 1]), NU)
    assert acc == 100.0 and matched == 1 and unl == 1


def test_no_matches_gives_absent_scores(caplog):
    G = EvalCloud(np.zeros((1, 3)), [0])
    M = EvalCloud(np.ones((1, 3)), [0])
    with caplog.at_level(logging.WARNING):
        miou, acc, *_ = semantic_scores(M, G, NU)
    assert miou is None and acc is None
    assert "no reconstructed point" in caplog.text
    r = evaluate(M, EvalCloud(np.zeros((1, 3))), NU)
    assert r.mIoU is None and r.Acc is None


def test_empty_cloud_error():
    with pytest.raises(EmptyCloudError):
        reconstruction_error(np.zeros((0, 3)), np.zeros((3, 3)), NU)
    with pytest.raises(EmptyCloudError):
        reconstruction_coverage(np.zeros((3, 3)), np.zeros((0, 3)), NU)
    with pytest.raises(ValueError):
        EvalCloud([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        EvalCloud(np.zeros((2, 3)), [1])


def test_matches_brute_force_exactly():
    rng = np.random.default_rng(12)
    m = rng.uniform(0, 1, (2000, 3)) * [1, 1, 0.05]
    g = rng.uniform(0, 1, (2000, 3)) * [1, 1, 0.05]
    re, cd, rc = brute_metrics(m, g, 0.01)
    assert reconstruction_error(m, g, 0.01) == re
    assert chamfer_distance(m, g, 0.01) == cd
    assert reconstruction_coverage(m, g, 0.01) == rc


def _rot(a, b, c):
    from scipy.spatial.transform import Rotation

    return Rotation.from_euler("xyz", [a, b, c]).as_matrix()


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
@settings(max_examples=25, deadline=None)
def test_rigid_invariance(a, b, c, t):
    rng = np.random.default_rng(9)
    m, g = rng.uniform(size=(200, 3)), rng.uniform(size=(300, 3))
    R = _rot(a, b, c)
    m2, g2 = m @ R.T + t, g @ R.T + t
    assert abs(reconstruction_error(m, g, NU) - reconstruction_error(m2, g2, NU)) <= 1e-6
    assert abs(chamfer_distance(m, g, NU) - chamfer_distance(m2, g2, NU)) <= 1e-6
    assert abs(reconstruction_coverage(m, g, NU) - reconstruction_coverage(m2, g2, NU)) <= 1e-6


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_ranges(n, k, seed):
    rng = np.random.default_rng(seed)
    m, g = rng.uniform(size=(n, 3)), rng.uniform(size=(k, 3))
    r = evaluate(EvalCloud(m), EvalCloud(g), NU)
    assert 0 <= r.RE <= 100 * 2 * NU + 1e-9 and r.CD >= 0 and 0 <= r.RC <= 100


def test_report_units_and_outputs():
    g = _plane()
    r = evaluate(EvalCloud(g + [0, 0, 0.01], np.zeros(len(g))), EvalCloud(g, np.zeros(len(g))), NU)
    assert r.RE == pytest.approx(1.0) and r.RC == 100.0
    d = json.loads(r.to_json())
    assert set(d) >= {"RE", "CD", "RC", "mIoU", "Acc", "per_class_iou"}
    assert r.per_class_csv(["road"]).splitlines() == ["class,name,iou", "0,road,100.0"]
