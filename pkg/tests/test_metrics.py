import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneegrade import metrics as M

import oracles as O

grades = st.integers(0, 4)
paired = st.integers(1, 60).flatmap(lambda n: st.tuples(st.lists(grades, min_size=n, max_size=n),
                                                         st.lists(grades, min_size=n, max_size=n)))


def test_prf_examples():
    cm = np.diag([3, 1, 4, 1, 5])
    s = M.prf(cm)
    assert s["precision"] == s["recall"] == s["f1"] == [1.0] * 5
    cm = np.diag([3, 0, 4, 1, 5])
    s = M.prf(cm)
    assert s["precision"][1] == s["recall"][1] == s["f1"][1] == 0.0
    s = M.prf([[2, 1], [1, 2]])
    assert s["precision"] == s["recall"] == pytest.approx([2 / 3, 2 / 3], abs=1e-15)
    assert s["f1"] == pytest.approx([2 / 3, 2 / 3], abs=1e-15)


def test_kappa_examples():
    assert M.cohen_kappa(np.diag([2, 3, 1, 0, 4])) == 1.0
    assert M.cohen_kappa([[2, 1], [1, 2]]) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        M.cohen_kappa(np.zeros((5, 5)))
    # p_e == 1 degenerate rule
    assert M.cohen_kappa([[5, 0], [0, 0]]) == 1.0


def test_kappa_independent_predictions_near_zero():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 5, 100_000)
    p = rng.integers(0, 5, 100_000)
    assert abs(M.cohen_kappa(M.confusion_matrix(a, p))) < 0.05


def test_mae_examples():
    assert M.mae([1, 2], [1, 2]) == 0.0
    assert M.mae([0, 1, 2], [0, 2, 4]) == 1.0
    with pytest.raises(ValueError):
        M.mae([1], [1, 2])
    with pytest.raises(ValueError):
        M.mae([], [])


def test_bootstrap_examples():
    assert M.bootstrap_ci([0.7] * 20) == pytest.approx((0.7, 0.7), abs=1e-15)
    e = np.random.default_rng(1).random(50)
    assert M.bootstrap_ci(e, seed=4) == M.bootstrap_ci(e, seed=4)
    with pytest.raises(ValueError):
        M.bootstrap_ci([])


def test_bootstrap_brackets_mean_and_shrinks():
    rng = np.random.default_rng(2)
    small = rng.exponential(1.0, 400)
    large = rng.exponential(1.0, 1600)
    lo1, hi1 = M.bootstrap_ci(small, seed=0)
    lo2, hi2 = M.bootstrap_ci(large, seed=0)
    assert lo1 < small.mean() < hi1 and lo2 < large.mean() < hi2
    assert (hi2 - lo2) / (hi1 - lo1) == pytest.approx(0.5, abs=0.12)
    # coverage of the analytic mean (1.0) over independent samples
    hits = 0
    for s in range(100):
        lo, hi = M.bootstrap_ci(np.random.default_rng(100 + s).exponential(1.0, 200), resamples=500, seed=s)
        hits += lo <= 1.0 <= hi
    assert hits >= 85


def test_neighbor_fraction_examples():
    cm = M.confusion_matrix([0, 0, 0], [1, 1, 2])
    assert M.neighbor_fraction(cm) == pytest.approx(2 / 3)
    assert M.neighbor_fraction(M.confusion_matrix([0, 3], [1, 2])) == 1.0
    assert M.neighbor_fraction(np.diag([1, 2, 3, 4, 5])) == 1.0


def test_localization_examples():
    a = np.zeros((10, 10), bool)
    a[:, :4] = True
    assert M.dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[:, 6:] = True
    assert M.dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[:, 2:6] = True
    assert M.dice(a, c) == 0.5
    assert M.dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        M.dice(np.zeros((2, 2)), np.zeros((3, 3)))
    boxes = [(0.2, 0.3, 0.1, 0.1), (0.7, 0.5, 0.2, 0.3)]
    assert M.bbox_mse(boxes, boxes) == 0.0
    with pytest.raises(ValueError):
        M.bbox_mse(boxes, boxes[:1])
    assert M.side_accuracy(["left", "right"], ["left", "left"]) == 0.5
    with pytest.raises(ValueError):
        M.side_accuracy(["left"], [])


def test_iou():
    assert M.iou((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == pytest.approx(1.0)
    assert M.iou((0.2, 0.5, 0.2, 0.2), (0.8, 0.5, 0.2, 0.2)) == 0.0
    assert M.iou((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.2)) == pytest.approx(1 / 3)


@settings(max_examples=200, deadline=None)
@given(paired)
def test_metrics_match_oracles(pair):
    actual, predicted = pair
    cm = M.confusion_matrix(actual, predicted)
    ocm = O.confusion(actual, predicted)
    assert cm.tolist() == ocm
    s, o = M.prf(cm), O.prf(ocm)
    for key in ("precision", "recall", "f1"):
        assert s[key] == pytest.approx(o[key], rel=1e-12, abs=0)
        assert s["macro"][key] == pytest.approx(float(np.mean(s[key])), rel=1e-12, abs=1e-300)
    assert M.cohen_kappa(cm) == pytest.approx(O.kappa(ocm), rel=1e-12, abs=1e-15)
    for g in range(5):
        assert M.per_grade_kappa(cm, g) == pytest.approx(O.kappa(O.binary_collapse(ocm, g)), rel=1e-12, abs=1e-15)
    assert M.mae(predicted, actual) == pytest.approx(O.mae(predicted, actual), rel=1e-12, abs=0)
    assert M.neighbor_fraction(cm) == pytest.approx(O.neighbor_fraction(ocm), rel=1e-12, abs=0)


@settings(max_examples=100, deadline=None)
@given(paired)
def test_kappa_bounds(pair):
    actual, predicted = pair
    cm = M.confusion_matrix(actual, predicted)
    k = M.cohen_kappa(cm)
    assert k <= 1.0 + 1e-12
    perfect = actual == predicted
    assert (abs(k - 1.0) < 1e-12) == perfect


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 4), min_size=1, max_size=40), st.integers(0, 2**31))
def test_bootstrap_contains_point_estimate(errors, seed):
    lo, hi = M.bootstrap_ci(errors, resamples=300, seed=seed)
    mean = float(np.mean(errors))
    assert lo <= mean + 1e-9 and mean - 1e-9 <= hi


def test_report_json_and_csv():
    r = M.evaluate([0, 1, 2, 3, 4, 4], [0, 1, 1, 3, 2, 4], seed=0, resamples=100, label="x")
    d = json.loads(r.to_json())
    assert d["version"] == M.REPORT_VERSION and d["n"] == 6
    assert d["confusion"] == r.confusion.tolist()
    for key in ("precision", "recall", "f1", "kappa"):
        assert d["macro"][key] == pytest.approx(np.mean([d["per_grade"][str(g)][key] for g in range(5)]),
                                                rel=1e-12)
    lines = r.confusion_csv().splitlines()
    assert lines[0] == "actual,pred_0,pred_1,pred_2,pred_3,pred_4"
    assert len(lines) == 6
    assert r.to_json() == M.evaluate([0, 1, 2, 3, 4, 4], [0, 1, 1, 3, 2, 4], seed=0, resamples=100,
                                     label="x").to_json()
