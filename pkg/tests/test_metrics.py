import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framedistill.metrics import ConfusionMatrix, accumulate, format_csv, format_table, scores, scores_json

from .oracles import metrics_oracle

IGN = 65535


def test_ignored_points_not_counted():
    cm = accumulate(ConfusionMatrix.empty(3), [IGN, IGN], [0, 1])
    assert cm.total == 0


def test_single_entry():
    cm = accumulate(ConfusionMatrix.empty(2), [0], [1])
    assert cm.counts.tolist() == [[0, 1], [0, 0]] and cm.counts.dtype == np.uint64


def test_hand_fixture_seven_twelfths():
    s = scores(accumulate(ConfusionMatrix.empty(2), [0, 0, 1, 1], [0, 1, 1, 1]))
    np.testing.assert_allclose(s["per_class_iou"], [1 / 2, 2 / 3], atol=1e-12)
    assert abs(s["miou"] - 7 / 12) < 1e-12
    assert abs(s["macc"] - 0.75) < 1e-12 and abs(s["oacc"] - 0.75) < 1e-12


def test_perfect_prediction():
    gt = [0, 1, 2, 2, 1]
    s = scores(accumulate(ConfusionMatrix.empty(3), gt, gt))
    assert s["miou"] == s["macc"] == s["oacc"] == 1.0


def test_absent_class_excluded():
    s = scores(accumulate(ConfusionMatrix.empty(4), [0, 1, 1], [0, 1, 0]))
    assert math.isnan(s["per_class_iou"][2]) and math.isnan(s["per_class_iou"][3])
    assert abs(s["miou"] - (0.5 + 0.5) / 2) < 1e-12


def test_predicted_only_class_counts_in_miou_not_macc():
    s = scores(accumulate(ConfusionMatrix.empty(3), [0, 0], [0, 2]))
    assert s["per_class_iou"][2] == 0.0 and math.isnan(s["per_class_recall"][2])
    assert abs(s["miou"] - 0.25) < 1e-12 and abs(s["macc"] - 0.5) < 1e-12


def test_errors():
    with pytest.raises(ValueError):
        scores(ConfusionMatrix.empty(3))
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(2), [2], [0])
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(2), [0], [IGN])
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(2), [0, 1], [0])


def _instance(rng):
    k = int(rng.integers(1, 7))
    n = int(rng.integers(1, 1001))
    gt = rng.integers(0, k, n)
    gt[rng.random(n) < 0.1] = IGN
    pred = np.where(rng.random(n) < 0.6, gt, rng.integers(0, k, n))
    pred = np.where(pred == IGN, 0, pred)
    if np.all(gt == IGN):
        gt[0] = 0
    return k, gt, pred


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scores_match_brute_force(seed):
    k, gt, pred = _instance(np.random.default_rng(seed))
    s = scores(accumulate(ConfusionMatrix.empty(k), gt, pred))
    ref = metrics_oracle(gt, pred, k)
    for key in ("miou", "macc", "oacc"):
        assert abs(s[key] - ref[key]) <= 1e-12
    np.testing.assert_allclose(s["per_class_iou"], ref["per_class_iou"], rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_merge_is_additive_and_commutative(seed):
    rng = np.random.default_rng(seed)
    k, gt, pred = _instance(rng)
    cut = int(rng.integers(0, len(gt) + 1))
    a = accumulate(ConfusionMatrix.empty(k), gt[:cut], pred[:cut])
    b = accumulate(ConfusionMatrix.empty(k), gt[cut:], pred[cut:])
    whole = accumulate(ConfusionMatrix.empty(k), gt, pred)
    assert a + b == whole and b + a == whole
    s = scores(whole)
    sup = whole.counts.sum(axis=1) > 0
    assert np.all(s["per_class_iou"][sup] <= s["per_class_recall"][sup] + 1e-15)
    assert np.all((s["per_class_iou"][sup] >= 0) & (s["per_class_recall"][sup] <= 1))


def test_reports():
    s = scores(accumulate(ConfusionMatrix.empty(3), [0, 0, 1, 1], [0, 1, 1, 1]))
    names = ["wall", "floor", "ceiling"]
    csv = format_csv(s, names).splitlines()
    assert csv[0] == "class,iou,recall"
    assert csv[1] == "wall,0.500000,0.500000"
    assert csv[3] == "ceiling,,"
    assert csv[4].startswith("summary,0.583333")
    table = format_table(s, names, "demo")
    assert "58.33" in table and "ceiling" in table
    j = scores_json(s, names)
    assert j["per_class"]["ceiling"]["iou"] is None and j["points"] == 4
