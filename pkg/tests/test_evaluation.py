import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leapd.detector import Detection
from leapd.evaluation import (
    EvalReport, average_precision, compare_runs, iou, map_metrics, render_ablation, AblationRow,
)
from map_oracle import oracle_map, random_instance


def test_iou_cases():
    assert iou((1, 1, 4, 4), (1, 1, 4, 4)) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)
    with pytest.raises(ValueError):
        iou((0, 0, 0, 2), (0, 0, 1, 1))


def test_ap_cases():
    gt = {"a": [(0, 0, 10, 10)]}
    hit, miss = (0, 0, 10, 10), (50, 50, 5, 5)
    assert average_precision([("a", hit, 0.9)], gt, 0.5) == 1.0
    assert average_precision([("a", hit, 0.9), ("a", miss, 0.8)], gt, 0.5) == 1.0
    assert average_precision([("a", miss, 0.9), ("a", hit, 0.8)], gt, 0.5) == pytest.approx(0.5, abs=1e-12)
    assert average_precision([], {"a": []}, 0.5) is None


def test_perfect_and_empty_detectors():
    gt = {"a": [(0, 0, 10, 10, 0), (20, 20, 5, 8, 1)], "b": [(3, 3, 6, 6, 1)]}
    perfect = {k: [Detection(tuple(b[:4]), b[4], 1.0) for b in v] for k, v in gt.items()}
    r = map_metrics(perfect, gt, ["x", "y"])
    assert r.metrics() == (1.0, 1.0, 1.0)
    assert map_metrics({}, gt, ["x", "y"]).metrics() == (0.0, 0.0, 0.0)


def test_iou_between_thresholds():
    # IoU 0.6: 10x10 box against one shifted so that inter=75, union=125
    gt = {"a": [(0, 0, 10, 10, 0)]}
    dets = {"a": [Detection((0.0, 2.5, 10.0, 10.0), 0, 0.9)]}
    assert iou((0, 0, 10, 10), (0, 2.5, 10, 10)) == pytest.approx(0.6)
    r = map_metrics(dets, gt, ["x"])
    assert (r.mAP50, r.mAP75) == (1.0, 0.0)


def test_no_ground_truth_is_absent(caplog):
    r = map_metrics({"a": [Detection((0, 0, 1, 1), 0, 0.5)]}, {"a": []}, ["x"])
    assert r.metrics() == (None, None, None)
    assert "undefined" in caplog.text


def test_ignored_region_drops_detection():
    gt = {"a": [(0, 0, 10, 10, 0)]}
    dets = {"a": [Detection((30, 30, 4, 4), 0, 0.95), Detection((0, 0, 10, 10), 0, 0.9)]}
    assert map_metrics(dets, gt, ["x"]).mAP50 == pytest.approx(0.5, abs=0.01)
    assert map_metrics(dets, gt, ["x"], {"a": [(28, 28, 10, 10)]}).mAP50 == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_matches_oracle(seed):
    det, gt, cats, ign = random_instance(np.random.default_rng(seed))
    assert map_metrics(det, gt, cats, ign).metrics() == oracle_map(det, gt, cats, ign)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.randoms(use_true_random=False))
def test_permutation_invariance(seed, rnd):
    det, gt, cats, ign = random_instance(np.random.default_rng(seed))
    # distinct scores make the ranking independent of list order
    det = {k: [Detection(d.box, d.category, d.score + 1e-6 * i) for i, d in enumerate(v)]
           for k, v in det.items()}
    shuffled = {}
    for k, v in det.items():
        v = list(v)
        rnd.shuffle(v)
        shuffled[k] = v
    assert map_metrics(det, gt, cats, ign).metrics() == map_metrics(shuffled, gt, cats, ign).metrics()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_ap_monotone_in_threshold(seed):
    det, gt, cats, ign = random_instance(np.random.default_rng(seed))
    for row in map_metrics(det, gt, cats, ign).per_category.values():
        aps = row["by_threshold"]
        assert all(a >= b for a, b in zip(aps, aps[1:]))


def test_comparison_deltas():
    t = compare_runs([("baseline", (0.397, 0.248, 0.237)), ("method", (0.421, 0.255, 0.248))], "baseline")
    assert [round(100 * d, 6) for d in t.deltas[1]] == [2.4, 0.7, 1.1]
    text = t.render()
    assert "+2.4" in text and "+0.7" in text and "+1.1" in text


def test_comparison_identical_and_order(tmp_path):
    r = EvalReport(0.5, 0.3, 0.2)
    t = compare_runs([("c", r), ("a", r), ("b", r)])
    assert t.names == ["c", "a", "b"]
    assert all(d == 0 for row in t.deltas for d in row)
    with pytest.raises(ValueError):
        compare_runs([("a", r), ("a", r)])
    t.write(tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "comparison.jsonl").read_text().splitlines()]
    assert [row["run"] for row in rows] == ["c", "a", "b"]


def test_report_round_trip():
    r = EvalReport(0.5, 0.25, 0.3, {"car": {"AP50": 0.5, "AP75": 0.25, "AP50_95": 0.3}}, {"images": 2})
    assert EvalReport.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_ablation_rendering():
    rows = [AblationRow("4", None, EvalReport(0.1, 0.05, 0.06), 1000),
            AblationRow("manual(32)", None, EvalReport(0.09, 0.04, 0.05), 1000)]
    text = render_ablation(rows)
    assert "manual(32)" in text and "10.0" in text
