import numpy as np
import pytest

from hier_attn.boxes import BoxRecord
from hier_attn.metrics import (
    MetricsReport,
    average_precision,
    evaluate_detections,
    percentile_thresholds,
    record_volume,
    size_aware_ap,
)


def rec(cls, score, center, size=(1.0, 1.0, 1.0)):
    return BoxRecord(class_id=cls, score=score, center=tuple(center), size=tuple(size))


def cube(x, score=1.0, cls=0, edge=1.0):
    return rec(cls, score, (x, 0.0, 0.0), (edge, edge, edge))


# ---------------------------------------------------------------------------
# brute-force reference: same protocol, written with plain loops
# ---------------------------------------------------------------------------

def iou_ref(a, b):
    lo = [max(a.center[i] - a.size[i] / 2, b.center[i] - b.size[i] / 2) for i in range(3)]
    hi = [min(a.center[i] + a.size[i] / 2, b.center[i] + b.size[i] / 2) for i in range(3)]
    inter = 1.0
    for i in range(3):
        inter *= max(hi[i] - lo[i], 0.0)
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


def ap_reference(preds, gts, thr):
    """Exhaustive loop re-implementation of greedy matching + envelope AP.

    A prediction pairs with its best-IoU ground truth; if that box is
    already claimed the prediction is a false positive.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].score)
    used = [False] * len(gts)
    flags = []
    for pi in order:
        scene, p = preds[pi]
        best, best_iou = -1, 0.0
        for gi, (gscene, g) in enumerate(gts):
            if gscene != scene:
                continue
            v = iou_ref(p, g)
            if v > best_iou:
                best, best_iou = gi, v
        if best >= 0 and best_iou >= thr and not used[best]:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    if not gts:
        return 0.0
    # walk every prefix, build the envelope explicitly
    points = []
    tp = fp = 0
    for f in flags:
        tp, fp = tp + int(f), fp + int(not f)
        points.append((tp / len(gts), tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        if r > prev_r:
            best_p = max(p for rr, p in points[i:] if rr >= r)
            ap += (r - prev_r) * best_p
            prev_r = r
    return ap


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def test_single_perfect_prediction():
    gts = [(0, cube(0.0))]
    preds = [(0, cube(0.05, score=0.9))]
    assert average_precision(preds, gts, 0.25) == 1.0


def test_wrong_first_prediction_halves_ap():
    gts = [(0, cube(0.0))]
    preds = [(0, cube(50.0, score=0.95)), (0, cube(0.0, score=0.5))]
    assert average_precision(preds, gts, 0.25) == pytest.approx(0.5, abs=1e-12)


def test_ap_matches_reference_on_random_micro_instances():
    rng = np.random.default_rng(0)
    for trial in range(120):
        n_gt = int(rng.integers(0, 6))
        n_pred = int(rng.integers(0, 6))
        gts = [(int(rng.integers(0, 2)), cube(rng.uniform(-2, 2), edge=rng.uniform(0.5, 2)))
               for _ in range(n_gt)]
        preds = [(int(rng.integers(0, 2)),
                  cube(rng.uniform(-2, 2), score=float(rng.random()), edge=rng.uniform(0.5, 2)))
                 for _ in range(n_pred)]
        thr = float(rng.choice([0.25, 0.5]))
        got = average_precision(preds, gts, thr)
        want = ap_reference(preds, gts, thr)
        assert abs(got - want) < 1e-12


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(1)
    for _ in range(30):
        gts = [(0, cube(rng.uniform(-1, 1))) for _ in range(rng.integers(1, 5))]
        preds = [(0, cube(rng.uniform(-1, 1), score=float(rng.random())))
                 for _ in range(rng.integers(1, 6))]
        values = [average_precision(preds, gts, t) for t in (0.1, 0.25, 0.5, 0.75)]
        assert all(values[i + 1] <= values[i] + 1e-12 for i in range(3))


def test_duplicate_prediction_never_helps():
    rng = np.random.default_rng(2)
    for _ in range(30):
        gts = [(0, cube(rng.uniform(-1, 1))) for _ in range(rng.integers(1, 4))]
        preds = [(0, cube(rng.uniform(-1, 1), score=float(rng.random())))
                 for _ in range(rng.integers(1, 5))]
        base = average_precision(preds, gts, 0.25)
        dup = preds + [preds[0]]
        assert average_precision(dup, gts, 0.25) <= base + 1e-12


def test_matching_respects_scenes():
    gts = [(0, cube(0.0))]
    preds = [(1, cube(0.0, score=1.0))]  # right place, wrong scene
    assert average_precision(preds, gts, 0.25) == 0.0


# ---------------------------------------------------------------------------
# size-aware mAP
# ---------------------------------------------------------------------------

def test_volume_categories_with_paper_thresholds():
    vols = {"S": 0.1, "M": 0.3, "L": 0.6}
    edges = {k: v ** (1 / 3) for k, v in vols.items()}
    gts = [(0, cube(0.0, edge=edges["S"])),
           (0, cube(5.0, edge=edges["M"])),
           (0, cube(10.0, edge=edges["L"]))]
    # detect only the small one
    preds = [(0, cube(0.0, score=0.9, edge=edges["S"]))]
    out = size_aware_ap(preds, gts, 0.25, v_small=0.155, v_large=0.526)
    assert out["S"] == 1.0
    assert out["M"] == 0.0
    assert out["L"] == 0.0


def test_size_aware_cross_category_match_discarded():
    # one big GT and one small GT; the only prediction hits the big GT, so
    # scoring the small category must not count it as a false positive
    gts = [(0, cube(0.0, edge=2.0)), (0, cube(10.0, edge=0.4))]
    preds = [(0, cube(0.0, score=0.9, edge=2.0)),
             (0, cube(10.0, score=0.5, edge=0.4))]
    out = size_aware_ap(preds, gts, 0.25, v_small=1.0, v_large=2.0)
    assert out["S"] == 1.0   # small pred still matches; big match discarded
    assert out["L"] == 1.0


def test_size_aware_degenerate_partition_equals_overall():
    rng = np.random.default_rng(3)
    gts = [(0, cube(rng.uniform(-2, 2), edge=rng.uniform(0.5, 1.5))) for _ in range(5)]
    preds = [(0, cube(rng.uniform(-2, 2), score=float(rng.random()), edge=rng.uniform(0.5, 1.5)))
             for _ in range(7)]
    out = size_aware_ap(preds, gts, 0.25, v_small=0.0, v_large=float("inf"))
    assert out["S"] is None and out["L"] is None
    assert out["M"] == pytest.approx(average_precision(preds, gts, 0.25), abs=1e-12)


def test_size_aware_rejects_swapped_thresholds():
    with pytest.raises(ValueError):
        size_aware_ap([], [(0, cube(0.0))], 0.25, v_small=2.0, v_large=1.0)


# ---------------------------------------------------------------------------
# percentile thresholds
# ---------------------------------------------------------------------------

def test_percentiles_1_to_100():
    vols = list(range(1, 101))
    assert percentile_thresholds(vols) == (30, 70)


def test_percentiles_constant_list():
    assert percentile_thresholds([2.5] * 10) == (2.5, 2.5)


def test_percentiles_two_values():
    assert percentile_thresholds([7.0, 3.0]) == (3.0, 7.0)


def test_percentiles_need_two():
    with pytest.raises(ValueError):
        percentile_thresholds([1.0])


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def test_evaluate_detections_report(tmp_path):
    gts = [(0, cube(0.0, cls=0)), (0, cube(5.0, cls=1, edge=2.0)),
           (1, cube(0.0, cls=0, edge=0.5))]
    preds = [(0, cube(0.0, cls=0, score=0.9)),
             (0, cube(5.0, cls=1, score=0.8, edge=2.0)),
             (1, cube(0.0, cls=0, score=0.7, edge=0.5))]
    report = evaluate_detections(preds, gts)
    assert report.map_at[0.25] == 1.0
    assert report.map_at[0.50] == 1.0
    assert report.threshold_source == "dataset-computed"
    text = "\n".join(report.lines())
    assert "mAP@0.25" in text and "mAP_S" in text
    out = tmp_path / "report.jsonl"
    report.dump(out)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == len(report.records())


def test_evaluate_flags_empty_class():
    gts = [(0, cube(0.0, cls=0))]
    preds = [(0, cube(0.0, cls=0, score=0.9)), (0, cube(9.0, cls=1, score=0.4))]
    report = evaluate_detections(preds, gts, volume_thresholds=(0.1, 0.9),
                                 threshold_source="explicit")
    assert report.per_class_ap[0.25][1] is None  # class 1 has no GT: flagged
    assert report.map_at[0.25] == 1.0            # and excluded from the mean


def test_evaluate_paper_thresholds_passthrough():
    gts = [(0, cube(0.0))]
    preds = [(0, cube(0.0, score=1.0))]
    report = evaluate_detections(preds, gts, volume_thresholds=(0.155, 0.526),
                                 threshold_source="paper-fixed")
    assert report.volume_thresholds == (0.155, 0.526)
    assert report.threshold_source == "paper-fixed"
