"""Detection-quality metrics: mean average precision and size-aware mAP.

Predictions and ground truth are (scene_id, BoxRecord) pairs; matching
never crosses scene boundaries. AP uses the all-point precision-envelope
interpolation. The size-aware variant partitions ground-truth boxes by
volume and scores each partition separately: predictions matched to a box
outside the partition under evaluation are discarded rather than counted
as false positives.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BoxRecord, iou_3d_axis_aligned

SIZE_CATEGORIES = ("S", "M", "L")


def _record_iou(a: BoxRecord, b: BoxRecord) -> float:
    return iou_3d_axis_aligned(a.to_proposal(1), b.to_proposal(1))


def record_volume(r: BoxRecord) -> float:
    return float(r.size[0] * r.size[1] * r.size[2])


def _match_greedy(predictions, ground_truth, iou_threshold):
    """Confidence-ordered greedy matching within scenes.

    Each prediction is paired with its highest-IoU ground-truth box in the
    same scene; it counts as a match only if that IoU clears the threshold
    and the box is still free. A second prediction on an already-claimed
    box is a false positive, never re-routed to another box.

    Returns the prediction order (indices sorted by descending confidence,
    ties kept in input order) and, aligned with it, the matched ground
    truth index or -1.
    """
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i][1].score)
    taken = set()
    matches = []
    for pi in order:
        scene, pred = predictions[pi]
        best_iou, best_gt = 0.0, -1
        for gi, (gscene, gt) in enumerate(ground_truth):
            if gscene != scene:
                continue
            iou = _record_iou(pred, gt)
            if iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt >= 0 and best_iou >= iou_threshold and best_gt not in taken:
            taken.add(best_gt)
            matches.append(best_gt)
        else:
            matches.append(-1)
    return order, matches


def _envelope_ap(tp_flags: Sequence[bool], n_gt: int) -> float:
    """Area under the precision envelope over recall (all-point AP)."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in tp_flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in tp_flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def average_precision(predictions, ground_truth, iou_threshold: float) -> float:
    """All-point AP for one class.

    predictions / ground_truth: sequences of (scene_id, BoxRecord). With no
    ground truth the value is 0; callers decide whether to exclude it from
    class means (see evaluate_detections).
    """
    if not ground_truth:
        return 0.0
    order, matches = _match_greedy(predictions, ground_truth, iou_threshold)
    return _envelope_ap([m >= 0 for m in matches], len(ground_truth))


def size_aware_ap(predictions, ground_truth, iou_threshold: float,
                  v_small: float, v_large: float) -> Dict[str, Optional[float]]:
    """Per-size-category AP for one class.

    Ground truth is partitioned by volume (S: v <= v_small, L: v > v_large,
    M otherwise). For each category the other categories' boxes are removed
    from scoring; predictions the matcher paired with a removed box are
    dropped instead of becoming false positives. Empty categories yield
    None.
    """
    if v_small >= v_large:
        raise ValueError("v_small must be below v_large")
    categories = {}
    for gi, (_, gt) in enumerate(ground_truth):
        v = record_volume(gt)
        categories[gi] = "S" if v <= v_small else ("L" if v > v_large else "M")
    order, matches = _match_greedy(predictions, ground_truth, iou_threshold)
    out: Dict[str, Optional[float]] = {}
    for cat in SIZE_CATEGORIES:
        n_gt = sum(1 for c in categories.values() if c == cat)
        if n_gt == 0:
            out[cat] = None
            continue
        flags = []
        for gi in matches:
            if gi >= 0 and categories[gi] != cat:
                continue  # matched outside the category: discarded
            flags.append(gi >= 0)
        out[cat] = _envelope_ap(flags, n_gt)
    return out


def percentile_thresholds(volumes: Sequence[float], p_low: float = 30.0,
                          p_high: float = 70.0) -> Tuple[float, float]:
    """Nearest-rank percentiles of a volume list (no interpolation)."""
    vols = sorted(float(v) for v in volumes)
    if len(vols) < 2:
        raise ValueError("need at least two volumes for thresholds")

    def nearest_rank(p):
        rank = max(1, math.ceil(p / 100.0 * len(vols)))
        return vols[rank - 1]

    return nearest_rank(p_low), nearest_rank(p_high)


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-class APs, their means, and the size-aware breakdown."""

    iou_thresholds: tuple
    per_class_ap: Dict[float, Dict[int, Optional[float]]]
    map_at: Dict[float, float]
    size_map: Dict[str, Optional[float]]
    volume_thresholds: Tuple[float, float]
    threshold_source: str            # "paper-fixed" | "dataset-computed" | "explicit"
    size_iou_threshold: float = 0.25
    class_names: Dict[int, str] = field(default_factory=dict)

    def lines(self) -> List[str]:
        """Aligned plain-text table."""
        out = []
        header = f"{'class':<12}" + "".join(f"AP@{t:<9.2f}" for t in self.iou_thresholds)
        out.append(header)
        out.append("-" * len(header))
        classes = sorted({c for t in self.iou_thresholds for c in self.per_class_ap[t]})
        for c in classes:
            name = self.class_names.get(c, f"class{c}")
            row = f"{name:<12}"
            for t in self.iou_thresholds:
                ap = self.per_class_ap[t].get(c)
                row += f"{ap:<12.4f}" if ap is not None else f"{'(no gt)':<12}"
            out.append(row)
        out.append("-" * len(header))
        for t in self.iou_thresholds:
            out.append(f"mAP@{t:.2f} = {self.map_at[t]:.4f}")
        vs, vl = self.volume_thresholds
        out.append(f"size thresholds: v_small={vs:.6g} v_large={vl:.6g} ({self.threshold_source})")
        for cat in SIZE_CATEGORIES:
            v = self.size_map[cat]
            shown = f"{v:.4f}" if v is not None else "(empty category)"
            out.append(f"mAP_{cat} (IoU {self.size_iou_threshold:.2f}) = {shown}")
        return out

    def records(self) -> List[dict]:
        """Line-delimited record form (one dict per record)."""
        recs = [{"type": "thresholds", "v_small": self.volume_thresholds[0],
                 "v_large": self.volume_thresholds[1], "source": self.threshold_source}]
        for t in self.iou_thresholds:
            for c, ap in sorted(self.per_class_ap[t].items()):
                recs.append({"type": "class_ap", "iou": t, "class": c, "ap": ap})
            recs.append({"type": "map", "iou": t, "value": self.map_at[t]})
        for cat in SIZE_CATEGORIES:
            recs.append({"type": "size_map", "category": cat,
                         "iou": self.size_iou_threshold, "value": self.size_map[cat]})
        return recs

    def dump(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate_detections(predictions, ground_truth, iou_thresholds=(0.25, 0.50),
                        volume_thresholds: Optional[Tuple[float, float]] = None,
                        threshold_source: str = "dataset-computed",
                        size_iou_threshold: float = 0.25,
                        class_names: Optional[Dict[int, str]] = None) -> MetricsReport:
    """Score a full detection run.

    predictions / ground_truth: (scene_id, BoxRecord) pairs across all
    classes. Classes with no ground truth are flagged and excluded from the
    means. Without explicit volume thresholds they are the 30th/70th
    nearest-rank percentiles of the ground-truth volumes.
    """
    classes = sorted({r.class_id for _, r in ground_truth} | {r.class_id for _, r in predictions})
    by_class_pred = {c: [(s, r) for s, r in predictions if r.class_id == c] for c in classes}
    by_class_gt = {c: [(s, r) for s, r in ground_truth if r.class_id == c] for c in classes}

    if volume_thresholds is None:
        volume_thresholds = percentile_thresholds([record_volume(r) for _, r in ground_truth])
        threshold_source = "dataset-computed"
    v_small, v_large = volume_thresholds
    if v_small >= v_large:
        raise ValueError("v_small must be below v_large")

    per_class_ap: Dict[float, Dict[int, Optional[float]]] = {t: {} for t in iou_thresholds}
    map_at = {}
    for t in iou_thresholds:
        defined = []
        for c in classes:
            if not by_class_gt[c]:
                per_class_ap[t][c] = None
                continue
            ap = average_precision(by_class_pred[c], by_class_gt[c], t)
            per_class_ap[t][c] = ap
            defined.append(ap)
        map_at[t] = float(np.mean(defined)) if defined else 0.0

    cat_values = {cat: [] for cat in SIZE_CATEGORIES}
    for c in classes:
        if not by_class_gt[c]:
            continue
        cats = size_aware_ap(by_class_pred[c], by_class_gt[c], size_iou_threshold,
                             v_small, v_large)
        for cat in SIZE_CATEGORIES:
            if cats[cat] is not None:
                cat_values[cat].append(cats[cat])
    size_map = {cat: (float(np.mean(v)) if v else None) for cat, v in cat_values.items()}

    return MetricsReport(
        iou_thresholds=tuple(iou_thresholds),
        per_class_ap=per_class_ap,
        map_at=map_at,
        size_map=size_map,
        volume_thresholds=(float(v_small), float(v_large)),
        threshold_source=threshold_source,
        size_iou_threshold=size_iou_threshold,
        class_names=class_names or {},
    )
