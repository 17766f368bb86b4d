"""FROC evaluation and the competition performance metric (CPM).

A detection hits a lesion when its center lies within the lesion's radius
(edge/2, Euclidean distance, inclusive).  Detections are processed in
descending score; each lesion can be hit once, later detections on an
already-hit lesion count as neither true nor false positives.  Because
the greedy pass consumes detections best-first, the labels assigned in a
single pass are exactly what per-threshold rematching would produce, so
the FROC sweep is a cumulative walk down the sorted detection list.

CPM is the mean lesion recall at false-positive rates {1/8, 1/4, 1/2, 1,
2, 4, 8} per scan, read off the FROC curve with linear interpolation
between bracketing points, reported as a percentage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .anchors import Detection
from .exceptions import DataError
from .volume import Box3D

__all__ = [
    "CPM_RATES",
    "MatchedDetections",
    "FrocCurve",
    "match_detections",
    "froc",
    "recall_at_rate",
    "cpm",
    "write_froc_csv",
    "write_cpm_json",
]

CPM_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

TP, FP, IGNORED = "TP", "FP", "ignored"


@dataclass
class MatchedDetections:
    """Greedy matching outcome over a whole test set.

    ``scores``/``labels`` are parallel arrays over all detections, sorted
    by descending score (ties keep scan order, then per-scan input order).
    """

    scores: np.ndarray
    labels: list[str]  # TP, FP, or ignored per detection
    gt_hit: dict[str, list[bool]]
    n_scans: int
    n_lesions: int


def match_detections(
    dets: dict[str, list[Detection]], gts: dict[str, list[Box3D]]
) -> MatchedDetections:
    """Label every detection TP/FP/ignored against per-scan ground truth.

    ``gts`` defines the scan set; detections for unknown scans are
    rejected.  Scans without an entry in ``dets`` simply contribute
    misses.
    """
    for scan_id in dets:
        if scan_id not in gts:
            raise DataError(f"detections reference unknown scan {scan_id!r}")

    records = []  # (-score, scan_order, det_order, scan_id, det)
    for scan_order, scan_id in enumerate(gts):
        for det_order, det in enumerate(dets.get(scan_id, [])):
            records.append((-det.score, scan_order, det_order, scan_id, det))
    records.sort(key=lambda r: r[:3])

    hit = {scan_id: [False] * len(boxes) for scan_id, boxes in gts.items()}
    scores = np.empty(len(records))
    labels: list[str] = []
    for i, (_, _, _, scan_id, det) in enumerate(records):
        scores[i] = det.score
        boxes = gts[scan_id]
        c = np.asarray(det.box.center)
        best_j = -1
        best_d = np.inf
        hit_any = False
        for j, g in enumerate(boxes):
            d = float(np.linalg.norm(c - np.asarray(g.center)))
            if d <= g.edge / 2.0:
                hit_any = True
                if not hit[scan_id][j] and d < best_d:
                    best_d = d
                    best_j = j
        if best_j >= 0:
            hit[scan_id][best_j] = True
            labels.append(TP)
        elif hit_any:
            labels.append(IGNORED)
        else:
            labels.append(FP)
    return MatchedDetections(
        scores=scores,
        labels=labels,
        gt_hit=hit,
        n_scans=len(gts),
        n_lesions=sum(len(b) for b in gts.values()),
    )


@dataclass
class FrocCurve:
    """Operating points (fps_per_scan, recall), ascending and deduplicated."""

    points: list[tuple[float, float]]
    n_scans: int
    n_lesions: int
    thresholds: list[float] | None = None  # score realizing each point

    def __post_init__(self):
        fps = [p[0] for p in self.points]
        rec = [p[1] for p in self.points]
        if any(b < a for a, b in zip(fps, fps[1:])) or any(
            b < a for a, b in zip(rec, rec[1:])
        ):
            raise ValueError("FROC points must be non-decreasing in fps and recall")
        if self.thresholds is not None and len(self.thresholds) != len(self.points):
            raise ValueError("thresholds must align with points")


def froc(matched: MatchedDetections) -> FrocCurve:
    """Sweep the score threshold over all distinct detection scores."""
    if matched.n_lesions < 1:
        raise DataError("FROC requires at least one lesion in the test set")
    if matched.n_scans < 1:
        raise DataError("FROC requires at least one scan")
    if len(matched.labels) == 0:
        return FrocCurve(points=[(0.0, 0.0)], n_scans=matched.n_scans,
                         n_lesions=matched.n_lesions, thresholds=[float("inf")])

    tp_cum = 0
    fp_cum = 0
    by_threshold: dict[float, tuple[int, int]] = {}
    for i, label in enumerate(matched.labels):
        if label == TP:
            tp_cum += 1
        elif label == FP:
            fp_cum += 1
        by_threshold[float(matched.scores[i])] = (tp_cum, fp_cum)

    points = []
    thresholds = []
    best_recall = -1.0
    for score in sorted(by_threshold, reverse=True):  # ascending fps order
        tp_c, fp_c = by_threshold[score]
        fps = fp_c / matched.n_scans
        recall = tp_c / matched.n_lesions
        if points and points[-1][0] == fps:
            if recall > best_recall:
                points[-1] = (fps, recall)
                thresholds[-1] = score
                best_recall = recall
        else:
            points.append((fps, recall))
            thresholds.append(score)
            best_recall = recall
    return FrocCurve(
        points=points,
        n_scans=matched.n_scans,
        n_lesions=matched.n_lesions,
        thresholds=thresholds,
    )


def recall_at_rate(curve: FrocCurve, rate: float) -> float:
    """Recall at a false-positive rate: interpolated, 0 left of the curve,
    flat right of it."""
    pts = curve.points
    if not pts or rate < pts[0][0]:
        return 0.0
    lo = 0
    for i, (fps, _) in enumerate(pts):
        if fps <= rate:
            lo = i
        else:
            break
    if lo == len(pts) - 1:
        return pts[lo][1]
    f0, r0 = pts[lo]
    f1, r1 = pts[lo + 1]
    if f1 == f0:
        return max(r0, r1)
    t = (rate - f0) / (f1 - f0)
    return r0 + t * (r1 - r0)


def cpm(curve: FrocCurve) -> float:
    """Mean recall at the seven benchmark FP rates, as a percentage."""
    return 100.0 * float(np.mean([recall_at_rate(curve, r) for r in CPM_RATES]))


def write_froc_csv(curve: FrocCurve, path: str) -> None:
    """CSV columns: threshold, fps_per_scan, recall."""
    lines = ["threshold,fps_per_scan,recall"]
    thresholds = curve.thresholds or [""] * len(curve.points)
    for thr, (fps, rec) in zip(thresholds, curve.points):
        lines.append(f"{thr!r},{fps!r},{rec!r}" if thr != "" else f",{fps!r},{rec!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_cpm_json(curve: FrocCurve, path: str) -> None:
    """JSON summary {"cpm": ..., "recalls_at": [... 7 rates ...]}."""
    summary = {
        "cpm": cpm(curve),
        "recalls_at": [recall_at_rate(curve, r) for r in CPM_RATES],
    }
    with open(path, "w") as f:
        json.dump(summary, f, sort_keys=True)
        f.write("\n")
