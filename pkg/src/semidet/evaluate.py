"""COCO-style average precision and pseudo-label quality statistics.

Detections are matched greedily in score order: each ground truth can
be claimed once, the highest-IoU eligible ground truth wins, ties break
toward the lower ground-truth index. AP uses 101-point interpolation
over recalls 0.00..1.00.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Detection, pairwise_iou

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    iou_thresholds: tuple[float, ...]
    ap_per_threshold: dict[float, float]
    map: float
    ap50: float | None
    ap75: float | None
    pr_curves: dict[float, list[float]]  # interpolated precision on RECALL_GRID
    pseudo_stats: dict | None = None
    num_images: int = 0
    num_gt: int = 0

    def to_json_dict(self) -> dict:
        return {
            "version": 1,
            "iou_thresholds": list(self.iou_thresholds),
            "ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
            "map": self.map,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "pr_curves": {f"{t:.2f}": v for t, v in self.pr_curves.items()},
            "pseudo_stats": self.pseudo_stats,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=1)
            f.write("\n")


def _match_flags(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[np.ndarray],
    iou_thr: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Global score-sorted TP flags across all images."""
    records = []  # (score, image index, det index)
    for img_i, dets in enumerate(dets_per_image):
        for det_i, det in enumerate(dets):
            records.append((det.score, img_i, det_i))
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    n_gt = sum(g.shape[0] for g in gts_per_image)
    claimed = [np.zeros(g.shape[0], dtype=bool) for g in gts_per_image]
    tp = np.zeros(len(records), dtype=bool)
    scores = np.zeros(len(records), dtype=np.float64)
    for out_i, (score, img_i, det_i) in enumerate(records):
        scores[out_i] = score
        gts = gts_per_image[img_i]
        if gts.shape[0] == 0:
            continue
        det = dets_per_image[img_i][det_i]
        ious = pairwise_iou(
            np.array([det.box.as_tuple()]), gts
        )[0]
        ious[claimed[img_i]] = -1.0
        best = int(np.argmax(ious))  # ties go to the lower gt index
        if ious[best] >= iou_thr:
            tp[out_i] = True
            claimed[img_i][best] = True
    return tp, scores, n_gt


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray]:
    """101-point interpolated AP and the precision envelope."""
    if n_gt == 0 or tp.size == 0:
        return 0.0, np.zeros_like(RECALL_GRID)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # envelope[i] = max precision over points i.. (recall is nondecreasing)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros_like(RECALL_GRID)
    for gi, r in enumerate(RECALL_GRID):
        mask = recall >= r - 1e-12
        interp[gi] = envelope[np.argmax(mask)] if mask.any() else 0.0
    return float(interp.mean()), interp


def average_precision(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[np.ndarray],
    iou_thr: float,
) -> float:
    """Dataset-level AP at one IoU threshold (0 when no ground truth)."""
    tp, _, n_gt = _match_flags(dets_per_image, gts_per_image, iou_thr)
    return _interpolated_ap(tp, n_gt)[0]


def evaluate_detections(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[np.ndarray],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    pseudo_stats: dict | None = None,
) -> EvalReport:
    ap: dict[float, float] = {}
    curves: dict[float, list[float]] = {}
    n_gt = sum(np.asarray(g).reshape(-1, 4).shape[0] for g in gts_per_image)
    for thr in thresholds:
        tp, _, total_gt = _match_flags(dets_per_image, gts_per_image, thr)
        ap_val, curve = _interpolated_ap(tp, total_gt)
        ap[thr] = ap_val
        curves[thr] = [float(v) for v in curve]
    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalReport(
        iou_thresholds=tuple(thresholds),
        ap_per_threshold=ap,
        map=mean_ap,
        ap50=ap.get(0.5),
        ap75=ap.get(0.75),
        pr_curves=curves,
        pseudo_stats=pseudo_stats,
        num_images=len(gts_per_image),
        num_gt=n_gt,
    )


def pseudo_quality(
    pseudo_per_image: list[list[Detection]],
    gts_per_image: list[np.ndarray],
    iou_thr: float = 0.5,
    hist_bins: int = 20,
) -> dict:
    """Precision/recall of pseudo boxes vs (masked) GT plus confidence stats.

    Empty pseudo sets report precision 0 by convention.
    """
    n_pseudo = 0
    n_gt = 0
    n_matched = 0
    confidences: list[float] = []
    for dets, gts in zip(pseudo_per_image, gts_per_image):
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        n_pseudo += len(dets)
        n_gt += gts.shape[0]
        confidences.extend(d.score for d in dets)
        if not dets or gts.shape[0] == 0:
            continue
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        claimed = np.zeros(gts.shape[0], dtype=bool)
        boxes = np.array([dets[i].box.as_tuple() for i in order])
        ious = pairwise_iou(boxes, gts)
        for row in ious:
            row = row.copy()
            row[claimed] = -1.0
            best = int(np.argmax(row))
            if row[best] >= iou_thr:
                claimed[best] = True
                n_matched += 1
    hist, _ = np.histogram(confidences, bins=hist_bins, range=(0.0, 1.0))
    return {
        "count": n_pseudo,
        "precision": (n_matched / n_pseudo) if n_pseudo else 0.0,
        "recall": (n_matched / n_gt) if n_gt else 0.0,
        "mean_confidence": float(np.mean(confidences)) if confidences else 0.0,
        "confidence_histogram": [int(c) for c in hist],
    }
