"""Teacher-output post-processing into two pseudo-label branches.

Teacher detections are confidence-filtered once; the survivors feed the
classification branch with a reliability weight omega (a sine-shaped
transform of the teacher score that pulls near-threshold confidences
down) and, separately, the regression branch after a greedy merge of
boxes whose center-distance similarity falls below a threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import ViewTransform, map_boxes_keep
from .geometry import BBox, Detection, union_box


@dataclass
class PseudoConfig:
    sigma: float = 0.5  # confidence threshold
    mu: float = 0.05  # fusion similarity threshold
    r_i: float = 0.7  # reweighting pivot
    adso_enabled: bool = True
    fusion_enabled: bool = True


@dataclass
class PseudoLabelSet:
    """Filtered teacher detections split per training branch.

    ``cls_branch`` pairs each retained detection with its weight omega;
    ``reg_branch`` holds the merged regression targets. Both are in
    student-view coordinates once produced by :func:`build_pseudo_set`.
    """

    cls_branch: list[tuple[Detection, float]]
    reg_branch: list[BBox]
    sigma: float
    mu: float
    r_i: float
    reg_fused_flags: list[bool] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "mu": self.mu,
            "r_i": self.r_i,
            "cls_branch": [
                {
                    "box": list(det.box.as_tuple()),
                    "score": det.score,
                    "class_id": det.class_id,
                    "weight": w,
                }
                for det, w in self.cls_branch
            ],
            "reg_branch": [
                {"box": list(b.as_tuple()), "fused": bool(f)}
                for b, f in zip(self.reg_branch, self.reg_fused_flags)
            ],
        }


def confidence_filter(dets: list[Detection], sigma: float) -> list[Detection]:
    """Keep detections scoring at or above sigma, preserving order."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma {sigma} outside (0, 1)")
    return [d for d in dets if d.score >= sigma]


def adso(x: float, r_i: float = 0.7) -> float:
    """Reliability weight for a teacher confidence score.

    Below the pivot ``r_i`` the score is pulled down along a quarter
    sine; at or above it the score passes through unchanged. Continuous
    and non-decreasing on (0, 1).
    """
    if not 0.0 < r_i < 1.0:
        raise ValueError(f"r_i {r_i} outside (0, 1)")
    if not 0.0 < x <= 1.0:
        raise ValueError(f"score {x} outside (0, 1]")
    if x < r_i:
        return r_i * math.sin((math.pi / 2.0) * (x - r_i) / r_i) + r_i
    return x


def fusion_similarity(a: BBox, b: BBox, view: ViewTransform) -> float:
    """Squared center distance over the sum of the view dimensions."""
    if view.scaled_w <= 0 or view.scaled_h <= 0:
        raise ValueError(f"bad view dimensions {view.scaled_w}x{view.scaled_h}")
    (ax, ay), (bx, by) = a.center, b.center
    return ((ax - bx) ** 2 + (ay - by) ** 2) / (view.scaled_w + view.scaled_h)


def _center_similarity(ca, cb, denom: float) -> float:
    return ((ca[0] - cb[0]) ** 2 + (ca[1] - cb[1]) ** 2) / denom


def fusion_box_detailed(
    dets: list[Detection], mu: float, view: ViewTransform
) -> tuple[list[Detection], list[bool]]:
    """Single forward greedy merge pass; returns survivors + fused flags.

    For each live box m in input order, any other live box n whose
    center-distance similarity to the current (post-union) box m falls
    below ``mu`` is absorbed: m becomes the union and n dies. A merged
    box takes the maximum constituent score. Lists of length <= 1 pass
    through untouched.
    """
    if mu <= 0:
        raise ValueError(f"mu {mu} must be positive")
    n = len(dets)
    if n <= 1:
        return list(dets), [False] * n
    denom = float(view.scaled_w + view.scaled_h)
    boxes = [d.box for d in dets]
    scores = [d.score for d in dets]
    centers = [b.center for b in boxes]
    alive = [True] * n
    fused = [False] * n
    for m in range(n):
        if not alive[m]:
            continue
        for k in range(n):
            if k == m or not alive[k]:
                continue
            if _center_similarity(centers[m], centers[k], denom) < mu:
                boxes[m] = union_box(boxes[m], boxes[k])
                centers[m] = boxes[m].center
                scores[m] = max(scores[m], scores[k])
                alive[k] = False
                fused[m] = True
    out = [
        Detection(boxes[i], scores[i], dets[i].class_id)
        for i in range(n)
        if alive[i]
    ]
    flags = [fused[i] for i in range(n) if alive[i]]
    return out, flags


def fusion_box(dets: list[Detection], mu: float, view: ViewTransform) -> list[BBox]:
    """Merged regression-branch boxes (see :func:`fusion_box_detailed`)."""
    merged, _ = fusion_box_detailed(dets, mu, view)
    return [d.box for d in merged]


def build_pseudo_set(
    teacher_dets: list[Detection],
    teacher_view: ViewTransform,
    student_view: ViewTransform,
    cfg: PseudoConfig,
) -> PseudoLabelSet:
    """Filter, weight, fuse, and remap teacher detections.

    Filtering, weighting and fusion happen in teacher-view coordinates;
    both branches are then mapped onto the student view (dropping boxes
    that leave the view or collapse below the minimum area).
    """
    kept = confidence_filter(teacher_dets, cfg.sigma)

    weights = [
        adso(d.score, cfg.r_i) if cfg.adso_enabled else 1.0 for d in kept
    ]
    if cfg.fusion_enabled:
        merged, flags = fusion_box_detailed(kept, cfg.mu, teacher_view)
    else:
        merged, flags = list(kept), [False] * len(kept)

    cls_branch: list[tuple[Detection, float]] = []
    if kept:
        arr = np.array([d.box.as_tuple() for d in kept], dtype=np.float64)
        mapped, keep_idx = map_boxes_keep(arr, teacher_view, student_view)
        for row, i in zip(mapped, keep_idx):
            det = kept[i]
            cls_branch.append(
                (Detection(BBox(*map(float, row)), det.score, det.class_id),
                 weights[i])
            )

    reg_branch: list[BBox] = []
    reg_flags: list[bool] = []
    if merged:
        arr = np.array([d.box.as_tuple() for d in merged], dtype=np.float64)
        mapped, keep_idx = map_boxes_keep(arr, teacher_view, student_view)
        for row, i in zip(mapped, keep_idx):
            reg_branch.append(BBox(*map(float, row)))
            reg_flags.append(flags[i])

    return PseudoLabelSet(
        cls_branch=cls_branch,
        reg_branch=reg_branch,
        sigma=cfg.sigma,
        mu=cfg.mu,
        r_i=cfg.r_i,
        reg_fused_flags=reg_flags,
    )
