"""Focal classification loss, CIoU regression loss, and loss assembly.

The assembled total is ``(sup_cls + sup_reg) + lambda * (unsup_cls +
unsup_reg)``. Classification sums run over all anchors (positives plus
negatives, ignores masked out) and are normalized by the positive count
of their branch; regression sums run over positives only with the same
normalization. Unsupervised positives carry a per-box reliability
weight ``omega``: each foreground focal term is multiplied by
``1 / omega``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import Assignment, DELTA_CLAMP, encode_boxes
from .geometry import BBox

EPS_PROB = 1e-7
EPS_GEOM = 1e-9


@dataclass
class LossBreakdown:
    """Scalar loss components and the positive-sample counts behind them."""

    l_sup_cls: float
    l_sup_reg: float
    l_unsup_cls: float
    l_unsup_reg: float
    total: float
    n_label: int
    n_unlabel: int
    n_pos_fusion: int


# ------------------------------------------------------------ scalar forms


def focal_loss(pred_prob: float, is_positive: bool, gamma: float = 2.0,
               alpha: float = 0.25) -> float:
    """Focal loss for a single anchor probability."""
    p = min(max(pred_prob, EPS_PROB), 1.0 - EPS_PROB)
    if is_positive:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p ** gamma * math.log(1.0 - p)


def ciou_loss(pred: BBox, target: BBox) -> float:
    """Complete-IoU loss between two boxes (scalar form)."""
    if target.area <= 0:
        raise ValueError("target box must have positive area")
    wp = max(pred.width, EPS_GEOM)
    hp = max(pred.height, EPS_GEOM)
    ix = min(pred.x2, target.x2) - max(pred.x1, target.x1)
    iy = min(pred.y2, target.y2) - max(pred.y1, target.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = wp * hp + target.area - inter
    iou_v = inter / union if union > 0 else 0.0
    (pcx, pcy), (tcx, tcy) = pred.center, target.center
    rho2 = (pcx - tcx) ** 2 + (pcy - tcy) ** 2
    ex = max(pred.x2, target.x2) - min(pred.x1, target.x1)
    ey = max(pred.y2, target.y2) - min(pred.y1, target.y1)
    c2 = ex * ex + ey * ey + EPS_GEOM
    v = (4.0 / math.pi**2) * (
        math.atan(target.width / target.height) - math.atan(wp / hp)
    ) ** 2
    alpha = v / ((1.0 - iou_v) + v) if v > 0 else 0.0
    return 1.0 - iou_v + rho2 / c2 + alpha * v


# ------------------------------------------------------------ tensor forms


def focal_loss_sum(probs: Tensor, labels: np.ndarray, pos_weights: np.ndarray,
                   gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Weighted focal sum over a flat anchor axis.

    ``labels``: >=0 positive (index into targets), -1 negative,
    -2 ignored. ``pos_weights`` holds the per-target multiplier applied
    to each positive anchor's term (1 everywhere for supervised data).
    """
    dt = probs.data.dtype
    pos = labels >= 0
    neg = labels == -1
    w = np.zeros(labels.shape, dtype=dt)
    w[neg] = 1.0
    if pos.any():
        w[pos] = pos_weights[labels[pos]]
    p = ad.clamp(probs, EPS_PROB, 1.0 - EPS_PROB)
    pos_term = ad.mul(ad.power(ad.sub(1.0, p), gamma), ad.neg(ad.log(p)))
    neg_term = ad.mul(ad.power(p, gamma), ad.neg(ad.log(ad.sub(1.0, p))))
    mix = ad.add(
        ad.mul(pos_term, Tensor((alpha * pos).astype(dt))),
        ad.mul(neg_term, Tensor(((1.0 - alpha) * neg).astype(dt))),
    )
    return ad.tsum(ad.mul(mix, Tensor(w)))


def decoded_box_columns(deltas: Tensor, anchors: np.ndarray):
    """Differentiably decode (P, 4) deltas against constant anchors.

    Returns (x1, y1, x2, y2) column tensors of shape (P,).
    """
    dt = deltas.data.dtype
    anchors = np.asarray(anchors, dtype=dt).reshape(-1, 4)
    aw = Tensor(anchors[:, 2] - anchors[:, 0])
    ah = Tensor(anchors[:, 3] - anchors[:, 1])
    acx = Tensor(anchors[:, 0] + 0.5 * (anchors[:, 2] - anchors[:, 0]))
    acy = Tensor(anchors[:, 1] + 0.5 * (anchors[:, 3] - anchors[:, 1]))
    p = deltas.shape[0]
    dx = ad.reshape(ad.narrow(deltas, 1, 0, 1), (p,))
    dy = ad.reshape(ad.narrow(deltas, 1, 1, 1), (p,))
    dw = ad.reshape(ad.narrow(deltas, 1, 2, 1), (p,))
    dh = ad.reshape(ad.narrow(deltas, 1, 3, 1), (p,))
    cx = ad.add(acx, ad.mul(dx, aw))
    cy = ad.add(acy, ad.mul(dy, ah))
    w = ad.mul(aw, ad.exp(ad.clamp(dw, -DELTA_CLAMP, DELTA_CLAMP)))
    h = ad.mul(ah, ad.exp(ad.clamp(dh, -DELTA_CLAMP, DELTA_CLAMP)))
    half_w = ad.mul(w, 0.5)
    half_h = ad.mul(h, 0.5)
    return (
        ad.sub(cx, half_w),
        ad.sub(cy, half_h),
        ad.add(cx, half_w),
        ad.add(cy, half_h),
    )


def ciou_loss_sum(box_cols, targets: np.ndarray) -> Tensor:
    """Sum of CIoU losses between decoded box columns and fixed targets."""
    x1, y1, x2, y2 = box_cols
    dt = x1.data.dtype
    t = np.asarray(targets, dtype=dt).reshape(-1, 4)
    tx1, ty1, tx2, ty2 = (Tensor(t[:, i]) for i in range(4))
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]

    w = ad.maximum(ad.sub(x2, x1), EPS_GEOM)
    h = ad.maximum(ad.sub(y2, y1), EPS_GEOM)
    ix = ad.maximum(ad.sub(ad.minimum(x2, tx2), ad.maximum(x1, tx1)), 0.0)
    iy = ad.maximum(ad.sub(ad.minimum(y2, ty2), ad.maximum(y1, ty1)), 0.0)
    inter = ad.mul(ix, iy)
    union = ad.sub(ad.add(ad.mul(w, h), Tensor(tw * th)), inter)
    iou_v = ad.div(inter, ad.add(union, EPS_GEOM))

    cx = ad.mul(ad.add(x1, x2), 0.5)
    cy = ad.mul(ad.add(y1, y2), 0.5)
    dcx = ad.sub(cx, Tensor((t[:, 0] + t[:, 2]) * dt.type(0.5)))
    dcy = ad.sub(cy, Tensor((t[:, 1] + t[:, 3]) * dt.type(0.5)))
    rho2 = ad.add(ad.mul(dcx, dcx), ad.mul(dcy, dcy))
    ex = ad.sub(ad.maximum(x2, tx2), ad.minimum(x1, tx1))
    ey = ad.sub(ad.maximum(y2, ty2), ad.minimum(y1, ty1))
    c2 = ad.add(ad.add(ad.mul(ex, ex), ad.mul(ey, ey)), EPS_GEOM)

    ar = ad.sub(Tensor(np.arctan(tw / th).astype(dt)), ad.arctan(ad.div(w, h)))
    v = ad.mul(ad.mul(ar, ar), dt.type(4.0 / math.pi**2))
    alpha = ad.div(v, ad.add(ad.add(ad.sub(1.0, iou_v), v), EPS_GEOM))
    per_box = ad.add(
        ad.add(ad.sub(1.0, iou_v), ad.div(rho2, c2)), ad.mul(alpha, v)
    )
    return ad.tsum(per_box)


# -------------------------------------------------------------- assembly


@dataclass
class BranchTargets:
    """Loss targets for one image row of the batched dense output."""

    row: int
    cls_assign: Assignment
    cls_weights: np.ndarray  # omega per pseudo/gt box, in (0, 1]
    reg_assign: Assignment


def _row_losses(probs: Tensor, deltas: Tensor, anchors: np.ndarray,
                targets: list[BranchTargets], gamma: float, alpha: float):
    """Focal and CIoU sums plus positive counts over a list of rows."""
    dt = probs.data.dtype
    cls_terms = []
    reg_terms = []
    n_cls_pos = 0
    n_reg_pos = 0
    for t in targets:
        row_probs = ad.reshape(ad.narrow(probs, 0, t.row, 1), (probs.shape[1],))
        weights = np.asarray(t.cls_weights, dtype=np.float64)
        inv_w = np.ones_like(weights)
        np.divide(1.0, weights, out=inv_w, where=weights > 0)
        cls_terms.append(
            focal_loss_sum(row_probs, t.cls_assign.labels, inv_w.astype(dt),
                           gamma=gamma, alpha=alpha)
        )
        n_cls_pos += t.cls_assign.num_positive
        pos = t.reg_assign.positive_indices
        if pos.size:
            row_deltas = ad.reshape(
                ad.narrow(deltas, 0, t.row, 1), (deltas.shape[1], 4)
            )
            pos_deltas = ad.take(row_deltas, pos, axis=0)
            cols = decoded_box_columns(pos_deltas, anchors[pos])
            tgt = t.reg_assign.gt_boxes[t.reg_assign.labels[pos]]
            reg_terms.append(ciou_loss_sum(cols, tgt))
            n_reg_pos += pos.size
    zero = Tensor(np.zeros((), dtype=dt))
    cls_sum = cls_terms[0] if cls_terms else zero
    for term in cls_terms[1:]:
        cls_sum = ad.add(cls_sum, term)
    reg_sum = reg_terms[0] if reg_terms else zero
    for term in reg_terms[1:]:
        reg_sum = ad.add(reg_sum, term)
    return cls_sum, reg_sum, n_cls_pos, n_reg_pos


def assemble(
    probs: Tensor,
    deltas: Tensor,
    anchors: np.ndarray,
    sup: list[BranchTargets],
    unsup: list[BranchTargets],
    lam: float,
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> tuple[Tensor, LossBreakdown]:
    """Assemble the total training loss from batched dense outputs.

    ``probs`` is (N, M) sigmoid scores and ``deltas`` (N, M, 4); ``sup``
    and ``unsup`` list the batch rows of each stream with their targets.
    Returns the scalar loss tensor plus the float64 breakdown. Terms
    with zero positives contribute 0 with the denominator guarded at 1.
    """
    dt = probs.data.dtype
    sup_cls, sup_reg, n_label, _ = _row_losses(
        probs, deltas, anchors, sup, gamma, alpha
    )
    sup_cls = ad.div(sup_cls, dt.type(max(1, n_label)))
    sup_reg = ad.div(sup_reg, dt.type(max(1, n_label)))

    if lam != 0.0 and unsup:
        u_cls, u_reg, n_unlabel, n_pos_fusion = _row_losses(
            probs, deltas, anchors, unsup, gamma, alpha
        )
        u_cls = ad.div(u_cls, dt.type(max(1, n_unlabel)))
        u_reg = ad.div(u_reg, dt.type(max(1, n_pos_fusion)))
        total = ad.add(ad.add(sup_cls, sup_reg),
                       ad.mul(ad.add(u_cls, u_reg), dt.type(lam)))
        lu_cls, lu_reg = u_cls.item(), u_reg.item()
    else:
        n_unlabel = n_pos_fusion = 0
        lu_cls = lu_reg = 0.0
        total = ad.add(sup_cls, sup_reg)

    ls_cls, ls_reg = sup_cls.item(), sup_reg.item()
    breakdown = LossBreakdown(
        l_sup_cls=ls_cls,
        l_sup_reg=ls_reg,
        l_unsup_cls=lu_cls,
        l_unsup_reg=lu_reg,
        total=(ls_cls + ls_reg) + lam * (lu_cls + lu_reg),
        n_label=n_label,
        n_unlabel=n_unlabel,
        n_pos_fusion=n_pos_fusion,
    )
    return total, breakdown


def regression_targets(anchors: np.ndarray, assign: Assignment) -> np.ndarray:
    """Encoded (dx, dy, dw, dh) for each positive anchor (test helper)."""
    pos = assign.positive_indices
    return encode_boxes(anchors[pos], assign.gt_boxes[assign.labels[pos]])
