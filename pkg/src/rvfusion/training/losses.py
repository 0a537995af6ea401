"""Detection losses as fused autograd ops with hand-derived backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor_core import Tensor, add, concat, mul, reshape, take, transpose
from .targets import TargetMap


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-_softplus(-x))


def focal_loss(logits: Tensor, labels, alpha: float | None = 0.25, gamma: float = 2.0,
               normalizer: float | None = None) -> Tensor:
    """Sigmoid focal loss summed over rows and classes, divided by N_pos.

    ``logits`` is (M, C); ``labels`` is (M,) with 0 for background and k in
    1..C for class k. ``alpha=None`` disables class balancing.
    """
    x = logits.data
    m, c = x.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(m)
    onehot = np.zeros((m, c), dtype=bool)
    fg = labels > 0
    onehot[np.flatnonzero(fg), labels[fg] - 1] = True
    if normalizer is None:
        normalizer = max(float(fg.sum()), 1.0)

    p = _sigmoid(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    a_pos = 1.0 if alpha is None else alpha
    a_neg = 1.0 if alpha is None else 1.0 - alpha
    pos_term = -a_pos * (1 - p) ** gamma * log_p
    neg_term = -a_neg * p ** gamma * log_q
    value = np.where(onehot, pos_term, neg_term).sum() / normalizer

    def backward(g):
        d_pos = a_pos * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        d_neg = a_neg * p ** gamma * (p - gamma * (1 - p) * log_q)
        return ((g / normalizer) * np.where(onehot, d_pos, d_neg).astype(x.dtype),)

    return Tensor._from_op(np.asarray(value, dtype=x.dtype), (logits,), backward)


def giou_terms(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """GIoU of ltrb distance pairs sharing an anchor point, shape (P,)."""
    pl, pt, pr, pb = pred.T
    tl, tt, tr, tb = target.T
    inter = (np.minimum(pl, tl) + np.minimum(pr, tr)) * (np.minimum(pt, tt) + np.minimum(pb, tb))
    union = (pl + pr) * (pt + pb) + (tl + tr) * (tt + tb) - inter
    encl = (np.maximum(pl, tl) + np.maximum(pr, tr)) * (np.maximum(pt, tt) + np.maximum(pb, tb))
    return inter / union - (encl - union) / encl


def box_giou(a, b) -> float:
    """GIoU of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    encl = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (encl - union) / encl


def giou_loss(pred: Tensor, target, weights=None, normalizer: float | None = None) -> Tensor:
    """Weighted sum of (1 - GIoU) over rows divided by ``normalizer``.

    Defaults: unit weights, normalizer = sum of weights (i.e. a weighted mean).
    """
    pd = pred.data
    td = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    n = len(td)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    if normalizer is None:
        normalizer = float(w.sum()) if n else 1.0
    normalizer = max(normalizer, 1e-12)
    if n == 0:
        return Tensor._from_op(np.asarray(0.0, dtype=pd.dtype), (pred,), lambda g: (np.zeros_like(pd),))

    p = pd.astype(np.float64)
    pl, pt, pr, pb = p.T
    tl, tt, tr, tb = td.T
    iw = np.minimum(pl, tl) + np.minimum(pr, tr)
    ih = np.minimum(pt, tt) + np.minimum(pb, tb)
    inter = iw * ih
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    union = area_p + area_t - inter
    ew = np.maximum(pl, tl) + np.maximum(pr, tr)
    eh = np.maximum(pt, tt) + np.maximum(pb, tb)
    encl = ew * eh
    giou = inter / union + union / encl - 1.0
    value = float((w * (1.0 - giou)).sum()) / normalizer

    def backward(g):
        # giou = I/U + U/E - 1 with U = Ap + At - I
        d_u = -inter / union ** 2 + 1.0 / encl
        d_i = 1.0 / union - d_u
        d_e = -union / encl ** 2
        d_ap = d_u
        # subgradients at ties: min picks the prediction, max picks the target
        take_l, take_r = pl <= tl, pr <= tr
        take_t, take_b = pt <= tt, pb <= tb
        dg = np.empty_like(p)
        dg[:, 0] = d_i * ih * take_l + d_ap * (pt + pb) + d_e * eh * ~take_l
        dg[:, 2] = d_i * ih * take_r + d_ap * (pt + pb) + d_e * eh * ~take_r
        dg[:, 1] = d_i * iw * take_t + d_ap * (pl + pr) + d_e * ew * ~take_t
        dg[:, 3] = d_i * iw * take_b + d_ap * (pl + pr) + d_e * ew * ~take_b
        scale = -(g * w / normalizer)[:, None]
        return ((scale * dg).astype(pd.dtype),)

    return Tensor._from_op(np.asarray(value, dtype=pd.dtype), (pred,), backward)


def bce_with_logits(logits: Tensor, targets, normalizer: float = 1.0) -> Tensor:
    """Binary cross entropy on logits, summed and divided by ``normalizer``."""
    x = logits.data
    y = np.asarray(targets, dtype=np.float64).reshape(x.shape)
    xf = x.astype(np.float64)
    value = float((_softplus(xf) - xf * y).sum()) / normalizer

    def backward(g):
        return (((g / normalizer) * (_sigmoid(xf) - y)).astype(x.dtype),)

    return Tensor._from_op(np.asarray(value, dtype=x.dtype), (logits,), backward)


def centerness_loss(logits: Tensor, targets, pos_mask) -> Tensor:
    """BCE on positive locations only, divided by N_pos (0 when none)."""
    pos_mask = np.asarray(pos_mask, dtype=bool).reshape(-1)
    flat = reshape(logits, (-1,))
    idx = np.flatnonzero(pos_mask)
    n_pos = max(len(idx), 1)
    sel = take(flat, idx, axis=0)
    tg = np.asarray(targets, dtype=np.float64).reshape(-1)
    tg = tg[idx] if tg.shape[0] == pos_mask.shape[0] else tg
    return bce_with_logits(sel, tg, normalizer=float(n_pos))


# -- composite ------------------------------------------------------------------------------

@dataclass
class LossConfig:
    lambda_reg: float = 1.0
    focal_alpha: float | None = 0.25
    focal_gamma: float = 2.0
    use_centerness: bool = True
    reg_weighting: str = "centerness"   # or "uniform" (plain 1/N_pos)


def flatten_head(levels: list) -> Tensor:
    """List of (N, K, H, W) tensors -> (N * L, K) rows ordered image-major, level, row-major."""
    n, k = levels[0].shape[:2]
    parts = [reshape(t, (n, k, -1)) for t in levels]
    cat = concat(parts, axis=2) if len(parts) > 1 else parts[0]
    return reshape(transpose(cat, (0, 2, 1)), (-1, k))


def total_loss(head, targets: list, cfg: LossConfig | None = None):
    """Composite detection loss over a batch.

    ``targets`` holds one :class:`TargetMap` per image. Returns the scalar loss
    tensor and a breakdown dict of floats (total, cls, reg, centerness, num_pos).
    """
    cfg = cfg or LossConfig()
    cls_rows = flatten_head(head.cls_logits)
    reg_rows = flatten_head(head.reg)
    ctr_rows = flatten_head(head.centerness)

    flats = [t.flat() if isinstance(t, TargetMap) else t for t in targets]
    labels = np.concatenate([f[0] for f in flats])
    reg_t = np.concatenate([f[1] for f in flats])
    ctr_t = np.concatenate([f[2] for f in flats])
    pos = np.concatenate([f[3] for f in flats])
    if labels.shape[0] != cls_rows.shape[0]:
        raise ValueError(f"targets cover {labels.shape[0]} locations but head has {cls_rows.shape[0]}")
    n_pos = int(pos.sum())
    norm = float(max(n_pos, 1))

    l_cls = focal_loss(cls_rows, labels, cfg.focal_alpha, cfg.focal_gamma, normalizer=norm)
    idx = np.flatnonzero(pos)
    pred_pos = take(reg_rows, idx, axis=0)
    if cfg.reg_weighting == "centerness":
        l_reg = giou_loss(pred_pos, reg_t[idx], weights=ctr_t[idx])
    elif cfg.reg_weighting == "uniform":
        l_reg = giou_loss(pred_pos, reg_t[idx], normalizer=norm)
    else:
        raise ValueError(f"unknown reg_weighting {cfg.reg_weighting!r}")
    total = add(l_cls, mul(l_reg, cfg.lambda_reg))
    l_ctr = None
    if cfg.use_centerness:
        l_ctr = centerness_loss(ctr_rows, ctr_t, pos)
        total = add(total, l_ctr)
    breakdown = {
        "total": float(total.data),
        "cls": float(l_cls.data),
        "reg": float(l_reg.data),
        "centerness": float(l_ctr.data) if l_ctr is not None else 0.0,
        "num_pos": n_pos,
    }
    return total, breakdown
