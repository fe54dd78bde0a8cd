"""Scalar loss functions with fused backward rules."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, record

BCE_EPS = 1e-7


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} != {b.shape}")


def bce(pred_prob: Tensor, target, weight=None) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [eps, 1-eps]."""
    target = as_tensor(target, like=pred_prob)
    _same_shape(pred_prob, target, "bce")
    p = pred_prob.data
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    y = target.data
    n = p.size
    val = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)

    def bw(g):
        gp = g * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n * inside
        return (gp.astype(p.dtype, copy=False), None)

    return record(np.asarray(val, dtype=p.dtype), (pred_prob, target), bw, "bce")


def smooth_l1(pred: Tensor, target, mask=None) -> Tensor:
    """Huber loss with unit transition, averaged over the selected elements.

    ``mask`` (broadcastable to ``pred``) selects the elements that count; the
    mean is taken over the selected elements only. An empty selection gives 0.
    """
    target = as_tensor(target, like=pred)
    _same_shape(pred, target, "smooth_l1")
    d = pred.data - target.data
    ad = np.abs(d)
    elem = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    if mask is None:
        m = np.ones_like(d)
    else:
        m = np.broadcast_to(np.asarray(getattr(mask, "data", mask), dtype=d.dtype), d.shape)
    count = float(m.sum())
    if count == 0:
        val = np.zeros((), dtype=d.dtype)
    else:
        val = np.asarray((elem * m).sum() / count, dtype=d.dtype)

    def bw(g):
        if count == 0:
            return (np.zeros_like(d), None)
        gd = np.where(ad < 1.0, d, np.sign(d)) * m / count
        return ((g * gd).astype(d.dtype, copy=False), None)

    return record(val, (pred, target), bw, "smooth_l1")


def _log_softmax0(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def kl_channelwise(student: Tensor, teacher: Tensor) -> Tensor:
    """Sum over cells of KL(softmax_c(student) || softmax_c(teacher)).

    Both inputs are ``[C,H,W]``; the softmax runs over the channel axis at
    every cell and the per-cell divergences are summed, not averaged.
    """
    _same_shape(student, teacher, "kl_channelwise")
    if student.ndim != 3:
        raise DimensionError(f"kl_channelwise expects [C,H,W], got {student.shape}")
    ls = _log_softmax0(student.data)
    lt = _log_softmax0(teacher.data)
    ps = np.exp(ls)
    diff = ls - lt
    val = np.asarray(max((ps * diff).sum(), 0.0), dtype=student.dtype)

    def bw(g):
        gs = gt = None
        if student.requires_grad:
            # d/ds_k sum_c p_c (log p_c - log q_c) = p_k (diff_k - sum_c p_c diff_c)
            per_cell = (ps * diff).sum(axis=0, keepdims=True)
            gs = g * ps * (diff - per_cell)
        if teacher.requires_grad:
            pt = np.exp(lt)
            gt = g * (pt - ps)
        return gs, gt

    return record(val, (student, teacher), bw, "kl_channelwise")
