"""Training objectives and their gradients with respect to logits.

Reductions follow two regimes:

* ``batchmean``: sum over the batch and classes, divided by B (softmax CE, KL);
* ``mean``: the same sum divided by B * n_cls (multi-label BCE, and the KL
  paired with it so both terms keep comparable magnitudes).

Peer predictions in mutual terms are constants; only the model's own logits
receive gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_FLOOR = 1e-7
NORMALIZATIONS = ("batchmean", "mean")


@dataclass
class LossReport:
    total: float
    ce_or_bce: float
    kl: float = 0.0
    distill: float = 0.0
    normalization: str = "batchmean"

    def as_dict(self) -> dict:
        return {"loss": self.total, "task": self.ce_or_bce, "kl": self.kl,
                "distill": self.distill, "normalization": self.normalization}


def _batch(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 1 else a


def _divisor(arr2d, normalization):
    if normalization == "batchmean":
        return arr2d.shape[0]
    if normalization == "mean":
        return arr2d.shape[0] * arr2d.shape[1]
    raise ValueError(f"unknown normalization {normalization!r}")


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis, floored at ``EPS_FLOOR`` and renormalised."""
    l = np.asarray(logits, dtype=np.float64)
    z = np.exp(l - l.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)
    p = np.maximum(p, EPS_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def sigmoid(logits) -> np.ndarray:
    l = np.asarray(logits, dtype=np.float64)
    e = np.exp(-np.abs(l))
    return np.where(l >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def cross_entropy(probs, labels, normalization: str = "batchmean") -> float:
    p = _batch(probs)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != p.shape[0]:
        raise ValueError("one label per prediction required")
    if np.any(y < 0) or np.any(y >= p.shape[1]) or np.any(y != np.round(y)):
        raise ValueError(f"labels must be integers in [0, {p.shape[1]})")
    y = y.astype(np.intp)
    return float(-np.log(p[np.arange(len(y)), y]).sum() / _divisor(p, normalization))


def kl_divergence(target, pred, normalization: str = "batchmean") -> float:
    """sum_n target_n * log(target_n / pred_n), reduced per ``normalization``."""
    t = _batch(target)
    q = _batch(pred)
    if t.shape != q.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {q.shape}")
    return float((t * (np.log(t) - np.log(q))).sum() / _divisor(t, normalization))


def mutual_loss(p_self, p_peers, labels, normalization: str = "batchmean") -> LossReport:
    """CE against the labels plus KL from the mean peer prediction to ``p_self``."""
    if len(p_peers) == 0:
        raise ValueError("mutual loss needs at least one peer")
    target = _peer_mean(p_peers)
    ce = cross_entropy(p_self, labels, normalization)
    kl = kl_divergence(target, p_self, normalization)
    return LossReport(total=ce + kl, ce_or_bce=ce, kl=kl, normalization=normalization)


def _peer_mean(peers):
    if len(peers) == 1:
        return _batch(peers[0])
    return sum(_batch(p) for p in peers) / len(peers)


def multilabel_bce(logits, label_vec, normalization: str = "mean") -> float:
    l = _batch(logits)
    y = _batch(label_vec)
    if l.shape != y.shape:
        raise ValueError(f"shape mismatch {l.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("multi-label targets must be 0/1")
    # -[y log s(l) + (1-y) log(1-s(l))] = max(l,0) - l*y + log(1+exp(-|l|))
    terms = np.maximum(l, 0) - l * y + np.log1p(np.exp(-np.abs(l)))
    return float(terms.sum() / _divisor(l, normalization))


def bernoulli_kl(target, pred, normalization: str = "mean") -> float:
    """Per-class Bernoulli KL(target || pred) on sigmoid scores."""
    t = np.clip(_batch(target), EPS_FLOOR, 1 - EPS_FLOOR)
    q = np.clip(_batch(pred), EPS_FLOOR, 1 - EPS_FLOOR)
    terms = t * (np.log(t) - np.log(q)) + (1 - t) * (np.log1p(-t) - np.log1p(-q))
    return float(terms.sum() / _divisor(t, normalization))


def multilabel_mutual_loss(logits_self, peer_scores, label_vec, normalization: str = "mean") -> LossReport:
    if len(peer_scores) == 0:
        raise ValueError("mutual loss needs at least one peer")
    bce = multilabel_bce(logits_self, label_vec, normalization)
    kl = bernoulli_kl(_peer_mean(peer_scores), sigmoid(logits_self), normalization)
    return LossReport(total=bce + kl, ce_or_bce=bce, kl=kl, normalization=normalization)


def _l2_distill(a, b, weight, n_cls_divide, n_cls):
    a = _batch(a)
    b = _batch(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    val = weight * ((a - b) ** 2).sum() / a.shape[0]
    if n_cls_divide:
        if not n_cls:
            raise ValueError("n_cls required when n_cls_divide is set")
        val /= n_cls
    return float(val)


def mars_loss(features_self, features_teacher, weight: float = 50.0, n_cls_divide: bool = False,
              n_cls: int | None = None) -> float:
    """weight * ||f_self - f_teacher||^2 / B (further / n_cls when requested)."""
    return _l2_distill(features_self, features_teacher, weight, n_cls_divide, n_cls)


def d3d_loss(logits_self, logits_teacher, weight: float = 1.0, n_cls_divide: bool = False) -> float:
    l = _batch(logits_self)
    return _l2_distill(l, logits_teacher, weight, n_cls_divide, l.shape[1])


# --------------------------------------------------------------------------- gradients

def _ce_kl_grad(logits, labels, target, normalization, kl_weight=1.0):
    # d/dl CE = p - y ; d/dl KL(target || softmax(l)) = p - target   (per row, before reduction)
    p = softmax(logits)
    p2 = _batch(p)
    g = p2.copy()
    y = np.atleast_1d(labels).astype(np.intp)
    g[np.arange(len(y)), y] -= 1.0
    if target is not None:
        g += kl_weight * (p2 - target)
    return g / _divisor(p2, normalization)


def cross_entropy_grad(logits, labels, normalization: str = "batchmean") -> np.ndarray:
    return _ce_kl_grad(logits, labels, None, normalization)


def kl_grad(target, logits, normalization: str = "batchmean") -> np.ndarray:
    """Gradient of ``kl_divergence(target, softmax(logits))`` w.r.t. logits."""
    p = _batch(softmax(logits))
    return (p - _batch(target)) / _divisor(p, normalization)


def multilabel_bce_grad(logits, label_vec, normalization: str = "mean") -> np.ndarray:
    l = _batch(logits)
    return (sigmoid(l) - _batch(label_vec)) / _divisor(l, normalization)


def bernoulli_kl_grad(target, logits, normalization: str = "mean") -> np.ndarray:
    """Gradient of ``bernoulli_kl(target, sigmoid(logits))`` w.r.t. logits (unclipped regime)."""
    l = _batch(logits)
    return (sigmoid(l) - _batch(target)) / _divisor(l, normalization)


def l2_grad(a, b, weight, n_cls_divide=False, n_cls=None) -> np.ndarray:
    """Gradient of ``weight * ||a - b||^2 / B`` (/ n_cls) w.r.t. ``a``."""
    a = _batch(a)
    g = 2.0 * weight * (a - _batch(b)) / a.shape[0]
    if n_cls_divide:
        g /= n_cls
    return g


# --------------------------------------------------------------------------- combined objectives

def task_objective(logits, labels, head: str, peer_preds=None, normalization: str | None = None):
    """Task loss (CE or BCE) plus the mutual term when ``peer_preds`` is non-empty.

    Returns ``(LossReport, grad_logits)``; ``labels`` are class indices for the
    softmax head and multi-hot vectors for the sigmoid head.
    """
    peers = list(peer_preds or [])
    if head == "softmax":
        norm = normalization or "batchmean"
        p = softmax(logits)
        if peers:
            rep = mutual_loss(p, peers, labels, norm)
            grad = _ce_kl_grad(logits, labels, _peer_mean(peers), norm)
        else:
            ce = cross_entropy(p, labels, norm)
            rep = LossReport(total=ce, ce_or_bce=ce, normalization=norm)
            grad = cross_entropy_grad(logits, labels, norm)
        return rep, grad
    if head == "sigmoid":
        norm = normalization or "mean"
        if peers:
            rep = multilabel_mutual_loss(logits, peers, labels, norm)
            grad = multilabel_bce_grad(logits, labels, norm) + bernoulli_kl_grad(_peer_mean(peers), logits, norm)
        else:
            bce = multilabel_bce(logits, labels, norm)
            rep = LossReport(total=bce, ce_or_bce=bce, normalization=norm)
            grad = multilabel_bce_grad(logits, labels, norm)
        return rep, grad
    raise ValueError(f"unknown head {head!r}")


def predictions(logits, head: str) -> np.ndarray:
    return softmax(logits) if head == "softmax" else sigmoid(logits)
