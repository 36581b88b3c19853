"""Validation metrics, multi-clip test-time averaging and ensembles."""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses, net
from .sampling import test_sample

log = logging.getLogger(__name__)


@dataclass
class PredictionBatch:
    scores: np.ndarray  # [items, n_cls]
    labels: np.ndarray | None = None  # [items] class indices
    label_vecs: np.ndarray | None = None  # [items, n_cls] multi-hot
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        target = self.labels if self.labels is not None else self.label_vecs
        if target is None:
            raise ValueError("prediction batch needs labels or label_vecs")
        if len(target) != len(self.scores):
            raise ValueError("row count does not match labels")
        if self.item_ids is None:
            self.item_ids = np.arange(len(self.scores))


def top_k_accuracy(preds: PredictionBatch, k: int) -> float:
    """Fraction of items whose label is among the ``k`` best scores.

    Ties are broken in favour of the lower class index.
    """
    if preds.labels is None:
        raise ValueError("top-k needs single-label targets")
    n_cls = preds.scores.shape[1]
    if not 1 <= k <= n_cls:
        raise ValueError(f"k must be in [1, {n_cls}]")
    order = np.argsort(-preds.scores, axis=1, kind="stable")[:, :k]
    hits = (order == np.asarray(preds.labels)[:, None]).any(axis=1)
    return float(hits.mean())


def average_precision(scores, positives) -> float:
    """Mean of precision@rank over the ranks of the positives (ties: lower item index first)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives) > 0
    if not pos.any():
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, len(ranks) + 1) / ranks).mean())


def mean_average_precision(preds: PredictionBatch, return_excluded: bool = False):
    """mAP over classes that have at least one positive; the rest are skipped and logged."""
    if preds.label_vecs is None:
        raise ValueError("mAP needs multi-label targets")
    y = np.asarray(preds.label_vecs)
    if not (y > 0).any():
        raise ValueError("batch has no positives at all")
    aps, excluded = [], []
    for c in range(y.shape[1]):
        if not (y[:, c] > 0).any():
            excluded.append(c)
            continue
        aps.append(average_precision(preds.scores[:, c], y[:, c]))
    if excluded:
        log.info("mAP: excluded classes without positives: %s", excluded)
    m = float(np.mean(aps))
    return (m, excluded) if return_excluded else m


def ensemble_predict(member_outputs, renormalize: bool = True) -> np.ndarray:
    """Unweighted mean of member predictions (probability space)."""
    outs = [np.asarray(o, dtype=np.float64) for o in member_outputs]
    if not outs:
        raise ValueError("ensemble needs at least one member")
    if any(o.shape != outs[0].shape for o in outs):
        raise ValueError("members disagree on prediction shape")
    mean = sum(outs) / len(outs)
    if renormalize:
        mean = mean / mean.sum(axis=-1, keepdims=True)
    return mean


# --------------------------------------------------------------------------- model predictions

def multiclip_predict(weights, model_spec, store, modality: str, sampling, k: int | None = None,
                      m: int | None = None, items=None, chunk: int = 64) -> np.ndarray:
    """Average post-activation predictions over the ``k + m`` deterministic test clips.

    ``store`` is a ``ClipStore``; ``sampling`` provides ``n_in`` and ``tau``
    (and ``test_k``/``test_m`` unless ``k``/``m`` are given). Returns
    ``[items, n_cls]``.
    """
    k = sampling.test_k if k is None else k
    m = sampling.test_m if m is None else m
    items = np.arange(store.n) if items is None else np.asarray(items)
    index_sets = test_sample(store.length(modality), sampling.n_in, sampling.tau, k, m)
    total = np.zeros((len(items), model_spec.n_cls))
    for idx in index_sets:
        for s in range(0, len(items), chunk):
            sel = items[s:s + chunk]
            x = store.batch(modality, sel, np.broadcast_to(idx, (len(sel), len(idx))))
            logits, _ = net.forward(weights, model_spec, x, training=False)
            total[s:s + chunk] += losses.predictions(logits, model_spec.head)
    out = total / len(index_sets)
    if model_spec.head == "softmax":
        out /= out.sum(axis=1, keepdims=True)
    return out


def count_forward_clips(sampling, k=None, m=None) -> int:
    k = sampling.test_k if k is None else k
    m = sampling.test_m if m is None else m
    return k + m


def prediction_batch(scores, store) -> PredictionBatch:
    if store.labels is not None:
        return PredictionBatch(scores, labels=store.labels, item_ids=store.clip_ids)
    return PredictionBatch(scores, label_vecs=store.label_vecs, item_ids=store.clip_ids)


def metrics(preds: PredictionBatch) -> dict[str, float]:
    if preds.labels is not None:
        n_cls = preds.scores.shape[1]
        return {"top1": top_k_accuracy(preds, 1), "top5": top_k_accuracy(preds, min(5, n_cls))}
    return {"mAP": mean_average_precision(preds)}


def primary_metric(metric_dict: dict) -> float:
    return metric_dict["top1"] if "top1" in metric_dict else metric_dict["mAP"]


# --------------------------------------------------------------------------- reports

def write_report(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def ensemble_grid(member_scores: dict[str, np.ndarray], store) -> list[dict]:
    """Metrics of every single member and every pair of members."""
    rows = []
    names = list(member_scores)
    for r in (1, 2):
        for combo in itertools.combinations(names, r):
            scores = ensemble_predict([member_scores[n] for n in combo],
                                      renormalize=store.labels is not None)
            rows.append({"members": "+".join(combo), **metrics(prediction_batch(scores, store))})
    return rows


def write_grid_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
