"""SGD training loops: single model, mutual learning over M models, distillation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate, io, losses, net
from .sampling import SamplingSpec, draw_offset, train_sample

log = logging.getLogger(__name__)

METHODS = ("solo", "mutual", "mars", "d3d")


class NumericalAbort(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = (20, 25)
    lr_factor: float = 0.1
    seed: int = 0
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    val_k: int = 0
    val_m: int = 1
    method: str = "solo"
    mars_weight: float = 50.0
    d3d_weight: float = 1.0

    def __post_init__(self):
        if isinstance(self.sampling, dict):
            self.sampling = SamplingSpec(**self.sampling)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.val_k < 0 or self.val_m < 0 or self.val_k + self.val_m < 1:
            raise ValueError("validation needs at least one clip")
        self.sampling.validate()

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_factor ** sum(epoch >= m for m in self.milestones)

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d["sampling"] = SamplingSpec(**d["sampling"])
        d.update(kw)
        return TrainConfig(**d)


def sgd_step(weights: dict, grads: dict, state: dict, lr: float, momentum: float, weight_decay: float):
    """``v <- momentum*v + g + wd*w``; ``w <- w - lr*v`` for every tensor that has a gradient.

    Returns new ``(weights, state)`` dicts; the inputs are left untouched.
    """
    new_w = dict(weights)
    new_s = dict(state)
    for name, g in grads.items():
        w = weights[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        v = state.get(name)
        v = (g + weight_decay * w) if v is None else (momentum * v + g + weight_decay * w)
        new_s[name] = v.astype(w.dtype)
        new_w[name] = (w - lr * v).astype(w.dtype)
    return new_w, new_s


@dataclass
class Member:
    weights: dict
    spec: net.ModelSpec
    modality: str
    name: str = ""
    frozen: bool = False


@dataclass
class TrainResult:
    name: str
    modality: str
    spec: net.ModelSpec
    weights: dict  # after the last epoch
    best_weights: dict
    best_epoch: int
    best_metric: float
    log: list = field(default_factory=list)


def _clip_positions(rng, spec: SamplingSpec, lengths: list[int], n_clips: int):
    """Per-member position arrays [B, n_in]: one base draw per clip on the shortest
    modality, shifted by one shared offset for the longer ones."""
    n_short, n_long = min(lengths), max(lengths)
    base = np.stack([train_sample(spec, n_short, rng) for _ in range(n_clips)])
    xi = np.array([draw_offset(n_short, n_long, rng) for _ in range(n_clips)])[:, None]
    out = []
    for L in lengths:
        if L == n_short:
            out.append(base)
        elif L == n_long:
            out.append(base + xi)
        else:
            raise ValueError("at most two distinct modality lengths are supported")
    return out


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NumericalAbort(f"non-finite {name}")


def fit(members: list[Member], data, config: TrainConfig, teacher: Member | None = None,
        method: str | None = None, log_fn=None) -> list[TrainResult]:
    """Train ``members`` jointly on ``data`` (a ``Dataset``).

    ``method``: ``solo`` (each member on its task loss alone), ``mutual`` (task
    loss + KL to the mean of the other members' predictions), ``mars``/``d3d``
    (task loss + l2 match to a frozen ``teacher``). All members are updated
    simultaneously from the same batch.
    """
    method = method or config.method
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "mutual" and len(members) < 2:
        raise ValueError("mutual learning needs at least two models")
    if method in ("mars", "d3d") and teacher is None:
        raise ValueError(f"{method} needs a teacher")
    if method == "mutual":
        _reject_degenerate_pairs(members)
    head = members[0].spec.head
    multilabel = head == "sigmoid"
    train, val = data.train, data.val
    everyone = members + ([teacher] if teacher is not None else [])
    lengths = [train.length(m.modality) for m in everyone]
    for m in everyone:
        net.validate_weights(m.weights, m.spec)
    if method == "mars" and teacher.spec.feature_dim != members[0].spec.feature_dim:
        raise ValueError("MARS needs equal feature dimensions for student and teacher")

    rng = np.random.default_rng(config.seed)
    weights = [net.copy_weights(m.weights) for m in members]
    states = [{} for _ in members]
    results = [TrainResult(name=m.name or f"model{i}", modality=m.modality, spec=m.spec,
                           weights=weights[i], best_weights=net.copy_weights(weights[i]),
                           best_epoch=-1, best_metric=-np.inf) for i, m in enumerate(members)]
    val_sampling = config.sampling

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(train.n)
        sums = [dict(loss=0.0, task=0.0, kl=0.0, distill=0.0) for _ in members]
        n_batches = 0
        for start in range(0, train.n, config.batch_size):
            items = order[start:start + config.batch_size]
            positions = _clip_positions(rng, config.sampling, lengths, len(items))
            targets = train.targets(items)
            outs = []
            for i, m in enumerate(members):
                x = train.batch(m.modality, items, positions[i])
                logits, feats, cache = net.forward(weights[i], m.spec, x, training=not m.frozen,
                                                   return_cache=True)
                outs.append((logits, feats, cache))
            if teacher is not None:
                xt = train.batch(teacher.modality, items, positions[-1])
                t_logits, t_feats = net.forward(teacher.weights, teacher.spec, xt, training=False)
            preds = [losses.predictions(o[0], head) for o in outs]

            grads = []
            for i, m in enumerate(members):
                if m.frozen:
                    grads.append(None)
                    continue
                logits, feats, cache = outs[i]
                peers = [preds[j] for j in range(len(members)) if j != i] if method == "mutual" else []
                rep, g_logits = losses.task_objective(logits, targets, head, peers)
                g_feats = None
                if method == "mars":
                    rep.distill = losses.mars_loss(feats, t_feats, config.mars_weight, multilabel, m.spec.n_cls)
                    g_feats = losses.l2_grad(feats, t_feats, config.mars_weight, multilabel, m.spec.n_cls)
                elif method == "d3d":
                    rep.distill = losses.d3d_loss(logits, t_logits, config.d3d_weight, multilabel)
                    g_logits = g_logits + losses.l2_grad(logits, t_logits, config.d3d_weight, multilabel,
                                                         m.spec.n_cls)
                rep.total = rep.ce_or_bce + rep.kl + rep.distill
                _check_finite(f"loss of {results[i].name} at epoch {epoch}", rep.total)
                for k, v in rep.as_dict().items():
                    if k != "normalization":
                        sums[i][k] += v
                g = net.backward_from_cache(weights[i], m.spec, cache, g_logits, g_feats)
                for k, v in g.items():
                    _check_finite(f"gradient {k} of {results[i].name}", v)
                grads.append(g)
            # all gradients are taken before any model moves
            for i, m in enumerate(members):
                if grads[i] is None:
                    continue
                weights[i], states[i] = sgd_step(weights[i], grads[i], states[i], lr,
                                                 config.momentum, config.weight_decay)
                if lr > 0:
                    net.update_running_stats(weights[i], m.spec, outs[i][2])
            n_batches += 1

        for i, m in enumerate(members):
            rec = {"epoch": epoch, "split": "train", "model": results[i].name, "modality": m.modality,
                   "lr": lr, **{k: v / max(n_batches, 1) for k, v in sums[i].items()}}
            results[i].log.append(rec)
            scores = evaluate.multiclip_predict(weights[i], m.spec, val, m.modality, val_sampling,
                                                k=config.val_k, m=config.val_m)
            mets = evaluate.metrics(evaluate.prediction_batch(scores, val))
            vrec = {"epoch": epoch, "split": "val", "model": results[i].name, "modality": m.modality, **mets}
            results[i].log.append(vrec)
            score = evaluate.primary_metric(mets)
            if score > results[i].best_metric:
                results[i].best_metric = score
                results[i].best_epoch = epoch
                results[i].best_weights = net.copy_weights(weights[i])
            if log_fn:
                log_fn(rec)
                log_fn(vrec)
            log.debug("epoch %d %s: %s", epoch, results[i].name, vrec)
    for i in range(len(members)):
        results[i].weights = weights[i]
    return results


def _reject_degenerate_pairs(members):
    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            a, b = members[i], members[j]
            if a.modality == b.modality and all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights):
                raise ValueError(f"models {i} and {j} share modality and initialisation; "
                                 "their KL term would stay at zero")


def train_single(init: dict, spec: net.ModelSpec, modality: str, data, config: TrainConfig,
                 name: str = "", log_fn=None) -> TrainResult:
    return fit([Member(init, spec, modality, name)], data, config, method="solo", log_fn=log_fn)[0]


def train_mutual(models: list[tuple[dict, net.ModelSpec, str]], data, config: TrainConfig,
                 names=None, log_fn=None) -> list[TrainResult]:
    names = names or [f"model{i}" for i in range(len(models))]
    members = [Member(w, s, mod, n) for (w, s, mod), n in zip(models, names)]
    return fit(members, data, config, method="mutual", log_fn=log_fn)


def train_distill(student: tuple[dict, net.ModelSpec, str], teacher: tuple[dict, net.ModelSpec, str],
                  data, config: TrainConfig, method: str, name: str = "student", log_fn=None) -> TrainResult:
    if method not in ("mars", "d3d"):
        raise ValueError("distillation method must be 'mars' or 'd3d'")
    t = Member(*teacher, name="teacher", frozen=True)
    return fit([Member(*student, name)], data, config, teacher=t, method=method, log_fn=log_fn)[0]


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, weights: dict, spec: net.ModelSpec, modality: str, extra: dict | None = None) -> str:
    """Write the TensorMap container plus a JSON sidecar with spec and modality; return the hash."""
    path = Path(path)
    digest = io.write_tensors(path, weights, io.MAGIC_CKPT)
    meta = {"modality": modality, "spec": spec.to_dict(), "sha256": digest, **(extra or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return digest


def load_checkpoint(path) -> tuple[dict, net.ModelSpec, str]:
    path = Path(path)
    weights = io.read_tensors(path, io.MAGIC_CKPT)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    spec = net.ModelSpec(**meta["spec"])
    net.validate_weights(weights, spec)
    return weights, spec, meta["modality"]


def write_metric_log(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
