"""Tiny temporal-shift CNN with a hand-written backward pass.

Layout: the clip ``[B, n_in, C, H, W]`` is folded into ``B*n_in`` images and
passed through conv blocks ``conv -> batchnorm -> ReLU``. Block 0 is the first
convolution (the one adapted when the input modality changes); every later
block shifts a fraction of its input channels one step along time before its
convolution. Global average pooling over time and space yields the feature
vector, and a linear head yields the logits.

Weights live in a plain ``dict[str, np.ndarray]`` (a "TensorMap"). Batch-norm
running statistics are part of it but are not trained.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FIRST_CONV = "conv0.weight"


@dataclass
class ModelSpec:
    input_channels: int
    n_in: int
    n_cls: int
    widths: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    shift_fraction: float = 1 / 8
    head: str = "softmax"  # "softmax" | "sigmoid"
    kernel: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        self.validate()

    def validate(self) -> None:
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("widths must be positive")
        if len(self.strides) != len(self.widths):
            raise ValueError("need one stride per block")
        if self.head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        for c in self.widths[:-1]:
            fold = self.shift_fraction * c
            if abs(fold - round(fold)) > 1e-9:
                raise ValueError(f"shift_fraction*{c} is not an integer")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def with_channels(self, channels: int) -> "ModelSpec":
        d = asdict(self)
        d["input_channels"] = channels
        return ModelSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d


def is_trainable(name: str) -> bool:
    return "running_" not in name


def init_weights(spec: ModelSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded fan-in uniform initialisation."""
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    cin = spec.input_channels
    k = spec.kernel
    for i, cout in enumerate(spec.widths):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w[f"conv{i}.weight"] = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype)
        w[f"bn{i}.weight"] = np.ones(cout, dtype)
        w[f"bn{i}.bias"] = np.zeros(cout, dtype)
        w[f"bn{i}.running_mean"] = np.zeros(cout, dtype)
        w[f"bn{i}.running_var"] = np.ones(cout, dtype)
        cin = cout
    bound = 1.0 / np.sqrt(cin)
    w["fc.weight"] = rng.uniform(-bound, bound, (spec.n_cls, cin)).astype(dtype)
    w["fc.bias"] = np.zeros(spec.n_cls, dtype)
    return w


def expected_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    cin, k = spec.input_channels, spec.kernel
    shapes = {}
    for i, cout in enumerate(spec.widths):
        shapes[f"conv{i}.weight"] = (cout, cin, k, k)
        for nm in ("weight", "bias", "running_mean", "running_var"):
            shapes[f"bn{i}.{nm}"] = (cout,)
        cin = cout
    shapes["fc.weight"] = (spec.n_cls, cin)
    shapes["fc.bias"] = (spec.n_cls,)
    return shapes


# --------------------------------------------------------------------------- layers

def temporal_shift(x: np.ndarray, fraction: float, reverse: bool = False, channel_axis: int = 2,
                   time_axis: int | None = None) -> np.ndarray:
    """Shift channel groups along time (``time_axis``, default ``channel_axis - 1``).

    The first ``fraction*C`` channels at time t are taken from t-1 and the next
    ``fraction*C`` from t+1, zero-filled at the ends. ``reverse=True`` applies
    the adjoint (used by the backward pass).
    """
    C = x.shape[channel_axis]
    fold_f = fraction * C
    if abs(fold_f - round(fold_f)) > 1e-9:
        raise ValueError(f"fraction*C = {fold_f} is not an integer")
    fold = int(round(fold_f))
    t_axis = channel_axis - 1 if time_axis is None else time_axis
    if t_axis < 0 or t_axis == channel_axis:
        raise ValueError("need a time axis distinct from the channel axis")
    xm = np.moveaxis(x, (t_axis, channel_axis), (0, 1))
    out = xm.copy()
    out[:, :2 * fold] = 0
    a, b = (slice(None, -1), slice(1, None))
    if reverse:
        a, b = b, a
    # group 1: out[t] = x[t-1]   (adjoint: out[t] = g[t+1])
    out[b, :fold] = xm[a, :fold]
    # group 2: out[t] = x[t+1]   (adjoint: out[t] = g[t-1])
    out[a, fold:2 * fold] = xm[b, fold:2 * fold]
    return np.moveaxis(out, (0, 1), (t_axis, channel_axis))


def _im2col(x, k, stride):
    """x NHWC -> cols (N*Ho*Wo, C*k*k) with (C, kh, kw) ordering."""
    N, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    return win.reshape(N * Ho * Wo, C * k * k), (Ho, Wo)


def conv_forward(x, w, stride):
    """NHWC convolution, 'same' padding, no bias. w is [O, C, k, k]."""
    N = x.shape[0]
    O, _, k, _ = w.shape
    cols, (Ho, Wo) = _im2col(x, k, stride)
    out = cols @ w.reshape(O, -1).T
    return out.reshape(N, Ho, Wo, O), cols


def conv_backward(dout, cols, x_shape, w, stride, need_dx=True):
    N, H, W, C = x_shape
    O, _, k, _ = w.shape
    Ho, Wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, O)
    dw = (d2.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (d2 @ w.reshape(O, -1)).reshape(N, Ho, Wo, C, k, k)
    p = k // 2
    dxp = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[..., i, j]
    return dxp[:, p:p + H, p:p + W, :], dw


def bn_forward(x, gamma, beta, mean, var, eps, training):
    if training:
        mu = x.mean(axis=(0, 1, 2))
        v = x.var(axis=(0, 1, 2))
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, mu, v)


def bn_backward(dy, gamma, cache, training):
    xhat, inv, _, _ = cache
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    if not training:
        return dy * (gamma * inv), dgamma, dbeta
    m = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dx = (gamma * inv / m) * (m * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------- network

@dataclass
class Cache:
    training: bool
    batch: int
    layers: list = field(default_factory=list)
    pooled_shape: tuple = ()
    features: np.ndarray | None = None
    batch_stats: dict = field(default_factory=dict)


def _as_batch(x, spec: ModelSpec, dtype):
    data = getattr(x, "data", x)
    data = np.asarray(data, dtype=dtype)
    single = data.ndim == 4
    if single:
        data = data[None]
    if data.ndim != 5 or data.shape[1] != spec.n_in or data.shape[2] != spec.input_channels:
        raise ValueError(f"expected input [B, {spec.n_in}, {spec.input_channels}, H, W], got {data.shape}")
    return data, single


def forward(weights: dict, spec: ModelSpec, x, training: bool = False, return_cache: bool = False):
    """Return ``(logits, features)`` (plus a cache for ``backward_from_cache``).

    ``x`` is ``[n_in, C, H, W]`` (one clip) or ``[B, n_in, C, H, W]``.
    """
    dtype = weights["fc.weight"].dtype
    data, single = _as_batch(x, spec, dtype)
    B, T = data.shape[:2]
    h = np.ascontiguousarray(data.transpose(0, 1, 3, 4, 2)).reshape(B * T, *data.shape[3:], data.shape[2])
    cache = Cache(training=training, batch=B)
    for i, stride in enumerate(spec.strides):
        shifted = i > 0 and spec.shift_fraction > 0
        if shifted:
            h = temporal_shift(h.reshape(B, T, *h.shape[1:]), spec.shift_fraction,
                               channel_axis=4, time_axis=1).reshape(B * T, *h.shape[1:])
        w = weights[f"conv{i}.weight"]
        z, cols = conv_forward(h, w, stride)
        y, bnc = bn_forward(z, weights[f"bn{i}.weight"], weights[f"bn{i}.bias"],
                            weights[f"bn{i}.running_mean"], weights[f"bn{i}.running_var"],
                            spec.bn_eps, training)
        if training:
            cache.batch_stats[i] = (bnc[2], bnc[3], z.shape[0] * z.shape[1] * z.shape[2])
        out = np.maximum(y, 0)
        if return_cache:
            cache.layers.append(dict(x_shape=h.shape, cols=cols, bn=bnc, relu_mask=y > 0, shifted=shifted))
        h = out
    BT, hh, ww, C = h.shape
    feats = h.reshape(B, T * hh * ww, C).mean(axis=1)
    logits = feats @ weights["fc.weight"].T + weights["fc.bias"]
    cache.pooled_shape = h.shape
    cache.features = feats
    if single:
        logits, feats = logits[0], feats[0]
    if return_cache:
        return logits, feats, cache
    return logits, feats


def backward_from_cache(weights: dict, spec: ModelSpec, cache: Cache, grad_logits,
                        grad_features=None) -> dict[str, np.ndarray]:
    dtype = weights["fc.weight"].dtype
    B = cache.batch
    gl = np.asarray(grad_logits, dtype=dtype).reshape(B, spec.n_cls)
    grads = {"fc.weight": gl.T @ cache.features, "fc.bias": gl.sum(axis=0)}
    dfeat = gl @ weights["fc.weight"]
    if grad_features is not None:
        dfeat = dfeat + np.asarray(grad_features, dtype=dtype).reshape(B, -1)
    BT, hh, ww, C = cache.pooled_shape
    T = BT // B
    n = T * hh * ww
    dh = np.broadcast_to((dfeat / n)[:, None, :], (B, n, C)).reshape(cache.pooled_shape)
    for i in range(len(spec.strides) - 1, -1, -1):
        lay = cache.layers[i]
        dy = dh * lay["relu_mask"]
        dz, dgamma, dbeta = bn_backward(dy, weights[f"bn{i}.weight"], lay["bn"], cache.training)
        grads[f"bn{i}.weight"] = dgamma
        grads[f"bn{i}.bias"] = dbeta
        dx, dw = conv_backward(dz, lay["cols"], lay["x_shape"], weights[f"conv{i}.weight"],
                               spec.strides[i], need_dx=i > 0)
        grads[f"conv{i}.weight"] = dw
        if i == 0:
            break
        if lay["shifted"]:
            shp = dx.shape
            dx = temporal_shift(dx.reshape(B, T, *shp[1:]), spec.shift_fraction, reverse=True,
                                channel_axis=4, time_axis=1).reshape(shp)
        dh = dx
    return grads


def backward(weights: dict, spec: ModelSpec, x, grad_logits, grad_features=None,
             training: bool = True) -> dict[str, np.ndarray]:
    """Gradients of ``sum(logits * grad_logits) [+ sum(features * grad_features)]``."""
    _, _, cache = forward(weights, spec, x, training=training, return_cache=True)
    return backward_from_cache(weights, spec, cache, grad_logits, grad_features)


def update_running_stats(weights: dict, spec: ModelSpec, cache: Cache) -> None:
    """Fold the batch statistics of a training forward into the running estimates (in place)."""
    m = spec.bn_momentum
    for i, (mu, var, count) in cache.batch_stats.items():
        unbiased = var * (count / max(count - 1, 1))
        rm, rv = weights[f"bn{i}.running_mean"], weights[f"bn{i}.running_var"]
        rm *= 1 - m
        rm += m * mu
        rv *= 1 - m
        rv += m * unbiased


# --------------------------------------------------------------------------- initialisation transfer

def adapt_first_conv(w: np.ndarray, n_target: int, allow_any_source: bool = False) -> np.ndarray:
    """``[C, 3, K, K] -> [C, n_target, K, K]``, every input slice set to the mean of the source slices.

    ``allow_any_source`` extends the rule to non-RGB sources (mean over however
    many input channels the source has), used for transfers back to RGB.
    """
    w = np.asarray(w)
    if w.ndim != 4:
        raise ValueError("first-conv weight must be [C, C_in, K, K]")
    if w.shape[1] != 3 and not allow_any_source:
        raise ValueError(f"source first conv must have 3 input channels, got {w.shape[1]}")
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    mean = w.mean(axis=1, keepdims=True)
    return np.repeat(mean, n_target, axis=1).astype(w.dtype)


def transfer_weights(source: dict, target_spec: ModelSpec, allow_reverse: bool = False) -> dict[str, np.ndarray]:
    """Copy every tensor; adapt the first conv if the input channel count differs."""
    shapes = expected_shapes(target_spec)
    if set(source) != set(shapes):
        raise ValueError(f"tensor names differ: {sorted(set(source) ^ set(shapes))}")
    out = {}
    for name, arr in source.items():
        if name == FIRST_CONV and arr.shape[1] != target_spec.input_channels:
            if arr.shape[0] != shapes[name][0] or arr.shape[2:] != shapes[name][2:]:
                raise ValueError(f"{name}: {arr.shape} incompatible with {shapes[name]}")
            out[name] = adapt_first_conv(arr, target_spec.input_channels, allow_any_source=allow_reverse)
            continue
        if tuple(arr.shape) != shapes[name]:
            raise ValueError(f"{name}: shape {arr.shape} != expected {shapes[name]}")
        out[name] = arr.copy()
    return out


def validate_weights(weights: dict, spec: ModelSpec) -> None:
    shapes = expected_shapes(spec)
    for name, shp in shapes.items():
        if name not in weights:
            raise ValueError(f"missing tensor {name!r}")
        if tuple(weights[name].shape) != shp:
            raise ValueError(f"{name}: shape {weights[name].shape} != {shp}")
        if not np.all(np.isfinite(weights[name])):
            raise ValueError(f"{name} has non-finite values")
    extra = set(weights) - set(shapes)
    if extra:
        raise ValueError(f"unexpected tensors {sorted(extra)}")


def copy_weights(weights: dict) -> dict:
    return {k: v.copy() for k, v in weights.items()}
