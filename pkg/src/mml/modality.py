"""RGB, frame-difference (Diff) and optical-flow (Flow) model inputs.

Every modality tensor is laid out ``[n_in, channels, H, W]``:

* RGB  -> 3 channels, one frame per temporal position.
* Diff -> 15 channels, the 5 differences of 6 consecutive frames.
* Flow -> 10 channels, (u, v) of 5 consecutive TV-L1 fields between 6 frames.

Diff and Flow therefore have ``T - 5`` valid positions for a ``T``-frame clip.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _tvl1_kernel as _kernel
from . import io

log = logging.getLogger(__name__)

MODALITIES = ("RGB", "Diff", "Flow")
CHANNELS = {"RGB": 3, "Diff": 15, "Flow": 10}
STACK = 6  # RGB frames consumed by one Diff / Flow input-frame


def modality_length(modality: str, t_total: int) -> int:
    """Number of valid temporal positions of ``modality`` for a ``t_total``-frame clip."""
    if modality == "RGB":
        return t_total
    if modality in ("Diff", "Flow"):
        return t_total - (STACK - 1)
    raise ValueError(f"unknown modality {modality!r}")


@dataclass
class FlowField:
    u: np.ndarray  # horizontal displacement, px
    v: np.ndarray  # vertical displacement, px


@dataclass
class ModalityTensor:
    modality: str
    data: np.ndarray  # [n_in, C, H, W]

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != CHANNELS[self.modality]:
            raise ValueError(f"{self.modality} tensor must be [n_in, {CHANNELS[self.modality]}, H, W], "
                             f"got {self.data.shape}")


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an ``(..., 3)`` array."""
    return rgb @ np.array([0.299, 0.587, 0.114], dtype=rgb.dtype)


def rgb_diff_frame(frames) -> np.ndarray:
    """6 frames ``(6, H, W, 3)`` -> ``(15, H, W)``; channel ``3t+c`` is ``frame[t+1]-frame[t]`` in colour c."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] != STACK or frames.shape[-1] != 3:
        raise ValueError(f"expected (6, H, W, 3) frames, got {frames.shape}")
    d = frames[1:] - frames[:-1]  # (5, H, W, 3)
    return d.transpose(0, 3, 1, 2).reshape(15, *frames.shape[1:3])


# --------------------------------------------------------------------------- TV-L1

@dataclass(frozen=True)
class TVL1Params:
    lam: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    warps: int = 3
    scales: int = 3
    scale_factor: float = 0.5
    iterations: int = 30
    # images are rescaled to [0, intensity_scale] so lam keeps its usual 8-bit meaning
    intensity_scale: float = 255.0


def _bilinear(img, x, y):
    """Sample ``img[b, y, x]`` with border clamping; img (B, H, W), x/y (B, H, W)."""
    B, H, W = img.shape
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), W - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), H - 2)
    fx, fy = x - x0, y - y0
    b = np.arange(B)[:, None, None]
    i00 = img[b, y0, x0]
    i01 = img[b, y0, x0 + 1]
    i10 = img[b, y0 + 1, x0]
    i11 = img[b, y0 + 1, x0 + 1]
    return (i00 * (1 - fx) + i01 * fx) * (1 - fy) + (i10 * (1 - fx) + i11 * fx) * fy


def _central_grad(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :, 1:-1] = 0.5 * (img[:, :, 2:] - img[:, :, :-2])
    gy[:, 1:-1, :] = 0.5 * (img[:, 2:, :] - img[:, :-2, :])
    return gx, gy


def _forward_grad(f):
    fx = np.zeros_like(f)
    fy = np.zeros_like(f)
    fx[:, :, :-1] = f[:, :, 1:] - f[:, :, :-1]
    fy[:, :-1, :] = f[:, 1:, :] - f[:, :-1, :]
    return fx, fy


def _divergence(px, py):
    """Negative adjoint of ``_forward_grad``."""
    d = np.zeros_like(px)
    d[:, :, 0] = px[:, :, 0]
    d[:, :, 1:-1] = px[:, :, 1:-1] - px[:, :, :-2]
    d[:, :, -1] = -px[:, :, -2]
    d[:, 0, :] += py[:, 0, :]
    d[:, 1:-1, :] += py[:, 1:-1, :] - py[:, :-2, :]
    d[:, -1, :] += -py[:, -2, :]
    return d


def _tvl1_level(I0, I1, u1, u2, p, prm: TVL1Params):
    B, H, W = I0.shape
    yy, xx = np.mgrid[0:H, 0:W]
    l_t = prm.lam * prm.theta
    tt = prm.tau / prm.theta
    p11, p12, p21, p22 = p
    for _ in range(prm.warps):
        u1_0, u2_0 = u1.copy(), u2.copy()
        wx, wy = xx + u1_0, yy + u2_0
        I1w = _bilinear(I1, wx, wy)
        gx, gy = _central_grad(I1)
        I1wx = _bilinear(gx, wx, wy)
        I1wy = _bilinear(gy, wx, wy)
        grad2 = I1wx ** 2 + I1wy ** 2
        rho_c = I1w - I1wx * u1_0 - I1wy * u2_0 - I0
        safe = grad2 > 1e-10
        inv_g2 = np.where(safe, 1.0 / np.where(safe, grad2, 1.0), 0.0)
        for _ in range(prm.iterations):
            rho = rho_c + I1wx * u1 + I1wy * u2
            # thresholding step of the data term
            lo = rho < -l_t * grad2
            hi = rho > l_t * grad2
            mid = ~(lo | hi)
            step = np.where(mid, -rho * inv_g2, np.where(lo, l_t, -l_t))
            v1 = u1 + step * I1wx
            v2 = u2 + step * I1wy
            # TV step: primal from dual, then dual ascent
            u1 = v1 + prm.theta * _divergence(p11, p12)
            u2 = v2 + prm.theta * _divergence(p21, p22)
            u1x, u1y = _forward_grad(u1)
            u2x, u2y = _forward_grad(u2)
            ng1 = 1.0 + tt * np.sqrt(u1x ** 2 + u1y ** 2)
            ng2 = 1.0 + tt * np.sqrt(u2x ** 2 + u2y ** 2)
            p11 = (p11 + tt * u1x) / ng1
            p12 = (p12 + tt * u1y) / ng1
            p21 = (p21 + tt * u2x) / ng2
            p22 = (p22 + tt * u2y) / ng2
    return u1, u2, (p11, p12, p21, p22)


def _resize(a, shape, order=1):
    B, H, W = a.shape
    return ndimage.zoom(a, (1, shape[0] / H, shape[1] / W), order=order, mode="nearest",
                        grid_mode=True)


def tvl1_flow_batch(frames_a, frames_b, params: TVL1Params = TVL1Params(), backend: str = "numba") -> np.ndarray:
    """Coarse-to-fine TV-L1 on a stack of grayscale pairs.

    ``frames_a``/``frames_b``: (B, H, W). Returns (B, 2, H, W) with (u, v) such
    that ``frames_b[y + v, x + u] ~ frames_a[y, x]``. ``backend="numpy"`` runs
    the vectorised reference solver instead of the compiled one.
    """
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    a = np.asarray(frames_a, dtype=np.float64)
    b = np.asarray(frames_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"frame stacks must share a (B, H, W) shape, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input pixels")
    a = a * params.intensity_scale
    b = b * params.intensity_scale
    # prefilter mildly so the pyramid is not aliased
    pyr = [(a, b)]
    for _ in range(1, params.scales):
        pa, pb = pyr[-1]
        h = max(4, int(round(pa.shape[1] * params.scale_factor)))
        w = max(4, int(round(pa.shape[2] * params.scale_factor)))
        sigma = (0, 0.6, 0.6)
        pyr.append((_resize(ndimage.gaussian_filter(pa, sigma), (h, w)),
                    _resize(ndimage.gaussian_filter(pb, sigma), (h, w))))
    B = a.shape[0]
    u1 = u2 = None
    p = None
    for level in range(len(pyr) - 1, -1, -1):
        I0, I1 = pyr[level]
        shape = I0.shape[1:]
        if u1 is None:
            u1 = np.zeros((B,) + shape)
            u2 = np.zeros((B,) + shape)
            p = tuple(np.zeros((B,) + shape) for _ in range(4))
        else:
            sy, sx = shape[0] / u1.shape[1], shape[1] / u1.shape[2]
            u1 = _resize(u1, shape) * sx
            u2 = _resize(u2, shape) * sy
            p = tuple(_resize(q, shape) for q in p)
        if backend == "numpy":
            u1, u2, p = _tvl1_level(I0, I1, u1, u2, p, params)
        else:
            u1, u2 = np.ascontiguousarray(u1), np.ascontiguousarray(u2)
            p = tuple(np.ascontiguousarray(q) for q in p)
            _kernel.tvl1_level(np.ascontiguousarray(I0), np.ascontiguousarray(I1), u1, u2, *p,
                               params.lam, params.theta, params.tau, params.warps, params.iterations)
    return np.stack([u1, u2], axis=1)


def tvl1_flow(frame_a, frame_b, params: TVL1Params = TVL1Params()) -> FlowField:
    """Dense displacement from ``frame_a`` to ``frame_b`` (grayscale H x W)."""
    frame_a = np.asarray(frame_a)
    frame_b = np.asarray(frame_b)
    if frame_a.shape != frame_b.shape or frame_a.ndim != 2:
        raise ValueError("frames must be 2-D and of equal shape")
    f = tvl1_flow_batch(frame_a[None], frame_b[None], params)[0]
    return FlowField(u=f[0], v=f[1])


# --------------------------------------------------------------------------- Flow stacking

def flow_input_frame(flows, bound: float = 4.0) -> np.ndarray:
    """5 consecutive fields -> ``(10, H, W)`` ordered (u0, v0, ..., u4, v4), clipped to
    ``[-bound, bound]`` and divided by ``bound``."""
    flows = list(flows)
    if len(flows) != STACK - 1:
        raise ValueError(f"need {STACK - 1} flow fields, got {len(flows)}")
    arr = np.stack([np.stack([f.u, f.v]) if isinstance(f, FlowField) else np.asarray(f)
                    for f in flows])  # (5, 2, H, W)
    return _scale_flow(arr, bound).reshape(10, *arr.shape[2:])


def _scale_flow(arr, bound):
    return np.clip(arr, -bound, bound) / bound


def clip_flows(frames: np.ndarray, params: TVL1Params = TVL1Params()) -> np.ndarray:
    """All ``T-1`` consecutive-frame flows of a ``(T, H, W, 3)`` clip -> ``(T-1, 2, H, W)``."""
    gray = luminance(np.asarray(frames, dtype=np.float64))
    return tvl1_flow_batch(gray[:-1], gray[1:], params).astype(np.float32)


def flow_cache_path(cache_dir, frames: np.ndarray, params: TVL1Params = TVL1Params()) -> Path:
    """Cache file for a ``(T, H, W, 3)`` clip, keyed by its pixels and the solver parameters."""
    h = hashlib.sha256(np.ascontiguousarray(frames, dtype=np.float32).tobytes())
    h.update(repr(params).encode())
    return Path(cache_dir) / f"flow_{h.hexdigest()[:20]}.mml"


def cached_clip_flows(frames, cache_dir, params: TVL1Params = TVL1Params()) -> np.ndarray:
    """Like ``clip_flows`` but backed by a per-clip file under ``cache_dir``."""
    path = flow_cache_path(cache_dir, frames, params)
    if path.exists():
        return io.read_tensors(path, io.MAGIC_FLOW)["flow"]
    flow = clip_flows(frames, params)
    io.write_tensors(path, {"flow": flow}, io.MAGIC_FLOW)
    return flow


# --------------------------------------------------------------------------- assembly

def clip_to_modality(clip, modality: str, indices, flows: np.ndarray | None = None,
                     flow_bound: float = 4.0) -> ModalityTensor:
    """Build the model input of ``clip`` at the given temporal positions.

    For Diff/Flow, position ``i`` uses RGB frames ``i..i+5``. ``flows`` (``(T-1, 2, H, W)``)
    is computed on demand when omitted.
    """
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    T = frames.shape[0]
    n = modality_length(modality, T)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"{modality} indices must lie in [0, {n - 1}], got {list(idx)}")
    if modality == "RGB":
        data = frames[idx].transpose(0, 3, 1, 2)
    elif modality == "Diff":
        data = np.stack([rgb_diff_frame(frames[i:i + STACK]) for i in idx])
    else:
        if flows is None:
            flows = clip_flows(frames)
        data = np.stack([_scale_flow(flows[i:i + STACK - 1], flow_bound).reshape(10, *flows.shape[2:])
                         for i in idx])
    return ModalityTensor(modality, np.ascontiguousarray(data, dtype=np.float32))
