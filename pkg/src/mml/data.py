"""In-memory clip store that assembles modality batches by index."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .modality import (CHANNELS, STACK, TVL1Params, flow_cache_path, luminance, modality_length,
                       tvl1_flow_batch)
from .synthvid import DatasetConfig, VideoClip, generate_dataset

log = logging.getLogger(__name__)


class ClipStore:
    """One split, frames held as ``(N, T, 3, H, W)`` float32.

    Flow fields are computed on first use (batched across clips) and, when
    ``cache_dir`` is set, persisted as one file per clip.
    """

    def __init__(self, clips: list[VideoClip], n_cls: int, flow_params: TVL1Params = TVL1Params(),
                 flow_bound: float = 4.0, cache_dir=None, flow_chunk: int = 16):
        if not clips:
            raise ValueError("empty split")
        self.frames = np.stack([c.frames.transpose(0, 3, 1, 2) for c in clips]).astype(np.float32)
        self.n_cls = n_cls
        self.clip_ids = np.array([c.clip_id for c in clips])
        if clips[0].label is not None:
            self.labels = np.array([c.label for c in clips], dtype=np.int64)
            self.label_vecs = None
        else:
            self.labels = None
            self.label_vecs = np.stack([c.label_vec for c in clips]).astype(np.float64)
        self.flow_params = flow_params
        self.flow_bound = flow_bound
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.flow_chunk = flow_chunk
        self._flows: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def t_total(self) -> int:
        return self.frames.shape[1]

    @property
    def multilabel(self) -> bool:
        return self.labels is None

    def targets(self, items):
        return self.labels[items] if self.labels is not None else self.label_vecs[items]

    def length(self, modality: str) -> int:
        return modality_length(modality, self.t_total)

    # -- flow -----------------------------------------------------------------

    def _cache_path(self, i):
        return flow_cache_path(self.cache_dir, self.frames[i].transpose(0, 2, 3, 1), self.flow_params)

    @property
    def flows(self) -> np.ndarray:
        """``(N, T-1, 2, H, W)`` TV-L1 fields between consecutive frames."""
        if self._flows is None:
            self._flows = self._compute_flows()
        return self._flows

    def _compute_flows(self):
        N, T, _, H, W = self.frames.shape
        out = np.empty((N, T - 1, 2, H, W), dtype=np.float32)
        todo = []
        for i in range(N):
            if self.cache_dir is not None and self._cache_path(i).exists():
                out[i] = io.read_tensors(self._cache_path(i), io.MAGIC_FLOW)["flow"]
            else:
                todo.append(i)
        if todo:
            log.info("computing TV-L1 flow for %d clips", len(todo))
            gray = luminance(self.frames[todo].transpose(0, 1, 3, 4, 2).astype(np.float64))
            a = gray[:, :-1].reshape(-1, H, W)
            b = gray[:, 1:].reshape(-1, H, W)
            res = np.empty((a.shape[0], 2, H, W), dtype=np.float32)
            for s in range(0, a.shape[0], self.flow_chunk):
                res[s:s + self.flow_chunk] = tvl1_flow_batch(a[s:s + self.flow_chunk],
                                                             b[s:s + self.flow_chunk], self.flow_params)
            res = res.reshape(len(todo), T - 1, 2, H, W)
            for j, i in enumerate(todo):
                out[i] = res[j]
                if self.cache_dir is not None:
                    io.write_tensors(self._cache_path(i), {"flow": res[j]}, io.MAGIC_FLOW)
        return out

    # -- batches --------------------------------------------------------------

    def batch(self, modality: str, items, indices) -> np.ndarray:
        """``[B, n_in, C, H, W]`` for clips ``items`` at per-clip positions ``indices`` ([B, n_in])."""
        items = np.asarray(items, dtype=np.intp)
        idx = np.asarray(indices, dtype=np.intp)
        n = self.length(modality)
        if idx.min() < 0 or idx.max() >= n:
            raise IndexError(f"{modality} positions must lie in [0, {n - 1}]")
        ci = items[:, None]
        if modality == "RGB":
            return self.frames[ci, idx]
        if modality == "Diff":
            f = self.frames[ci[:, :, None], idx[:, :, None] + np.arange(STACK)]  # B, n_in, 6, 3, H, W
            d = f[:, :, 1:] - f[:, :, :-1]
            return d.reshape(d.shape[0], d.shape[1], CHANNELS["Diff"], *d.shape[-2:])
        fl = self.flows[ci[:, :, None], idx[:, :, None] + np.arange(STACK - 1)]  # B, n_in, 5, 2, H, W
        fl = np.clip(fl, -self.flow_bound, self.flow_bound) / self.flow_bound
        return fl.reshape(fl.shape[0], fl.shape[1], CHANNELS["Flow"], *fl.shape[-2:])


@dataclass
class Dataset:
    train: ClipStore
    val: ClipStore
    config: DatasetConfig

    @property
    def n_cls(self) -> int:
        return self.config.n_cls

    @property
    def head(self) -> str:
        return "softmax" if self.config.mode == "single" else "sigmoid"


def build_dataset(config: DatasetConfig, cache_dir=None, flow_params: TVL1Params = TVL1Params(),
                  flow_bound: float = 4.0) -> Dataset:
    train, val = generate_dataset(config)
    kw = dict(flow_params=flow_params, flow_bound=flow_bound)
    cache = Path(cache_dir) if cache_dir else None
    return Dataset(
        train=ClipStore(train, config.n_cls, cache_dir=cache / "train" if cache else None, **kw),
        val=ClipStore(val, config.n_cls, cache_dir=cache / "val" if cache else None, **kw),
        config=config,
    )
