"""Deterministic synthetic video clips whose labels are carried by motion.

A textured rectangle or disc glides at constant velocity over a static
value-noise background. In single-label mode the class is the motion
direction (one of ``n_cls`` compass directions, angle ``2*pi*k/n_cls``
measured from +x towards +y, with y pointing down the image). In multi-label
mode the first two classes mark the shape (rectangle, disc) and the remaining
``n_cls - 2`` mark the direction, so every clip has exactly two active bits.

Colours and textures are drawn independently of the label, so a single frame
says little about the class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io

SHAPES = ("rect", "disc")
MAX_DIRECTIONS = 16
# shape half-size as a fraction of the short side; textures need enough
# high-frequency content inside the shape to avoid aperture ambiguity
R_MIN, R_MAX = 0.2, 0.28


@dataclass
class DatasetConfig:
    num_clips_train: int = 512
    num_clips_val: int = 128
    t_total: int = 12
    height: int = 32
    width: int = 32
    n_cls: int = 8
    mode: str = "single"  # "single" | "multi"
    texture_noise: float = 0.15  # std-dev of the background noise field
    seed: int = 0
    speed_min: float = 1.0
    speed_max: float = 2.0
    static: bool = False  # debug: zero-velocity control clips

    def validate(self) -> None:
        if self.num_clips_train <= 0 or self.num_clips_val <= 0:
            raise ValueError("clip counts must be positive")
        if self.height < 16 or self.width < 16:
            raise ValueError(f"frames must be at least 16x16, got {self.height}x{self.width}")
        if self.n_cls < 2:
            raise ValueError("n_cls must be >= 2")
        if self.mode not in ("single", "multi"):
            raise ValueError(f"unknown dataset mode {self.mode!r}")
        if self.mode == "single" and self.n_cls > MAX_DIRECTIONS:
            raise ValueError(f"single-label mode supports at most {MAX_DIRECTIONS} directions")
        if self.mode == "multi" and not 4 <= self.n_cls <= MAX_DIRECTIONS + 2:
            raise ValueError("multi-label mode needs 2 shape classes plus 2..16 directions")
        if self.t_total < 7:
            raise ValueError("t_total must be >= 7 (Diff/Flow stacks need 6 frames)")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")

    @property
    def n_directions(self) -> int:
        return self.n_cls if self.mode == "single" else self.n_cls - 2


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    clip_id: int
    label: int | None = None
    label_vec: np.ndarray | None = None
    # generator ground truth, not part of the serialized dataset
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy) px/frame
    masks: np.ndarray | None = field(default=None, repr=False)  # (T, H, W) bool shape support

    def __post_init__(self):
        if (self.label is None) == (self.label_vec is None):
            raise ValueError("exactly one of label / label_vec must be set")

    @property
    def t_total(self) -> int:
        return self.frames.shape[0]


def _value_noise(rng, shape, cell, channels):
    """Smooth noise: cubic upsampling of a coarse random lattice, zero mean, unit std."""
    h, w = shape
    gh, gw = h // cell + 3, w // cell + 3
    coarse = rng.standard_normal((channels, gh, gw))
    fine = ndimage.zoom(coarse, (1, cell, cell), order=3, mode="nearest")[:, :h, :w]
    fine -= fine.mean(axis=(1, 2), keepdims=True)
    fine /= fine.std(axis=(1, 2), keepdims=True) + 1e-8
    return fine.transpose(1, 2, 0)


class _Texture:
    """Sum of random plane waves; exact under sub-pixel translation."""

    def __init__(self, rng, n_waves=8):
        self.freq = rng.uniform(0.8, 1.6, n_waves)  # rad/px
        self.theta = rng.uniform(0, 2 * np.pi, n_waves)
        self.phase = rng.uniform(0, 2 * np.pi, (n_waves, 3))
        self.amp = rng.uniform(0.06, 0.14, (n_waves, 3))
        self.base = rng.uniform(0.25, 0.75, 3)

    def __call__(self, dy, dx):
        out = np.broadcast_to(self.base, dy.shape + (3,)).copy()
        for f, th, ph, a in zip(self.freq, self.theta, self.phase, self.amp):
            arg = f * (np.cos(th) * dx + np.sin(th) * dy)
            out += a * np.sin(arg[..., None] + ph)
        return out


def _render_clip(rng, cfg: DatasetConfig, direction: int, shape: str, clip_id: int, label, label_vec):
    T, H, W = cfg.t_total, cfg.height, cfg.width
    bg = 0.5 + rng.uniform(-0.15, 0.15, 3) + cfg.texture_noise * _value_noise(rng, (H, W), 4, 3)
    tex = _Texture(rng)

    side = min(H, W)
    r = rng.uniform(R_MIN, R_MAX) * side
    aspect = rng.uniform(0.7, 1.0)
    speed = 0.0 if cfg.static else rng.uniform(cfg.speed_min, cfg.speed_max)
    angle = 2 * np.pi * direction / cfg.n_directions
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)

    # centre the path, jitter within whatever slack the frame leaves
    half_x, half_y = abs(vx) * (T - 1) / 2, abs(vy) * (T - 1) / 2
    slack_x = max(0.0, (W - 1) / 2 - r - half_x)
    slack_y = max(0.0, (H - 1) / 2 - r - half_y)
    mid_x = (W - 1) / 2 + rng.uniform(-slack_x, slack_x)
    mid_y = (H - 1) / 2 + rng.uniform(-slack_y, slack_y)
    x0, y0 = mid_x - vx * (T - 1) / 2, mid_y - vy * (T - 1) / 2

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((T, H, W, 3), dtype=np.float32)
    masks = np.empty((T, H, W), dtype=bool)
    for t in range(T):
        dx, dy = xx - (x0 + vx * t), yy - (y0 + vy * t)
        if shape == "disc":
            sdf = r - np.hypot(dx, dy)
        else:
            sdf = np.minimum(r - np.abs(dx), r * aspect - np.abs(dy))
        alpha = np.clip(sdf + 0.5, 0.0, 1.0)[..., None]
        img = alpha * tex(dy, dx) + (1 - alpha) * bg
        frames[t] = np.clip(img, 0.0, 1.0)
        masks[t] = sdf > 0.5
    return VideoClip(frames=frames, clip_id=clip_id, label=label, label_vec=label_vec,
                     velocity=(float(vx), float(vy)), masks=masks)


def _split(rng, cfg: DatasetConfig, n: int, id_offset: int) -> list[VideoClip]:
    nd = cfg.n_directions
    # exact round-robin balance, then a seeded shuffle of the order
    directions = np.arange(n) % nd
    shape_ids = (np.arange(n) // nd) % len(SHAPES)
    perm = rng.permutation(n)
    directions, shape_ids = directions[perm], shape_ids[perm]
    clips = []
    for i in range(n):
        d, s = int(directions[i]), int(shape_ids[i])
        if cfg.mode == "single":
            s = int(rng.integers(len(SHAPES)))
            label, label_vec = d, None
        else:
            label = None
            label_vec = np.zeros(cfg.n_cls, dtype=np.float32)
            label_vec[s] = 1.0
            label_vec[len(SHAPES) + d] = 1.0
        clips.append(_render_clip(rng, cfg, d, SHAPES[s], id_offset + i, label, label_vec))
    return clips


def generate_dataset(config: DatasetConfig) -> tuple[list[VideoClip], list[VideoClip]]:
    """Return ``(train, val)``; bit-identical for identical configs."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed & (2**64 - 1)))
    train = _split(rng, config, config.num_clips_train, 0)
    val = _split(rng, config, config.num_clips_val, config.num_clips_train)
    return train, val


def save_split(path, clips: list[VideoClip], n_cls: int) -> str:
    """Serialize a split; frames first (one f32 block per clip), then labels."""
    tensors = {"frames": np.stack([c.frames for c in clips])}
    if clips[0].label is not None:
        tensors["labels"] = np.array([c.label for c in clips], dtype=np.float32)
    else:
        tensors["label_vec"] = np.stack([c.label_vec for c in clips]).astype(np.float32)
    tensors["clip_id"] = np.array([c.clip_id for c in clips], dtype=np.float32)
    tensors["velocity"] = np.array([c.velocity for c in clips], dtype=np.float32)
    tensors["n_cls"] = np.array([n_cls], dtype=np.float32)
    return io.write_tensors(path, tensors, io.MAGIC_DATA)


def load_split(path) -> tuple[list[VideoClip], int]:
    t = io.read_tensors(path, io.MAGIC_DATA)
    frames = t["frames"]
    clips = []
    for i in range(frames.shape[0]):
        kw = {}
        if "labels" in t:
            kw["label"] = int(t["labels"][i])
        else:
            kw["label_vec"] = t["label_vec"][i].copy()
        clips.append(VideoClip(frames=frames[i].copy(), clip_id=int(t["clip_id"][i]),
                               velocity=tuple(float(v) for v in t["velocity"][i]), **kw))
    return clips, int(t["n_cls"][0])


def save_dataset(out_dir, config: DatasetConfig, train, val) -> dict[str, str]:
    out_dir = Path(out_dir)
    return {
        "train": save_split(out_dir / "train.mml", train, config.n_cls),
        "val": save_split(out_dir / "val.mml", val, config.n_cls),
    }
