"""Frame-index sampling for training and multi-clip testing.

Training draws one of:

* uniform: split ``[0, T)`` into ``n_in`` equal parts, one random frame per part;
* dense: every ``tau``-th frame from a random start;
* mixed: a fair coin picks uniform or dense for each clip.

Testing is deterministic: ``k`` dense clips plus ``m`` uniform clips per video.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

STRATEGIES = ("uniform", "dense", "mixed")


@dataclass
class SamplingSpec:
    strategy: str = "mixed"
    n_in: int = 4
    tau: int = 1
    test_k: int = 1
    test_m: int = 2

    def validate(self, t_total: int | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.n_in < 2:
            raise ValueError("n_in must be >= 2")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.test_k < 0 or self.test_m < 0 or self.test_k + self.test_m < 1:
            raise ValueError("need test_k, test_m >= 0 and test_k + test_m >= 1")
        if t_total is not None:
            if t_total < self.n_in:
                raise ValueError(f"{t_total} frames cannot supply n_in={self.n_in}")
            if self.tau * (self.n_in - 1) >= t_total:
                raise ValueError(f"tau={self.tau} too large: need tau*(n_in-1) < {t_total}")

    @property
    def label(self) -> str:
        return f"dense:{self.test_k},uniform:{self.test_m}"


def parse_test_spec(text: str) -> tuple[int, int]:
    """``"dense:1,uniform:2"`` -> ``(1, 2)``; either part may be omitted (counts as 0)."""
    k = m = 0
    seen = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        match = re.fullmatch(r"(dense|uniform):(\d+)", part)
        if not match or match.group(1) in seen:
            raise ValueError(f"bad clip spec {text!r}; expected e.g. 'dense:1,uniform:2'")
        seen.add(match.group(1))
        if match.group(1) == "dense":
            k = int(match.group(2))
        else:
            m = int(match.group(2))
    if k + m < 1:
        raise ValueError(f"clip spec {text!r} selects no clips")
    return k, m


def _check(t_total, n_in):
    if n_in < 1:
        raise ValueError("n_in must be >= 1")
    if t_total < n_in:
        raise ValueError(f"t_total={t_total} < n_in={n_in}")


def uniform_train_sample(t_total: int, n_in: int, rng: np.random.Generator) -> np.ndarray:
    _check(t_total, n_in)
    lo = (np.arange(n_in) * t_total) // n_in
    hi = (np.arange(1, n_in + 1) * t_total) // n_in
    return rng.integers(lo, hi)


def dense_train_sample(t_total: int, n_in: int, tau: int, rng: np.random.Generator) -> np.ndarray:
    _check(t_total, n_in)
    span = tau * (n_in - 1)
    if tau < 1 or span >= t_total:
        raise ValueError(f"dense sampling needs tau*(n_in-1) < t_total (tau={tau}, t_total={t_total})")
    start = int(rng.integers(0, t_total - span))
    return start + tau * np.arange(n_in, dtype=np.int64)


def mixed_train_sample(t_total: int, n_in: int, tau: int, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return dense_train_sample(t_total, n_in, tau, rng)
    return uniform_train_sample(t_total, n_in, rng)


def train_sample(spec: SamplingSpec, t_total: int, rng: np.random.Generator) -> np.ndarray:
    if spec.strategy == "uniform":
        return uniform_train_sample(t_total, spec.n_in, rng)
    if spec.strategy == "dense":
        return dense_train_sample(t_total, spec.n_in, spec.tau, rng)
    return mixed_train_sample(t_total, spec.n_in, spec.tau, rng)


def test_sample(t_total: int, n_in: int, tau: int, k: int, m: int) -> list[np.ndarray]:
    """The ``k`` dense then ``m`` uniform test clips; integer arithmetic throughout.

    Dense clip ``i`` starts at ``floor(i*T'/k)`` (``floor(T'/2)`` when ``k == 1``),
    ``T' = t_total - tau*(n_in-1)``. Uniform clip ``i`` takes frames
    ``floor((j + i/m) * t_total / n_in)``, ``j = 0..n_in-1``.
    """
    _check(t_total, n_in)
    if k < 0 or m < 0 or k + m < 1:
        raise ValueError("need k, m >= 0 and k + m >= 1")
    clips = []
    if k:
        t_prime = t_total - tau * (n_in - 1)
        if tau < 1 or t_prime < 1:
            raise ValueError(f"dense test clips need tau*(n_in-1) < t_total (tau={tau})")
        starts = [t_prime // 2] if k == 1 else [(i * t_prime) // k for i in range(k)]
        clips += [s + tau * np.arange(n_in, dtype=np.int64) for s in starts]
    j = np.arange(n_in, dtype=np.int64)
    # floor((j + i/m) * T / N) == floor((j*m + i) * T / (m*N))
    clips += [((j * m + i) * t_total) // (m * n_in) for i in range(m)]
    return clips


test_sample.__test__ = False  # not a pytest test despite the name


def draw_offset(n_short: int, n_long: int, rng: np.random.Generator) -> int:
    """xi ~ unif{0, ..., n_long - n_short}."""
    if n_long < n_short:
        raise ValueError("n_long must be >= n_short")
    return int(rng.integers(0, n_long - n_short + 1))


def align_modalities(base_indices, n_short: int, n_long: int, rng: np.random.Generator,
                     offset: int | None = None) -> np.ndarray:
    """Shift indices drawn for the shorter modality by one random offset."""
    base = np.asarray(base_indices, dtype=np.int64)
    if base.size and (base.min() < 0 or base.max() >= n_short):
        raise ValueError(f"base indices must lie in [0, {n_short - 1}]")
    xi = draw_offset(n_short, n_long, rng) if offset is None else offset
    out = base + xi
    assert out.size == 0 or out.max() <= n_long - 1, "offset pushed indices past the longer modality"
    return out
