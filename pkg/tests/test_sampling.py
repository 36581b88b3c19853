import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mml import sampling as S


def _idx(*args):
    return [c.tolist() for c in S.test_sample(*args)]


def test_dense_single_clip_takes_midpoint():
    # T' = 12 - 3 = 9, start = 4
    assert _idx(12, 4, 1, 1, 0) == [[4, 5, 6, 7]]


def test_dense_clips_are_spread_over_valid_starts():
    assert _idx(10, 3, 2, 2, 0) == [[0, 2, 4], [3, 5, 7]]
    assert _idx(9, 2, 3, 2, 0) == [[0, 3], [3, 6]]


def test_uniform_clips_shift_by_fraction_of_segment():
    assert _idx(12, 4, 1, 0, 2) == [[0, 3, 6, 9], [1, 4, 7, 10]]


def test_dense_then_uniform_order():
    assert _idx(7, 4, 1, 3, 3) == [[0, 1, 2, 3], [1, 2, 3, 4], [2, 3, 4, 5],
                                   [0, 1, 3, 5], [0, 2, 4, 5], [1, 2, 4, 6]]
    assert _idx(5, 4, 1, 1, 1) == [[1, 2, 3, 4], [0, 1, 2, 3]]


def test_test_sample_rejects_bad_arguments():
    with pytest.raises(ValueError):
        S.test_sample(6, 4, 2, 1, 0)  # dense span too long
    with pytest.raises(ValueError):
        S.test_sample(6, 4, 1, 0, 0)
    with pytest.raises(ValueError):
        S.test_sample(3, 4, 1, 0, 1)
    # uniform-only clips need no dense span
    assert len(S.test_sample(6, 4, 5, 0, 1)) == 1


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(2, 8), st.integers(1, 4), st.integers(0, 4), st.integers(0, 4))
def test_test_indices_within_range_and_sorted(t_total, n_in, tau, k, m):
    if t_total < n_in or k + m == 0 or (k and tau * (n_in - 1) >= t_total):
        return
    clips = S.test_sample(t_total, n_in, tau, k, m)
    assert len(clips) == k + m
    for c in clips:
        assert len(c) == n_in and c.min() >= 0 and c.max() < t_total
        assert np.all(np.diff(c) >= 0)
    for c in clips[:k]:
        assert np.all(np.diff(c) == tau)


def test_uniform_train_indices_fall_in_their_parts():
    rng = np.random.default_rng(0)
    for t_total, n_in in [(12, 4), (7, 4), (10, 3), (40, 8)]:
        lo = np.arange(n_in) * t_total // n_in
        hi = np.arange(1, n_in + 1) * t_total // n_in
        draws = np.stack([S.uniform_train_sample(t_total, n_in, rng) for _ in range(2000)])
        assert np.all(draws >= lo) and np.all(draws < hi)
        # every frame of a part shows up
        for j in range(n_in):
            assert set(np.unique(draws[:, j])) == set(range(lo[j], hi[j]))


def test_dense_train_sample_covers_all_starts():
    rng = np.random.default_rng(1)
    starts = {int(S.dense_train_sample(10, 3, 2, rng)[0]) for _ in range(500)}
    assert starts == set(range(0, 10 - 4))
    with pytest.raises(ValueError):
        S.dense_train_sample(4, 3, 2, rng)


def test_mixed_uses_both_strategies():
    rng = np.random.default_rng(2)
    dense = 0
    for _ in range(1000):
        idx = S.mixed_train_sample(20, 4, 3, rng)
        dense += bool(np.all(np.diff(idx) == 3))
    # a uniform draw can look dense by chance, so only bound loosely
    assert 400 < dense < 700


def test_train_sample_is_seeded():
    spec = S.SamplingSpec()
    a = [S.train_sample(spec, 12, np.random.default_rng(5)).tolist() for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_align_modalities_offset_range():
    rng = np.random.default_rng(3)
    xs = [S.draw_offset(7, 12, rng) for _ in range(3000)]
    assert set(xs) == set(range(6))
    out = S.align_modalities([0, 2, 4, 6], 7, 12, rng, offset=5)
    assert out.tolist() == [5, 7, 9, 11]
    with pytest.raises(ValueError):
        S.align_modalities([0, 7], 7, 12, rng)
    with pytest.raises(ValueError):
        S.draw_offset(12, 7, rng)


def test_parse_test_spec():
    assert S.parse_test_spec("dense:1,uniform:2") == (1, 2)
    assert S.parse_test_spec("uniform:3") == (0, 3)
    assert S.parse_test_spec(" dense:2 ") == (2, 0)
    for bad in ("dense:0", "dense:1,dense:2", "foo:1", "dense=1", ""):
        with pytest.raises(ValueError):
            S.parse_test_spec(bad)


def test_sampling_spec_validation():
    S.SamplingSpec(tau=2).validate(12)
    with pytest.raises(ValueError):
        S.SamplingSpec(tau=4).validate(12)
    with pytest.raises(ValueError):
        S.SamplingSpec(strategy="random").validate()
    with pytest.raises(ValueError):
        S.SamplingSpec(test_k=0, test_m=0).validate()
    assert S.SamplingSpec(test_k=1, test_m=2).label == "dense:1,uniform:2"
