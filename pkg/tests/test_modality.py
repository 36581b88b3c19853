import numpy as np
import pytest
from scipy import ndimage

from mml import modality as M
from mml.data import ClipStore, build_dataset
from mml.synthvid import DatasetConfig, generate_dataset


def _clips(**kw):
    d = dict(num_clips_train=8, num_clips_val=4, t_total=8, height=32, width=32, n_cls=8, seed=1)
    d.update(kw)
    return generate_dataset(DatasetConfig(**d))


def test_modality_lengths():
    assert M.modality_length("RGB", 12) == 12
    assert M.modality_length("Diff", 12) == M.modality_length("Flow", 12) == 7
    with pytest.raises(ValueError):
        M.modality_length("Depth", 12)


def test_diff_channel_layout():
    f = np.random.default_rng(0).random((6, 4, 5, 3))
    d = M.rgb_diff_frame(f)
    assert d.shape == (15, 4, 5)
    for t in range(5):
        for c in range(3):
            assert np.array_equal(d[3 * t + c], f[t + 1, :, :, c] - f[t, :, :, c])
    with pytest.raises(ValueError):
        M.rgb_diff_frame(f[:5])


def test_flow_input_frame_stacking_and_scaling():
    rng = np.random.default_rng(1)
    fields = [M.FlowField(rng.normal(size=(3, 3)) * 3, rng.normal(size=(3, 3)) * 3) for _ in range(5)]
    x = M.flow_input_frame(fields, bound=4.0)
    assert x.shape == (10, 3, 3)
    for t, f in enumerate(fields):
        assert np.allclose(x[2 * t], np.clip(f.u, -4, 4) / 4)
        assert np.allclose(x[2 * t + 1], np.clip(f.v, -4, 4) / 4)
    assert np.abs(x).max() <= 1
    with pytest.raises(ValueError):
        M.flow_input_frame(fields[:4])


def test_clip_to_modality_shapes_and_ranges():
    train, _ = _clips()
    c = train[0]
    assert M.clip_to_modality(c, "RGB", [0, 3, 7]).data.shape == (3, 3, 32, 32)
    d = M.clip_to_modality(c, "Diff", [0, 2])
    assert d.data.shape == (2, 15, 32, 32)
    assert np.array_equal(d.data[1], M.rgb_diff_frame(c.frames[2:8]).astype(np.float32))
    flows = np.zeros((7, 2, 32, 32), np.float32)
    assert M.clip_to_modality(c, "Flow", [0, 2], flows=flows).data.shape == (2, 10, 32, 32)
    with pytest.raises(IndexError):
        M.clip_to_modality(c, "Diff", [3])
    with pytest.raises(ValueError):
        M.ModalityTensor("Flow", np.zeros((2, 3, 4, 4)))


def test_store_batches_match_per_clip_assembly():
    train, _ = _clips()
    store = ClipStore(train, 8)
    items = np.array([1, 4])
    idx = np.array([[0, 1], [2, 1]])
    for mod in ("RGB", "Diff"):
        b = store.batch(mod, items, idx)
        for r, it in enumerate(items):
            ref = M.clip_to_modality(train[it], mod, idx[r]).data
            assert np.allclose(b[r], ref, atol=1e-6)
    with pytest.raises(IndexError):
        store.batch("Flow", items, np.array([[0, 3], [0, 0]]))


def test_flow_recovers_translation():
    # smooth texture shifted by a sub-pixel amount
    rng = np.random.default_rng(2)
    base = ndimage.gaussian_filter(rng.random((48, 48)), 2.0)
    base = (base - base.min()) / np.ptp(base)
    u_true, v_true = 1.3, -0.6
    moved = ndimage.shift(base, (v_true, u_true), order=3, mode="nearest")
    f = M.tvl1_flow(base, moved)
    inner = (slice(8, -8), slice(8, -8))
    assert abs(np.median(f.u[inner]) - u_true) < 0.1
    assert abs(np.median(f.v[inner]) - v_true) < 0.1


def test_flow_backends_agree():
    rng = np.random.default_rng(3)
    a = ndimage.gaussian_filter(rng.random((3, 24, 24)), (0, 1.5, 1.5))
    b = np.roll(a, 1, axis=2)
    p = M.TVL1Params(iterations=10)
    fast = M.tvl1_flow_batch(a, b, p, backend="numba")
    ref = M.tvl1_flow_batch(a, b, p, backend="numpy")
    assert np.abs(fast - ref).max() < 1e-9
    with pytest.raises(ValueError):
        M.tvl1_flow_batch(a, b, p, backend="cuda")
    with pytest.raises(ValueError):
        M.tvl1_flow_batch(a, b[:2], p)


def test_flow_static_is_zero():
    train, _ = _clips(static=True, num_clips_train=8)
    flow = M.clip_flows(train[0].frames)
    assert flow.shape == (7, 2, 32, 32)
    assert np.abs(flow).mean() < 1e-2


def test_flow_cache_roundtrip(tmp_path):
    train, _ = _clips()
    c = train[0]
    first = M.cached_clip_flows(c.frames, tmp_path)
    path = M.flow_cache_path(tmp_path, c.frames)
    assert path.exists()
    # a cached hit returns the stored tensor without recomputation
    again = M.cached_clip_flows(c.frames, tmp_path)
    assert np.array_equal(first, again)
    assert M.flow_cache_path(tmp_path, c.frames, M.TVL1Params(lam=0.2)) != path


def test_dataset_flow_cache_is_reused(tmp_path):
    cfg = DatasetConfig(num_clips_train=4, num_clips_val=2, t_total=7, height=16, width=16, seed=5)
    ds = build_dataset(cfg, cache_dir=tmp_path)
    f1 = ds.train.flows
    assert len(list((tmp_path / "train").glob("flow_*.mml"))) == 4
    ds2 = build_dataset(cfg, cache_dir=tmp_path)
    assert np.array_equal(ds2.train.flows, f1)
    x = ds2.train.batch("Flow", [0, 1], np.array([[0, 1], [1, 0]]))
    assert x.shape == (2, 2, 10, 16, 16) and np.abs(x).max() <= 1
