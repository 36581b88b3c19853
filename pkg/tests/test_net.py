import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mml import net


def naive_shift(x, fraction):
    """Index-by-index oracle on [B, T, C, ...]."""
    B, T, C = x.shape[:3]
    fold = int(round(fraction * C))
    out = np.zeros_like(x)
    for b in range(B):
        for t in range(T):
            for c in range(C):
                if c < fold:
                    if t - 1 >= 0:
                        out[b, t, c] = x[b, t - 1, c]
                elif c < 2 * fold:
                    if t + 1 < T:
                        out[b, t, c] = x[b, t + 1, c]
                else:
                    out[b, t, c] = x[b, t, c]
    return out


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _fd_check(f, x, grad, h=1e-6, n=40, seed=0):
    """Central differences on a random subset of coordinates."""
    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    idx = rng.choice(flat.size, size=min(n, flat.size), replace=False)
    num, ana = [], []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        num.append((fp - fm) / (2 * h))
        ana.append(grad.reshape(-1)[i])
    return _rel(np.array(ana), np.array(num))


# --------------------------------------------------------------------------- shift

def test_shift_matches_oracle():
    x = np.random.default_rng(0).normal(size=(2, 5, 8, 3, 3))
    assert np.array_equal(net.temporal_shift(x, 1 / 8), naive_shift(x, 1 / 8))
    assert np.array_equal(net.temporal_shift(x, 1 / 4), naive_shift(x, 1 / 4))


def test_shift_boundaries_are_zero():
    x = np.ones((1, 4, 8, 2, 2))
    y = net.temporal_shift(x, 1 / 4)
    assert np.all(y[:, 0, :2] == 0)
    assert np.all(y[:, -1, 2:4] == 0)
    assert np.all(y[:, 1:-1] == 1)


def test_shift_reverse_is_adjoint():
    rng = np.random.default_rng(1)
    x, g = rng.normal(size=(2, 6, 8, 2, 2)), rng.normal(size=(2, 6, 8, 2, 2))
    lhs = (net.temporal_shift(x, 1 / 8) * g).sum()
    rhs = (x * net.temporal_shift(g, 1 / 8, reverse=True)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_shift_explicit_time_axis():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 3, 3, 8))  # B, T, H, W, C
    ref = naive_shift(x.transpose(0, 1, 4, 2, 3), 1 / 4).transpose(0, 1, 3, 4, 2)
    assert np.array_equal(net.temporal_shift(x, 1 / 4, channel_axis=4, time_axis=1), ref)


def test_shift_rejects_fractional_fold():
    with pytest.raises(ValueError):
        net.temporal_shift(np.zeros((1, 3, 6, 2, 2)), 1 / 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_shift_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 4, 8, 2, 2))
    lhs = net.temporal_shift(a * x + b * y, 1 / 8)
    rhs = a * net.temporal_shift(x, 1 / 8) + b * net.temporal_shift(y, 1 / 8)
    assert np.allclose(lhs, rhs, atol=1e-6)


# --------------------------------------------------------------------------- layers

def test_conv_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 5, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride in (1, 2):
        out, _ = net.conv_forward(x, w, stride)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        Ho = out.shape[1]
        ref = np.zeros_like(out)
        for n in range(2):
            for i in range(Ho):
                for j in range(Ho):
                    patch = xp[n, i * stride:i * stride + 3, j * stride:j * stride + 3, :]  # kh, kw, C
                    for o in range(4):
                        ref[n, i, j, o] = (patch.transpose(2, 0, 1) * w[o]).sum()
        assert np.allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_fd(stride):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    g = rng.normal(size=net.conv_forward(x, w, stride)[0].shape)
    out, cols = net.conv_forward(x, w, stride)
    dx, dw = net.conv_backward(g, cols, x.shape, w, stride)
    f = lambda: (net.conv_forward(x, w, stride)[0] * g).sum()
    assert _fd_check(f, x, dx) < 1e-6
    assert _fd_check(f, w, dw) < 1e-6


@pytest.mark.parametrize("training", [True, False])
def test_bn_backward_fd(training):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 4, 5))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    mean, var = rng.normal(size=5), rng.uniform(0.5, 2, 5)
    go = rng.normal(size=x.shape)

    def f():
        return (net.bn_forward(x, gamma, beta, mean, var, 1e-5, training)[0] * go).sum()

    _, cache = net.bn_forward(x, gamma, beta, mean, var, 1e-5, training)
    dx, dgamma, dbeta = net.bn_backward(go, gamma, cache, training)
    assert _fd_check(f, x, dx) < 1e-5
    assert _fd_check(f, gamma, dgamma) < 1e-6
    assert _fd_check(f, beta, dbeta) < 1e-6


def _tiny(**kw):
    d = dict(input_channels=3, n_in=4, n_cls=5, widths=(8, 8, 16), strides=(1, 2, 2))
    d.update(kw)
    return net.ModelSpec(**d)


@pytest.mark.parametrize("training", [True, False])
def test_network_gradient_fd(training):
    spec = _tiny()
    w = net.init_weights(spec, 0, dtype=np.float64)
    rng = np.random.default_rng(6)
    for k in w:
        if k.endswith("running_var"):
            w[k] = rng.uniform(0.5, 2, w[k].shape)
        elif k.endswith("running_mean") or k.startswith("bn") or k == "fc.bias":
            w[k] = w[k] + rng.normal(scale=0.1, size=w[k].shape)
    x = rng.normal(size=(2, 4, 3, 8, 8))
    gl = rng.normal(size=(2, 5))
    gf = rng.normal(size=(2, 16))

    def f():
        lo, fe = net.forward(w, spec, x, training=training)
        return (lo * gl).sum() + (fe * gf).sum()

    grads = net.backward(w, spec, x, gl, gf, training=training)
    for name, g in grads.items():
        assert _fd_check(f, w[name], g, n=25) < 1e-4, name


def test_logits_depend_on_neighbouring_frames():
    # would fail if the shift acted along a spatial axis
    spec = _tiny()
    w = net.init_weights(spec, 1, dtype=np.float64)
    x = np.random.default_rng(7).normal(size=(1, 4, 3, 8, 8))
    swapped = x[:, [1, 0, 2, 3]]
    a = net.forward(w, spec, x)[0]
    b = net.forward(w, spec, swapped)[0]
    assert np.abs(a - b).max() > 1e-6
    no_shift = _tiny(shift_fraction=0.0)
    w0 = net.init_weights(no_shift, 1, dtype=np.float64)
    assert np.allclose(net.forward(w0, no_shift, x)[0], net.forward(w0, no_shift, swapped)[0], atol=1e-10)


def test_forward_single_clip_and_batch_agree():
    spec = _tiny()
    w = net.init_weights(spec, 2)
    x = np.random.default_rng(8).random((3, 4, 3, 8, 8)).astype(np.float32)
    lb, fb = net.forward(w, spec, x)
    l1, f1 = net.forward(w, spec, x[1])
    assert l1.shape == (5,) and f1.shape == (16,)
    assert np.allclose(lb[1], l1, atol=1e-5)


def test_forward_rejects_wrong_channels():
    spec = _tiny()
    w = net.init_weights(spec, 0)
    with pytest.raises(ValueError):
        net.forward(w, spec, np.zeros((4, 10, 8, 8), np.float32))


def test_running_stats_update():
    spec = _tiny()
    w = net.init_weights(spec, 0, dtype=np.float64)
    x = np.random.default_rng(9).normal(size=(2, 4, 3, 8, 8))
    _, _, cache = net.forward(w, spec, x, training=True, return_cache=True)
    mu, var, count = cache.batch_stats[0]
    net.update_running_stats(w, spec, cache)
    assert np.allclose(w["bn0.running_mean"], 0.1 * mu)
    assert np.allclose(w["bn0.running_var"], 0.9 + 0.1 * var * count / (count - 1))


def test_init_is_seeded_and_shaped():
    spec = _tiny()
    a, b, c = net.init_weights(spec, 3), net.init_weights(spec, 3), net.init_weights(spec, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv0.weight"], c["conv0.weight"])
    net.validate_weights(a, spec)
    assert {k: v.shape for k, v in a.items()} == net.expected_shapes(spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        _tiny(widths=(6, 8, 16))  # 6/8 channels is not an integer fold
    with pytest.raises(ValueError):
        _tiny(strides=(1, 2))
    with pytest.raises(ValueError):
        _tiny(head="tanh")


# --------------------------------------------------------------------------- first-conv transfer

def test_adapt_first_conv_slices_equal_mean():
    w = np.random.default_rng(10).normal(size=(8, 3, 3, 3))
    out = net.adapt_first_conv(w, 10)
    mean = (w[:, 0] + w[:, 1] + w[:, 2]) / 3
    assert out.shape == (8, 10, 3, 3)
    for i in range(10):
        assert np.array_equal(out[:, i], out[:, 0])
        assert np.allclose(out[:, i], mean, atol=1e-15)


def test_adapt_first_conv_equal_channel_identity():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(4, 3, 3, 3))
    g = rng.normal(size=(1, 6, 6, 1))
    x = np.repeat(g, 3, axis=3)
    a, _ = net.conv_forward(x, w, 1)
    b, _ = net.conv_forward(x, net.adapt_first_conv(w, 3), 1)
    assert np.allclose(a, b, atol=1e-5)


def test_adapt_first_conv_rejects_non_rgb_unless_allowed():
    w = np.zeros((4, 10, 3, 3))
    with pytest.raises(ValueError):
        net.adapt_first_conv(w, 3)
    assert net.adapt_first_conv(w, 3, allow_any_source=True).shape == (4, 3, 3, 3)


def test_transfer_weights_keeps_everything_but_first_conv():
    spec = _tiny()
    src = net.init_weights(spec, 0)
    dst = net.transfer_weights(src, spec.with_channels(15))
    assert dst["conv0.weight"].shape == (8, 15, 3, 3)
    for k in src:
        if k != "conv0.weight":
            assert np.array_equal(src[k], dst[k])
    with pytest.raises(ValueError):
        net.transfer_weights(src, _tiny(widths=(8, 16, 16)))
