"""Network layers against direct-convolution and finite-difference oracles.

Layers run channels-last (N, H, W, C). All gradient checks use float64 and
central differences; the ELU activation is smooth enough that 1e-4 relative
agreement is attainable.
"""

import numpy as np
import pytest

from garmentlab.nn import (Adam, Bilinear, Conv2d, ELU, Param, Sequential,
                           flatten_params, load_flat, numeric_gradient)


def conv_reference(x, w, b, stride, pad):
    """Direct nested-loop convolution; x is (N, H, W, C), w (Cout, Cin, k, k)."""
    n, h, wd, cin = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, i * stride:i * stride + k,
                               j * stride:j * stride + k, :]
                    out[ni, i, j, co] = np.sum(
                        patch * w[co].transpose(1, 2, 0)) + b[co]
    return out


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


@pytest.mark.parametrize("stride,k,pad", [(1, 3, 1), (2, 3, 1), (1, 1, 0)])
def test_conv_forward_matches_direct_convolution(stride, k, pad):
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 4, k=k, stride=stride, pad=pad, rng=rng,
                  dtype=np.float64)
    x = rng.normal(size=(2, 9, 11, 3))
    got = conv.forward(x)
    want = conv_reference(x, conv.w.data, conv.b.data, stride, pad)
    assert got.shape == want.shape
    assert rel_err(got, want) < 1e-12


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    conv = Conv2d(2, 3, k=3, stride=2, rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 8, 9, 2))
    r = rng.normal(size=conv.forward(x).shape)

    def loss():
        return float(np.sum(conv.forward(x) * r))

    conv.w.zero_grad()
    conv.b.zero_grad()
    conv.forward(x)
    gx = conv.backward(r.copy())
    assert rel_err(gx, numeric_gradient(loss, x)) < 1e-6
    assert rel_err(conv.w.grad, numeric_gradient(loss, conv.w.data)) < 1e-6
    assert rel_err(conv.b.grad, numeric_gradient(loss, conv.b.data)) < 1e-6


def test_pointwise_conv_gradients():
    rng = np.random.default_rng(8)
    conv = Conv2d(3, 2, k=1, pad=0, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 4, 5, 3))
    r = rng.normal(size=conv.forward(x).shape)

    def loss():
        return float(np.sum(conv.forward(x) * r))

    conv.w.zero_grad()
    conv.forward(x)
    gx = conv.backward(r.copy())
    assert rel_err(gx, numeric_gradient(loss, x)) < 1e-6
    assert rel_err(conv.w.grad, numeric_gradient(loss, conv.w.data)) < 1e-6


def test_elu_gradient_and_continuity():
    rng = np.random.default_rng(2)
    elu = ELU()
    x = rng.normal(size=(1, 5, 5, 2))
    x.ravel()[3] = 0.0        # kink sits exactly at zero; ELU is C1 there
    r = rng.normal(size=x.shape)

    def loss():
        return float(np.sum(elu.forward(x) * r))

    elu.forward(x)
    gx = elu.backward(r.copy())
    # the second derivative jumps at 0, so central differences only reach
    # O(step) accuracy at the kink itself; everywhere else they are ~1e-7
    assert rel_err(gx, numeric_gradient(loss, x)) < 1e-3
    away = np.abs(x) > 0.05
    num = numeric_gradient(loss, x)
    assert np.abs(gx - num)[away].max() < 1e-6


def test_bilinear_preserves_constant_and_ramp():
    up = Bilinear(12, 16)
    const = np.full((1, 6, 8, 1), 3.25)
    out = up.forward(const)
    assert np.allclose(out, 3.25, atol=1e-12)
    ramp = np.broadcast_to(np.arange(8, dtype=float)[None, None, :, None],
                           (1, 6, 8, 1)).copy()
    out = up.forward(ramp)
    # interior of an upsampled linear ramp is linear with half the slope
    inner = out[0, 6, 2:14, 0]
    assert np.allclose(np.diff(inner), 0.5, atol=1e-9)


def test_bilinear_backward_is_adjoint():
    rng = np.random.default_rng(3)
    up = Bilinear(10, 14)
    x = rng.normal(size=(1, 5, 6, 2))
    y = rng.normal(size=(1, 10, 14, 2))
    fx = up.forward(x)
    gy = up.backward(y.copy())
    assert np.sum(fx * y) == pytest.approx(np.sum(x * gy), rel=1e-12)


def test_stacked_network_gradient_check():
    rng = np.random.default_rng(4)
    net = Sequential(
        Conv2d(1, 3, k=3, stride=2, rng=rng, dtype=np.float64, name="c0"),
        ELU(),
        Conv2d(3, 2, k=3, stride=1, rng=rng, dtype=np.float64, name="c1"),
        ELU(),
        Bilinear(8, 10),
        Conv2d(2, 2, k=1, pad=0, rng=rng, dtype=np.float64, name="head"),
    )
    x = rng.normal(size=(1, 8, 10, 1))
    r = rng.normal(size=net.forward(x).shape)

    def loss():
        return float(np.sum(net.forward(x) * r))

    for p in net.params():
        p.zero_grad()
    net.forward(x)
    gx = net.backward(r.copy())
    assert rel_err(gx, numeric_gradient(loss, x)) < 1e-4
    for p in net.params():
        num = numeric_gradient(loss, p.data)
        assert rel_err(p.grad, num) < 1e-4, p.name


def test_adam_minimizes_quadratic():
    target = np.array([1.5, -2.0, 0.5])
    p = Param(np.zeros(3))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        p.grad += 2.0 * (p.data - target)
        opt.step()
    assert np.allclose(p.data, target, atol=1e-3)


def test_adam_weight_decay_shrinks_unused_weights():
    p = Param(np.full(4, 2.0))
    opt = Adam([p], lr=0.05, weight_decay=0.1)
    for _ in range(200):
        opt.zero_grad()     # gradient stays zero; only decay acts
        opt.step()
    assert np.abs(p.data).max() < 1.0


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Param(rng.normal(size=6).astype(np.float32))
        opt = Adam([p], lr=0.01)
        for i in range(50):
            opt.zero_grad()
            p.grad += np.sin(p.data + i).astype(np.float32)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_flatten_load_roundtrip_preserves_forward():
    rng = np.random.default_rng(6)
    net = Sequential(Conv2d(2, 3, rng=rng, name="a"), ELU(),
                     Conv2d(3, 2, rng=rng, name="b"))
    x = rng.normal(size=(1, 6, 7, 2)).astype(np.float32)
    y0 = net.forward(x)
    layout, flat = flatten_params(net.params())

    rng2 = np.random.default_rng(99)
    net2 = Sequential(Conv2d(2, 3, rng=rng2, name="a"), ELU(),
                      Conv2d(3, 2, rng=rng2, name="b"))
    assert not np.allclose(net2.forward(x), y0)
    load_flat(net2.params(), layout, flat)
    assert np.array_equal(net2.forward(x), y0)


def test_load_flat_validates_shapes():
    rng = np.random.default_rng(7)
    net = Sequential(Conv2d(2, 3, rng=rng))
    layout, flat = flatten_params(net.params())
    other = Sequential(Conv2d(2, 4, rng=rng))
    with pytest.raises(ValueError):
        load_flat(other.params(), layout, flat)
    with pytest.raises(ValueError):
        load_flat(net.params(), layout, flat[:-5])
