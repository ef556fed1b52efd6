import numpy as np
import pytest

from ocad.numerics import (
    LayerSpec,
    NetworkGraph,
    backward,
    conv2d,
    conv2d_transpose,
    flatten,
    forward,
    grad_check,
    leaky_relu,
    linear,
    relu,
    sigmoid,
    spatial_norm,
    tanh,
)
from ocad.numerics.layers import _conv_forward, _tconv_forward


def _randomize(net, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for k in net.params:
        net.params[k] = rng.normal(0.0, scale, net.params[k].shape)


def test_identity_kernel_conv_is_identity():
    net = NetworkGraph((1, 5, 5), [conv2d(1, 1, 1, 1, 0)], seed=0)
    net.params["L0.weight"][:] = 1.0
    x = np.arange(25.0).reshape(1, 5, 5)
    assert np.array_equal(forward(net, x).output, x)


def test_tanh_of_zero_is_zero():
    net = NetworkGraph((1, 4, 4), [tanh()], seed=0)
    out = forward(net, np.zeros((1, 4, 4))).output
    assert np.array_equal(out, np.zeros((1, 4, 4)))


def test_ones_kernel_on_constant_image():
    # 3x3 all-ones kernel, stride 1, pad 1 on constant c: interior pixels = 9c
    c = 2.5
    net = NetworkGraph((1, 6, 6), [conv2d(1, 1, 3, 1, 1)], seed=0)
    net.params["L0.weight"][:] = 1.0
    y = forward(net, np.full((1, 6, 6), c)).output
    assert np.allclose(y[0, 1:-1, 1:-1], 9 * c)
    assert np.allclose(y[0, 0, 0], 4 * c)


def test_forward_rejects_shape_mismatch_with_layer_index():
    net = NetworkGraph((1, 8, 8), [conv2d(1, 2, 3, 1, 1)], seed=0)
    with pytest.raises(ValueError, match="layer 0"):
        forward(net, np.zeros((1, 4, 4)))


def test_bad_specs_rejected():
    with pytest.raises(ValueError):
        LayerSpec("conv2d", in_channels=1, out_channels=1, kernel=0, stride=1, pad=0)
    with pytest.raises(ValueError):
        LayerSpec("leaky_relu", negative_slope=1.5)
    with pytest.raises(ValueError):
        LayerSpec("wat")
    with pytest.raises(ValueError, match="layer 0"):
        # 3x3 input with 4x4 kernel and no padding: output dim < 1
        NetworkGraph((1, 3, 3), [conv2d(1, 1, 4, 1, 0)], seed=0)


def test_same_seed_gives_bit_identical_parameters():
    specs = [conv2d(1, 4, 3, 2, 1), spatial_norm(), leaky_relu(0.2),
             flatten(), linear(64, 5)]
    a = NetworkGraph((1, 8, 8), specs, seed=42)
    b = NetworkGraph((1, 8, 8), specs, seed=42)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_linear_layer_analytic_gradient():
    # y = Wx, loss = 0.5 ||y||^2: dW = y x^T, dx = W^T y
    net = NetworkGraph((4,), [linear(4, 3)], seed=1)
    _randomize(net, 7)
    x = np.arange(1.0, 5.0)
    tr = forward(net, x)
    y = tr.output - net.params["L0.bias"]
    y_full = tr.output
    grads, gx = backward(net, tr, y_full)
    w = net.params["L0.weight"]
    assert np.allclose(grads["L0.weight"], np.outer(y_full, x))
    assert np.allclose(gx, w.T @ y_full)


def test_zero_cotangent_gives_zero_gradients():
    net = NetworkGraph((1, 8, 8),
                       [conv2d(1, 2, 3, 2, 1), spatial_norm(), relu()], seed=2)
    _randomize(net, 3)
    tr = forward(net, np.random.default_rng(0).normal(size=(1, 8, 8)))
    grads, gx = backward(net, tr, np.zeros_like(tr.output))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(gx == 0)


def test_backward_rejects_bad_cotangent_shape():
    net = NetworkGraph((1, 8, 8), [conv2d(1, 2, 3, 2, 1)], seed=2)
    tr = forward(net, np.zeros((1, 8, 8)))
    with pytest.raises(ValueError, match="output_grad"):
        backward(net, tr, np.zeros((2, 5, 5)))


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_conv_net_matches_finite_differences(seed):
    net = NetworkGraph(
        (1, 8, 8),
        [conv2d(1, 3, 3, 1, 1), leaky_relu(0.2), conv2d(3, 2, 3, 2, 1), tanh()],
        seed=seed)
    _randomize(net, seed + 100)
    x = np.random.default_rng(seed).normal(size=(1, 8, 8))
    report = grad_check(net, x, tolerance=1e-4)
    assert report.passed, (report.worst_param, report.max_rel_err)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("specs,in_shape", [
    ([conv2d(2, 3, 4, 2, 1)], (2, 8, 8)),
    ([conv2d_transpose(3, 2, 4, 2, 1)], (3, 4, 4)),
    ([conv2d(1, 2, 3, 1, 1), spatial_norm(), leaky_relu(0.2)], (1, 6, 6)),
    ([relu()], (2, 5, 5)),
    ([tanh()], (2, 5, 5)),
    ([sigmoid()], (2, 5, 5)),
    ([flatten(), linear(18, 4)], (2, 3, 3)),
])
def test_every_layer_kind_matches_finite_differences(specs, in_shape, seed):
    net = NetworkGraph(in_shape, specs, seed=seed)
    _randomize(net, seed + 50)
    x = np.random.default_rng(seed + 1).normal(size=in_shape)
    report = grad_check(net, x, tolerance=1e-4)
    assert report.passed, (report.worst_param, report.max_rel_err)


def test_conv_transpose_adjointness():
    # <conv(x, w), y> == <x, conv_transpose(y, w)> to 1e-10
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(3, 2, 4, 4))
        y, _ = _conv_forward(x, w, np.zeros(3), 2, 1)
        u = rng.normal(size=y.shape)
        xt = _tconv_forward(u, w, np.zeros(2), 2, 1)
        assert abs(np.sum(y * u) - np.sum(x * xt)) < 1e-10


def test_spatial_norm_standardizes_per_channel():
    net = NetworkGraph((3, 8, 8), [spatial_norm()], seed=0)
    x = np.random.default_rng(5).normal(2.0, 3.0, (3, 8, 8))
    y = forward(net, x).output  # gamma=1, beta=0: raw standardized output
    for c in range(3):
        assert abs(y[c].mean()) < 1e-6
        assert abs(y[c].var() - 1.0) < 1e-6


def test_forward_backward_deterministic():
    specs = [conv2d(1, 4, 4, 2, 1), spatial_norm(), leaky_relu(0.2),
             conv2d(4, 2, 4, 2, 1), tanh()]
    x = np.random.default_rng(9).normal(size=(1, 16, 16))
    outs = []
    for _ in range(2):
        net = NetworkGraph((1, 16, 16), specs, seed=13)
        tr = forward(net, x)
        grads, gx = backward(net, tr, np.ones_like(tr.output))
        outs.append((tr.output, grads, gx))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][2], outs[1][2])
    for k in outs[0][1]:
        assert np.array_equal(outs[0][1][k], outs[1][1][k])


def test_all_finite_after_forward_backward():
    net = NetworkGraph((1, 16, 16),
                       [conv2d(1, 4, 4, 2, 1), spatial_norm(), leaky_relu(0.2),
                        conv2d(4, 8, 4, 2, 1), spatial_norm(), relu(),
                        flatten(), linear(128, 10), sigmoid()], seed=21)
    x = np.random.default_rng(2).normal(size=(1, 16, 16))
    tr = forward(net, x)
    grads, gx = backward(net, tr, np.ones_like(tr.output))
    assert all(np.all(np.isfinite(a)) for a in tr.acts)
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    assert np.all(np.isfinite(gx))
