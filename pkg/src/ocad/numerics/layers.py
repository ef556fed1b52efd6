"""Sequential layer graphs with exact reverse-mode gradients.

Everything is double precision and single-sample (no batch axis): image
tensors are (C, H, W), vectors are (n,). The graph is a fixed ordered list
of layer specs; forward produces a trace holding every activation, backward
consumes the trace and a cotangent of the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = (
    "conv2d",
    "conv2d_transpose",
    "spatial_norm",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
    "flatten",
    "linear",
)

_NORM_EPS = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    Only the fields relevant to `kind` are meaningful; the rest stay None.
    """

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    pad: int | None = None
    negative_slope: float | None = None
    in_features: int | None = None
    out_features: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "conv2d_transpose"):
            if self.kernel is None or self.kernel < 1:
                raise ValueError(f"{self.kind}: kernel size must be >= 1")
            if self.stride is None or self.stride < 1:
                raise ValueError(f"{self.kind}: stride must be >= 1")
            if self.pad is None or self.pad < 0:
                raise ValueError(f"{self.kind}: pad must be >= 0")
            if not self.in_channels or not self.out_channels:
                raise ValueError(f"{self.kind}: channel counts required")
        if self.kind == "leaky_relu":
            s = self.negative_slope
            if s is None or not (0.0 < s < 1.0):
                raise ValueError("leaky_relu: negative slope must be in (0, 1)")
        if self.kind == "linear":
            if not self.in_features or not self.out_features:
                raise ValueError("linear: feature counts required")


def conv2d(in_channels, out_channels, kernel, stride, pad):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, pad=pad)


def conv2d_transpose(in_channels, out_channels, kernel, stride, pad):
    return LayerSpec("conv2d_transpose", in_channels=in_channels,
                     out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)


def spatial_norm():
    return LayerSpec("spatial_norm")


def leaky_relu(negative_slope=0.2):
    return LayerSpec("leaky_relu", negative_slope=negative_slope)


def relu():
    return LayerSpec("relu")


def tanh():
    return LayerSpec("tanh")


def sigmoid():
    return LayerSpec("sigmoid")


def flatten():
    return LayerSpec("flatten")


def linear(in_features, out_features):
    return LayerSpec("linear", in_features=in_features, out_features=out_features)


def _out_dim_conv(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _out_dim_tconv(n, k, s, p):
    return (n - 1) * s + k - 2 * p


def _infer_shape(spec: LayerSpec, shape: tuple, index: int) -> tuple:
    """Output shape of `spec` applied to input `shape`; raises on mismatch."""
    kind = spec.kind
    if kind in ("conv2d", "conv2d_transpose"):
        if len(shape) != 3:
            raise ValueError(f"layer {index} ({kind}): expected (C,H,W), got {shape}")
        c, h, w = shape
        if c != spec.in_channels:
            raise ValueError(
                f"layer {index} ({kind}): expected {spec.in_channels} input "
                f"channels, got {c}")
        out = _out_dim_conv if kind == "conv2d" else _out_dim_tconv
        ho = out(h, spec.kernel, spec.stride, spec.pad)
        wo = out(w, spec.kernel, spec.stride, spec.pad)
        if ho < 1 or wo < 1:
            raise ValueError(f"layer {index} ({kind}): output dims {ho}x{wo} < 1")
        return (spec.out_channels, ho, wo)
    if kind == "spatial_norm":
        if len(shape) != 3:
            raise ValueError(f"layer {index} (spatial_norm): expected (C,H,W)")
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if shape != (spec.in_features,):
            raise ValueError(
                f"layer {index} (linear): expected ({spec.in_features},), got {shape}")
        return (spec.out_features,)
    return shape  # elementwise activations


class NetworkGraph:
    """Ordered layer stack with parameters initialized from a seed.

    Weights are N(0, 0.02) Gaussians (DCGAN convention), biases zero,
    norm scale one / shift zero. Two graphs built from the same seed and
    specs carry bit-identical parameters.
    """

    def __init__(self, input_shape, specs, seed=0):
        self.input_shape = tuple(int(d) for d in input_shape)
        if any(d < 1 for d in self.input_shape):
            raise ValueError(f"invalid input shape {input_shape}")
        self.specs = list(specs)
        self.seed = int(seed)
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            shape = _infer_shape(spec, shape, i)
            self.shapes.append(shape)
        self.output_shape = shape
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(self.seed)
        for i, spec in enumerate(self.specs):
            k = spec.kernel
            if spec.kind == "conv2d":
                self.params[f"L{i}.weight"] = rng.normal(
                    0.0, 0.02, (spec.out_channels, spec.in_channels, k, k))
                self.params[f"L{i}.bias"] = np.zeros(spec.out_channels)
            elif spec.kind == "conv2d_transpose":
                self.params[f"L{i}.weight"] = rng.normal(
                    0.0, 0.02, (spec.in_channels, spec.out_channels, k, k))
                self.params[f"L{i}.bias"] = np.zeros(spec.out_channels)
            elif spec.kind == "spatial_norm":
                c = self.shapes[i][0]
                self.params[f"L{i}.gamma"] = np.ones(c)
                self.params[f"L{i}.beta"] = np.zeros(c)
            elif spec.kind == "linear":
                self.params[f"L{i}.weight"] = rng.normal(
                    0.0, 0.02, (spec.out_features, spec.in_features))
                self.params[f"L{i}.bias"] = np.zeros(spec.out_features)

    def param_names(self):
        return list(self.params.keys())


@dataclass
class ActivationTrace:
    """Per-layer outputs plus the auxiliaries backward needs."""

    acts: list = field(default_factory=list)   # len = n_layers + 1, acts[0] = input
    aux: list = field(default_factory=list)    # len = n_layers

    @property
    def output(self):
        return self.acts[-1]


def _im2col(xp, k, s, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols, c, hp, wp, k, s, ho, wo):
    xp = np.zeros((c, hp, wp))
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + s * ho:s, j:j + s * wo:s] += cols[:, i, j]
    return xp


def _conv_forward(x, w, b, s, p):
    co, ci, k, _ = w.shape
    _, h, wdt = x.shape
    ho, wo = _out_dim_conv(h, k, s, p), _out_dim_conv(wdt, k, s, p)
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k, s, ho, wo)
    y = (w.reshape(co, ci * k * k) @ cols + b[:, None]).reshape(co, ho, wo)
    return y, cols


def _conv_backward(x, w, s, p, cols, gy):
    co, ci, k, _ = w.shape
    _, h, wdt = x.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gy_flat = gy.reshape(co, ho * wo)
    gw = (gy_flat @ cols.T).reshape(w.shape)
    gb = gy_flat.sum(axis=1)
    gcols = w.reshape(co, ci * k * k).T @ gy_flat
    gxp = _col2im(gcols, ci, h + 2 * p, wdt + 2 * p, k, s, ho, wo)
    gx = gxp[:, p:p + h, p:p + wdt] if p else gxp
    return gx, gw, gb


def _tconv_forward(x, w, b, s, p):
    # adjoint of _conv_forward: scatter x through the kernel taps
    ci, co, k, _ = w.shape
    _, h, wdt = x.shape
    ho, wo = _out_dim_tconv(h, k, s, p), _out_dim_tconv(wdt, k, s, p)
    x_flat = x.reshape(ci, h * wdt)
    gcols = w.reshape(ci, co * k * k).T @ x_flat
    yp = _col2im(gcols, co, ho + 2 * p, wo + 2 * p, k, s, h, wdt)
    y = yp[:, p:p + ho, p:p + wo] if p else yp
    return y + b[:, None, None]


def _tconv_backward(x, w, s, p, gy):
    ci, co, k, _ = w.shape
    _, h, wdt = x.shape
    gyp = np.pad(gy, ((0, 0), (p, p), (p, p))) if p else gy
    cols = _im2col(gyp, k, s, h, wdt)
    gx = (w.reshape(ci, co * k * k) @ cols).reshape(x.shape)
    gw = (x.reshape(ci, h * wdt) @ cols.T).reshape(w.shape)
    gb = gy.sum(axis=(1, 2))
    return gx, gw, gb


def forward(net: NetworkGraph, x: np.ndarray) -> ActivationTrace:
    """Run the graph on `x`, retaining everything backward needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(
            f"layer 0: input shape {x.shape} does not match declared "
            f"{net.input_shape}")
    trace = ActivationTrace(acts=[x])
    for i, spec in enumerate(net.specs):
        kind = spec.kind
        aux = None
        if kind == "conv2d":
            y, cols = _conv_forward(x, net.params[f"L{i}.weight"],
                                    net.params[f"L{i}.bias"], spec.stride, spec.pad)
            aux = cols
        elif kind == "conv2d_transpose":
            y = _tconv_forward(x, net.params[f"L{i}.weight"],
                               net.params[f"L{i}.bias"], spec.stride, spec.pad)
        elif kind == "spatial_norm":
            mu = x.mean(axis=(1, 2), keepdims=True)
            var = x.var(axis=(1, 2), keepdims=True)
            inv_std = 1.0 / np.sqrt(var + _NORM_EPS)
            xhat = (x - mu) * inv_std
            g = net.params[f"L{i}.gamma"][:, None, None]
            y = g * xhat + net.params[f"L{i}.beta"][:, None, None]
            aux = (xhat, inv_std)
        elif kind == "leaky_relu":
            y = np.where(x >= 0, x, spec.negative_slope * x)
        elif kind == "relu":
            y = np.maximum(x, 0.0)
        elif kind == "tanh":
            y = np.tanh(x)
        elif kind == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-x))
        elif kind == "flatten":
            y = x.reshape(-1)
        elif kind == "linear":
            y = net.params[f"L{i}.weight"] @ x + net.params[f"L{i}.bias"]
        trace.acts.append(y)
        trace.aux.append(aux)
        x = y
    return trace


def backward(net: NetworkGraph, trace: ActivationTrace, output_grad: np.ndarray,
             from_layer: int | None = None):
    """Reverse-mode gradients of the scalar implied by `output_grad`.

    `from_layer` injects the cotangent at the output of that layer instead
    of the graph output (used for feature-matching losses). Returns
    (param_grads, input_grad).
    """
    n = len(net.specs)
    if len(trace.acts) != n + 1:
        raise ValueError("trace does not match network")
    last = n - 1 if from_layer is None else from_layer
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.acts[last + 1].shape:
        raise ValueError(
            f"output_grad shape {g.shape} does not match activation "
            f"{trace.acts[last + 1].shape}")
    param_grads: dict[str, np.ndarray] = {}
    for i in range(last, -1, -1):
        spec = net.specs[i]
        kind = spec.kind
        x = trace.acts[i]
        y = trace.acts[i + 1]
        if kind == "conv2d":
            g, gw, gb = _conv_backward(x, net.params[f"L{i}.weight"], spec.stride,
                                       spec.pad, trace.aux[i], g)
            param_grads[f"L{i}.weight"] = gw
            param_grads[f"L{i}.bias"] = gb
        elif kind == "conv2d_transpose":
            g, gw, gb = _tconv_backward(x, net.params[f"L{i}.weight"], spec.stride,
                                        spec.pad, g)
            param_grads[f"L{i}.weight"] = gw
            param_grads[f"L{i}.bias"] = gb
        elif kind == "spatial_norm":
            xhat, inv_std = trace.aux[i]
            gamma = net.params[f"L{i}.gamma"][:, None, None]
            param_grads[f"L{i}.gamma"] = (g * xhat).sum(axis=(1, 2))
            param_grads[f"L{i}.beta"] = g.sum(axis=(1, 2))
            gxhat = g * gamma
            m = xhat.shape[1] * xhat.shape[2]
            g = (inv_std / m) * (m * gxhat
                                 - gxhat.sum(axis=(1, 2), keepdims=True)
                                 - xhat * (gxhat * xhat).sum(axis=(1, 2),
                                                             keepdims=True))
        elif kind == "leaky_relu":
            g = np.where(x >= 0, g, spec.negative_slope * g)
        elif kind == "relu":
            g = np.where(x > 0, g, 0.0)
        elif kind == "tanh":
            g = g * (1.0 - y * y)
        elif kind == "sigmoid":
            g = g * y * (1.0 - y)
        elif kind == "flatten":
            g = g.reshape(x.shape)
        elif kind == "linear":
            param_grads[f"L{i}.weight"] = np.outer(g, x)
            param_grads[f"L{i}.bias"] = g.copy()
            g = net.params[f"L{i}.weight"].T @ g
    # parameters past the injection point get zero gradient
    for name, p in net.params.items():
        if name not in param_grads:
            param_grads[name] = np.zeros_like(p)
    return param_grads, g
