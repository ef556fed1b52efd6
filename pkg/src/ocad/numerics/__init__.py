from .adam import AdamState, adam_step
from .dft import dft2d, dft2d_magnitude, fft_rows
from .gradcheck import GradCheckReport, grad_check, l2_loss, sum_loss
from .layers import (
    ActivationTrace,
    LayerSpec,
    NetworkGraph,
    backward,
    conv2d,
    conv2d_transpose,
    flatten,
    forward,
    leaky_relu,
    linear,
    relu,
    sigmoid,
    spatial_norm,
    tanh,
)

__all__ = [
    "ActivationTrace", "AdamState", "GradCheckReport", "LayerSpec",
    "NetworkGraph", "adam_step", "backward", "conv2d", "conv2d_transpose",
    "dft2d", "dft2d_magnitude", "fft_rows", "flatten", "forward",
    "grad_check", "l2_loss", "leaky_relu", "linear", "relu", "sigmoid",
    "spatial_norm", "sum_loss", "tanh",
]
