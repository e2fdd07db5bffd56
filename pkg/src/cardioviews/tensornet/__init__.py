"""Minimal dense-tensor engine for the 3D networks.

Tensors are plain numpy arrays laid out ``(batch, channel, x, y, z)``.
Convolution is cross-correlation (no kernel flip) with zero padding.
Training runs in float32; gradient checking runs the same code in
float64.

A "layer" is anything with ``forward(x, train=False)``,
``backward(grad_out)`` (valid after a forward), and ``params()``
returning its :class:`Param` list. The network assembly in
:mod:`cardioviews.enet3d` is built from these pieces.
"""

from .ops import (
    conv3d_bwd,
    conv3d_fwd,
    conv3d_input_grad,
    pool3d,
    pool3d_bwd,
    prelu_bwd,
    prelu_fwd,
    unpool3d,
    unpool3d_bwd,
)
from .losses import masked_l2_loss, softmax_xent_loss
from .optim import Param, adam_step
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "conv3d_fwd", "conv3d_bwd", "conv3d_input_grad",
    "pool3d", "pool3d_bwd", "unpool3d", "unpool3d_bwd",
    "prelu_fwd", "prelu_bwd",
    "softmax_xent_loss", "masked_l2_loss",
    "Param", "adam_step", "grad_check",
    "save_checkpoint", "load_checkpoint",
]
