"""Trainable parameter container and the Adam update."""

from __future__ import annotations

import numpy as np


class Param:
    """A named tensor with its gradient slot and per-parameter Adam state."""

    __slots__ = ("name", "value", "grad", "m", "v", "t")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = None
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, t={self.t})"


def adam_step(params, grads=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, one step over all given parameters.

    ``grads`` may be omitted, in which case each parameter's accumulated
    ``.grad`` is used (parameters with no gradient are skipped).
    """
    params = list(params)
    if grads is None:
        pairs = [(p, p.grad) for p in params if p.grad is not None]
    else:
        grads = list(grads)
        if len(grads) != len(params):
            raise ValueError(f"{len(params)} params but {len(grads)} grads")
        pairs = list(zip(params, grads))
    for p, g in pairs:
        if g.shape != p.value.shape:
            raise ValueError(
                f"grad shape {g.shape} does not match param {p.name} {p.value.shape}"
            )
        g = g.astype(p.value.dtype, copy=False)
        p.t += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.t)
        v_hat = p.v / (1.0 - beta2 ** p.t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
