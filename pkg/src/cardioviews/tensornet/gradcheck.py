"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


def _rel_err(a: float, n: float) -> float:
    denom = max(abs(a) + abs(n), 1e-8)
    return abs(a - n) / denom


def grad_check(layer, x, n_probes=20, eps=1e-5, seed=0, tolerance=None) -> float:
    """Compare a layer's backward pass against central differences.

    The scalar objective is ``sum(forward(x) * R)`` for a fixed random
    R. A random subset of input and parameter coordinates is probed.
    Run the layer in float64 for meaningful tolerances. Returns the max
    relative error; raises AssertionError if ``tolerance`` is given and
    exceeded.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)

    y = layer.forward(x, train=False)
    r = rng.standard_normal(y.shape)
    for p in layer.params():
        p.zero_grad()
    grad_x = layer.backward(r)

    def objective() -> float:
        return float((layer.forward(x, train=False) * r).sum())

    worst = 0.0
    targets = [("input", x, grad_x)]
    targets += [(p.name, p.value, p.grad) for p in layer.params()]
    for name, arr, analytic in targets:
        if analytic is None:
            raise AssertionError(f"no gradient produced for {name}")
        flat = arr.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        k = min(n_probes, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for idx in picks:
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = objective()
            flat[idx] = keep - eps
            lo = objective()
            flat[idx] = keep
            numeric = (hi - lo) / (2 * eps)
            worst = max(worst, _rel_err(float(aflat[idx]), numeric))
    if tolerance is not None and worst > tolerance:
        raise AssertionError(f"gradient check failed: {worst:.3e} > {tolerance:.1e}")
    return worst
