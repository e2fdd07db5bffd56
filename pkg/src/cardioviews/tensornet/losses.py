"""The two training losses, each returning (scalar, gradient wrt prediction)."""

from __future__ import annotations

import numpy as np


def softmax_xent_loss(logits: np.ndarray, targets: np.ndarray):
    """Per-voxel softmax cross-entropy, averaged over batch and voxels.

    logits: (B, K, X, Y, Z); targets: (B, X, Y, Z) integer class labels.
    """
    if logits.ndim != 5:
        raise ValueError(f"logits must be (B, K, X, Y, Z), got {logits.shape}")
    B, K = logits.shape[:2]
    if targets.shape != (B,) + logits.shape[2:]:
        raise ValueError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    t = np.asarray(targets)
    if t.min() < 0 or t.max() >= K:
        raise ValueError(f"target label outside [0, {K})")

    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = t.size
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    loss = -float(picked.sum(dtype=np.float64)) / n

    grad = np.exp(logp)
    np.put_along_axis(
        grad, t[:, None],
        np.take_along_axis(grad, t[:, None], axis=1) - 1.0, axis=1,
    )
    return loss, grad / n


def masked_l2_loss(pred: np.ndarray, target: np.ndarray, channel_mask: np.ndarray):
    """Squared error over unmasked channels only.

    pred/target: (B, C, X, Y, Z); channel_mask: (B, C) or (C,) booleans,
    True meaning the channel carries an annotation. The sum of squares is
    divided by (number of unmasked channels * voxels per channel) and is
    0 when everything is masked; masked channels get zero gradient.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    B, C = pred.shape[:2]
    mask = np.asarray(channel_mask, dtype=bool)
    if mask.shape == (C,):
        mask = np.broadcast_to(mask, (B, C))
    if mask.shape != (B, C):
        raise ValueError(f"channel_mask shape {mask.shape} is neither (C,) nor (B, C)")

    n_active = int(mask.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(pred)
    vox = int(np.prod(pred.shape[2:]))
    m = mask.reshape(B, C, 1, 1, 1).astype(pred.dtype)
    diff = (pred - target) * m
    denom = n_active * vox
    loss = float(np.square(diff).sum(dtype=np.float64)) / denom
    return loss, (2.0 / denom) * diff
