"""Photometric training loss: (1 - lambda) * L1 + lambda * (1 - SSIM)."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..metrics import ssim_with_grad
from ..scene_model import Frame


def photometric_loss(rendered, target, ssim_weight: float = 0.2):
    """Loss value and its per-pixel RGB gradient.

    ``rendered`` may be a :class:`Frame` or an ``(H, W, 3)`` array. SSIM is the
    channel-mean gray SSIM used by :func:`regionsplat.metrics.ssim`.
    """
    img = rendered.color if isinstance(rendered, Frame) else np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if img.shape != target.shape or img.ndim != 3:
        raise InvalidInputError(f"rendered {img.shape} and target {target.shape} must be equal HxWx3")
    diff = img - target
    n = diff.size
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - ssim_weight) * np.sign(diff) / n
    loss = (1.0 - ssim_weight) * l1
    if ssim_weight > 0:
        s, ds = ssim_with_grad(img.mean(axis=2), target.mean(axis=2))
        loss += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * ds[..., None] / 3.0
    return loss, grad
