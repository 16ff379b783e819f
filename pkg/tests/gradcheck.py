"""Central finite-difference checks of the analytic backward pass."""

import numpy as np

from regionsplat.rasterizer import render_with_context
from regionsplat.scene_model import GaussianCloud
from regionsplat.trainer.backward import backward

from conftest import make_camera, random_cloud

GROUPS = GaussianCloud.FIELDS


def linear_loss(camera, cloud, weights):
    frame, _ = render_with_context(camera, cloud, need_geometry=False)
    return float(np.sum(frame.color * weights))


def _central(camera, cloud, weights, group, idx, h):
    base = getattr(cloud, group)
    vals = []
    for sign in (1, -1):
        arr = base.copy()
        arr[idx] += sign * h
        vals.append(linear_loss(camera, cloud.replace(**{group: arr}), weights))
    return (vals[0] - vals[1]) / (2 * h)


def numeric_grad(camera, cloud, weights, group, h=1e-4, with_kinks=False):
    """Central differences; with ``with_kinks`` also flag entries whose step
    straddles a discontinuity of the renderer (alpha cut-off, opacity clamp,
    culling), detected as disagreement with the ``h / 4`` estimate."""
    base = getattr(cloud, group)
    out = np.zeros_like(base)
    kinks = np.zeros(base.shape, dtype=bool)
    for idx in np.ndindex(base.shape):
        out[idx] = _central(camera, cloud, weights, group, idx, h)
        if with_kinks:
            fine = _central(camera, cloud, weights, group, idx, h / 4)
            kinks[idx] = abs(fine - out[idx]) > 1e-2 * max(abs(fine), abs(out[idx]), 1e-4)
    return (out, kinks) if with_kinks else out


def analytic_grads(camera, cloud, weights):
    _, ctx = render_with_context(camera, cloud, need_geometry=False)
    return backward(camera, cloud, weights, ctx).as_dict()


def relative_error(a, b, floor=1e-6):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def random_config(seed, size=32):
    """A well-conditioned random scene: 1 to 4 Gaussians in front of a 32x32 camera."""
    rng = np.random.default_rng(seed)
    cam = make_camera(width=size, height=size, position=rng.uniform(-0.2, 0.2, 3),
                      target=(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 5.0))
    n = int(rng.integers(1, 5))
    cloud = random_cloud(rng, n, depth=(3.5, 6.5), spread=0.8, scale=(0.15, 0.5))
    cloud = cloud.replace(opacity_logits=rng.uniform(-1.5, 1.5, n), colors=rng.uniform(0.05, 0.95, (n, 3)))
    weights = rng.standard_normal((size, size, 3))
    return cam, cloud, weights


def check_config(seed, h=1e-4):
    """Relative error per parameter group for one random configuration, or
    ``None`` when a finite-difference step crosses a renderer discontinuity."""
    cam, cloud, w = random_config(seed)
    ana = analytic_grads(cam, cloud, w)
    errs = {}
    for g in GROUPS:
        num, kinks = numeric_grad(cam, cloud, w, g, h, with_kinks=True)
        if kinks.any():
            return None
        errs[g] = relative_error(ana[g], num)
    return errs
