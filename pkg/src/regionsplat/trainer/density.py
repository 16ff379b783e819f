"""Position-aware scale factor and adaptive density control."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import InvalidInputError, TrainingCollapseError
from ..scene_model import GaussianCloud, logit

SPLIT_SHRINK = 1.6
PERCENT_DENSE = 0.01


def ppac_scale(mu, scene_center, r: float) -> float:
    """1 inside ``2r`` of the centre, ``m / r - 1`` beyond (continuous at ``m = 2r``)."""
    if not r > 0:
        raise InvalidInputError("PPAC radius must be positive")
    m = float(np.linalg.norm(np.asarray(mu, float) - np.asarray(scene_center, float)))
    return 1.0 if m < 2 * r else m / r - 1.0


def ppac_factors(means: np.ndarray, scene_center, r: float) -> np.ndarray:
    if not r > 0:
        raise InvalidInputError("PPAC radius must be positive")
    m = np.linalg.norm(np.asarray(means, float) - np.asarray(scene_center, float), axis=1)
    return np.where(m < 2 * r, 1.0, m / r - 1.0)


class GradStats:
    """Screen-space gradient accumulators since the last densification."""

    def __init__(self, n: int):
        self.accum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)
        self.world = np.zeros((n, 3))

    def __len__(self):
        return len(self.accum)

    def add(self, screen_norm: np.ndarray, visible: np.ndarray, world_grad: np.ndarray) -> None:
        self.accum[visible] += screen_norm[visible]
        self.count[visible] += 1
        self.world[visible] += world_grad[visible]

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)

    def reset(self, n: int) -> None:
        self.__init__(n)


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    source_rows: np.ndarray  # row of the input cloud each output row descends from
    fresh: np.ndarray        # rows whose optimiser state must restart
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(cloud: GaussianCloud, stats: GradStats, grad_threshold: float,
                      prune_opacity: float, ppac_radius: Optional[float], rng: np.random.Generator,
                      max_gaussians: int | None = None) -> DensifyResult:
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    "Large" means a maximum world scale above ``1% * scene_radius * gamma(mu)``
    with ``gamma`` evaluated at radius ``ppac_radius`` (world units, ``None``
    disables the factor), so distant Gaussians are not split. A split
    moves the parent to its first child in place and appends the second one; a
    clone appends a copy shifted half a standard deviation against the
    accumulated positional gradient. Statistics are reset.
    """
    n = len(cloud)
    if len(stats) != n:
        raise InvalidInputError("gradient statistics are not aligned with the cloud")
    grad = stats.mean()
    selected = grad > grad_threshold
    if max_gaussians is not None:
        budget = max(0, max_gaussians - n)
        if selected.sum() > budget:
            rank = np.argsort(-np.where(selected, grad, -np.inf), kind="stable")
            selected = np.zeros(n, dtype=bool)
            selected[rank[:budget]] = True
    scales = cloud.scales
    gamma = 1.0 if ppac_radius is None else ppac_factors(cloud.means, cloud.scene_center, ppac_radius)
    large = scales.max(axis=1) > PERCENT_DENSE * cloud.scene_radius * gamma
    clone = np.flatnonzero(selected & ~large)
    split = np.flatnonzero(selected & large)

    p = {k: v.copy() for k, v in cloud.params().items()}
    fresh_existing = np.zeros(n, dtype=bool)

    # clones
    wdir = stats.world[clone]
    wn = np.linalg.norm(wdir, axis=1, keepdims=True)
    unit = np.where(wn > 0, wdir / np.where(wn > 0, wn, 1.0), 0.0)
    clone_means = cloud.means[clone] - 0.5 * scales[clone].max(axis=1, keepdims=True) * unit

    # splits: two samples from the parent distribution, scales shrunk
    rot = cloud.rotations[split]
    samples = rng.standard_normal((2, len(split), 3)) * scales[split][None]
    child = cloud.means[split][None] + np.einsum("sij,ksj->ksi", rot, samples)
    p["means"][split] = child[0]
    p["log_scales"][split] -= np.log(SPLIT_SHRINK)
    fresh_existing[split] = True

    new_rows = np.concatenate([clone, split])
    new = {
        "means": np.concatenate([clone_means, child[1]]),
        "log_scales": np.concatenate([cloud.log_scales[clone], p["log_scales"][split]]),
        "quats": cloud.quats[new_rows],
        "opacity_logits": cloud.opacity_logits[new_rows],
        "colors": cloud.colors[new_rows],
    }
    merged = {k: np.concatenate([p[k], new[k]]) for k in p}
    source = np.concatenate([np.arange(n), new_rows])
    fresh = np.concatenate([fresh_existing, np.ones(len(new_rows), dtype=bool)])

    opac = 1.0 / (1.0 + np.exp(-merged["opacity_logits"]))
    keep = opac >= prune_opacity
    if not keep.any():
        raise TrainingCollapseError("density control pruned every Gaussian")
    out = GaussianCloud(*(merged[k][keep] for k in GaussianCloud.FIELDS),
                        scene_center=cloud.scene_center, scene_radius=cloud.scene_radius)
    stats.reset(len(out))
    return DensifyResult(out, source[keep], fresh[keep], len(clone), len(split), int((~keep).sum()))


def initial_opacity_logit(opacity: float = 0.1) -> float:
    return float(logit(opacity))
