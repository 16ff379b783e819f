"""Per-region training loop."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InvalidInputError, TrainingDivergenceError
from ..rasterizer import RenderOptions, render, render_with_context
from ..scene_model import Camera, GaussianCloud, PointCloud, logit, visible_indices
from .. import patchmatch as pm
from .backward import backward
from .density import GradStats, densify_and_prune, ppac_factors
from .loss import photometric_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

INIT_OPACITY = 0.1


@dataclass
class TrainConfig:
    """Training hyper-parameters. Learning rates follow the per-group defaults of
    the method; position lr is multiplied by the scene radius and decays
    exponentially to 1/100 over the run."""

    iterations: int = 2000
    lr_position: float = 0.00016
    lr_features: float = 0.0025
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    ssim_weight: float = 0.2
    densify_interval: int = 100
    densify_until: Optional[int] = None  # default: iterations // 2
    densify_grad_threshold: float = 0.0002
    prune_opacity: float = 0.005
    max_gaussians: Optional[int] = None
    ppac: bool = True
    ppac_r: float = 1.0
    patchmatch: bool = True
    patchmatch_start: int = 1000
    patchmatch_end: int = 6000
    patchmatch_interval: int = 50
    patchmatch_rounds: int = 2
    patchmatch_patch: int = 20
    patchmatch_stride: int = 2
    patchmatch_min_covisible: int = 100
    patchmatch_max_cost: float = 0.5
    tau: float = 0.05
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_px: int = 8  # training renders only; images do not depend on the tile size
    seed: int = 0

    def __post_init__(self):
        self.background = tuple(float(x) for x in self.background)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        for name in ("lr_position", "lr_features", "lr_opacity", "lr_scale", "lr_rotation"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise InvalidInputError("ssim_weight must lie in [0, 1]")
        if self.tile_px < 1:
            raise InvalidInputError("tile_px must be >= 1")
        if self.densify_interval < 1 or self.patchmatch_interval < 1:
            raise InvalidInputError("intervals must be >= 1")
        if not self.ppac_r > 0:
            raise InvalidInputError("ppac_r must be positive")
        if self.patchmatch and self.patchmatch_start >= self.patchmatch_end:
            raise InvalidInputError("patchmatch_start must be < patchmatch_end")
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")

    @property
    def densify_stop(self) -> int:
        return self.iterations // 2 if self.densify_until is None else self.densify_until

    def patchmatch_due(self, it: int) -> bool:
        """Whether iteration ``it`` (1-based) runs Patchmatch; the window is clipped to the run."""
        end = min(self.patchmatch_end, self.iterations)
        return (self.patchmatch and self.patchmatch_start <= it <= end
                and (it - self.patchmatch_start) % self.patchmatch_interval == 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def learning_rates(self, it: int, scene_radius: float) -> Dict[str, float]:
        frac = min(it / max(self.iterations, 1), 1.0)
        return {
            "means": self.lr_position * scene_radius * 0.01**frac,
            "colors": self.lr_features,
            "opacity_logits": self.lr_opacity,
            "log_scales": self.lr_scale,
            "quats": self.lr_rotation,
        }


def scene_normalization(cameras: Sequence[Camera], points: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Camera-position centroid and bounding-sphere radius (falls back to the point spread)."""
    pos = np.array([c.position for c in cameras])
    center = pos.mean(axis=0)
    radius = float(np.linalg.norm(pos - center, axis=1).max()) if len(pos) else 0.0
    if radius <= 1e-9 and points is not None and len(points):
        radius = float(np.linalg.norm(points - center, axis=1).mean())
    return center, radius if radius > 1e-9 else 1.0


def knn_scale(positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points (floored at 1e-7)."""
    n = len(positions)
    if n < 2:
        return np.full(n, 0.01)
    kk = min(k + 1, n)
    dist, _ = cKDTree(positions).query(positions, k=kk)
    return np.maximum(dist[:, 1:].mean(axis=1), 1e-7)


def ppac_radius(points: np.ndarray, scene_center, config: TrainConfig) -> Optional[float]:
    """World-unit radius of the position-aware factor: ``ppac_r`` times the median
    distance of the initial points from the scene centre (``None`` when disabled)."""
    if not config.ppac or len(points) == 0:
        return None
    med = float(np.median(np.linalg.norm(np.asarray(points) - scene_center, axis=1)))
    return config.ppac_r * med if med > 0 else None


def init_gaussians(points: PointCloud, scene_center, scene_radius: float, config: TrainConfig,
                   radius_ppac: Optional[float] = None) -> GaussianCloud:
    """One isotropic Gaussian per point, scaled by the position-aware factor."""
    pos = points.positions
    n = len(pos)
    scale = knn_scale(pos)
    if radius_ppac is not None and n:
        scale = scale * ppac_factors(pos, scene_center, radius_ppac)
    return GaussianCloud(
        pos, np.repeat(np.log(scale)[:, None], 3, axis=1), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, logit(INIT_OPACITY)), np.clip(points.colors, 0.0, 1.0),
        scene_center=scene_center, scene_radius=scene_radius,
    )


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: List[dict] = field(default_factory=list)

    @property
    def peak_gaussians(self) -> int:
        return max((r["peak_gaussians"] for r in self.log), default=len(self.cloud))


def _region_inputs(region, cameras, images):
    ids = None if region is None else set(int(i) for i in region.camera_ids)
    cams = [c for c in sorted(cameras, key=lambda c: c.id) if (ids is None or c.id in ids) and c.id in images]
    if not cams:
        raise InvalidInputError("region has no camera with a training image")
    return cams


def train_region(region, cameras: Sequence[Camera], images: Dict[int, np.ndarray], cloud: PointCloud,
                 config: TrainConfig, log_rows: Optional[list] = None) -> GaussianCloud:
    """Train one region; see :func:`train_region_full` (this returns only the cloud)."""
    res = train_region_full(region, cameras, images, cloud, config)
    if log_rows is not None:
        log_rows.extend(res.log)
    return res.cloud


def train_region_full(region, cameras: Sequence[Camera], images: Dict[int, np.ndarray], cloud: PointCloud,
                      config: TrainConfig) -> TrainResult:
    """Optimise a Gaussian cloud for ``region``.

    ``region`` supplies ``camera_ids`` and ``point_ids`` (``None`` trains on all
    cameras and points). Only cameras present in ``images`` are used.
    Cameras are visited in a seeded shuffle, reshuffled every epoch.
    """
    cams = _region_inputs(region, cameras, images)
    points = cloud if region is None else cloud.subset(sorted(region.point_ids))
    center, radius = scene_normalization(cams, points.positions)
    r_ppac = ppac_radius(points.positions, center, config)
    g = init_gaussians(points, center, radius, config, r_ppac)
    if len(g) == 0:
        raise InvalidInputError("region has no points to initialise from")

    rng = np.random.default_rng(config.seed)
    opts = RenderOptions(tile_px=config.tile_px, background=config.background)
    state = AdamState.for_cloud(g)
    stats = GradStats(len(g))
    rows: List[dict] = []
    peak = len(g)
    order: List[int] = []
    sources_cache: Dict[int, list] = {}

    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(cams)))
        cam = cams[order.pop(0)]
        target = images[cam.id]
        frame, ctx = render_with_context(cam, g, opts, need_geometry=False, keep_state=True)
        loss, dl = photometric_loss(frame.color, target, config.ssim_weight)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}", iteration=it)
        grads = backward(cam, g, dl, ctx)
        stats.add(grads.screen_grad_norm, grads.visible, grads.means)
        try:
            new = adam_step(g.params(), grads.as_dict(), state, config.learning_rates(it, radius))
        except TrainingDivergenceError as exc:
            exc.iteration = it
            raise
        g = g.replace(**new)

        if it % config.densify_interval == 0 and it <= config.densify_stop:
            res = densify_and_prune(g, stats, config.densify_grad_threshold, config.prune_opacity,
                                    r_ppac, rng, config.max_gaussians)
            peak = max(peak, len(g) + res.n_cloned + res.n_split)
            g = res.cloud
            state.remap(res.source_rows, res.fresh)

        if config.patchmatch_due(it):
            g = _patchmatch_step(g, cam, cams, images, points, config, it, sources_cache)
            grow = len(g) - len(stats)
            if grow:
                _extend(state, stats, grow)

        peak = max(peak, len(g))
        rows.append({"iteration": it, "loss": float(loss), "gaussians": len(g), "peak_gaussians": peak})
    return TrainResult(g, rows)


def _extend(state: AdamState, stats: GradStats, grow: int) -> None:
    n = len(stats)
    rows = np.concatenate([np.arange(n), np.zeros(grow, dtype=np.int64)])
    fresh = np.concatenate([np.zeros(n, dtype=bool), np.ones(grow, dtype=bool)])
    state.remap(rows, fresh)
    stats.accum = np.concatenate([stats.accum, np.zeros(grow)])
    stats.count = np.concatenate([stats.count, np.zeros(grow, dtype=np.int64)])
    stats.world = np.concatenate([stats.world, np.zeros((grow, 3))])


def _patchmatch_step(g: GaussianCloud, cam: Camera, cams, images, points: PointCloud, config: TrainConfig,
                     it: int, cache: dict) -> GaussianCloud:
    if cam.id not in cache:
        cache[cam.id] = pm.select_source_views(cam, cams, points, k=2, min_covisible=config.patchmatch_min_covisible)
    srcs = cache[cam.id]
    if not srcs:
        return g
    frame = render(cam, g, RenderOptions(tile_px=config.tile_px, background=config.background))
    uv, z, inside = cam.project(points.positions)
    zr = (float(z[inside].min()), float(z[inside].max())) if inside.any() else None
    field_ = pm.init_planes(frame.depth, frame.normal, cam, seed=config.seed * 1000003 + it,
                            depth_range=zr, alpha=frame.alpha)
    field_ = pm.propagate(field_, cam, images[cam.id], [(s, images[s.id]) for s in srcs],
                          rounds=config.patchmatch_rounds, seed=config.seed * 1000003 + it,
                          patch=config.patchmatch_patch, stride=config.patchmatch_stride)
    before = len(g)
    g = pm.refine_and_reposition(g, cam, frame, field_, images[cam.id], tau=config.tau,
                                 max_cost=config.patchmatch_max_cost)
    if len(g) > before:
        log.debug("iteration %d: patchmatch added %d Gaussians from camera %d", it, len(g) - before, cam.id)
    return g
