"""Per-pixel plane hypotheses refined by multi-view Patchmatch, and depth-driven
Gaussian repositioning.

A plane is stored in the reference camera frame as ``(d, n)`` with
``n . X = -d`` for points ``X`` on it, ``|n| = 1`` and ``d > 0``. The normal faces
the camera, so for the pixel ray ``r = (x, y, 1)`` we have ``n . r < 0`` and the
depth along the ray is ``z = -d / (n . r)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from .errors import InvalidPlaneError
from .rasterizer import COVERAGE_EPS
from .scene_model import Camera, Frame, GaussianCloud, PointCloud, logit, relative_pose, visible_indices

INVALID_COST = 2.0
DEFAULT_PATCH = 20
W_EPS = 1e-9
VAR_EPS = 1e-8
INIT_CONE_DEG = 60.0
JITTER_DEPTH = 0.10
JITTER_CONE_DEG = 10.0
CHUNK = 1024


@dataclass(frozen=True)
class PlaneHypothesis:
    d: float
    n: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64).reshape(3)
        object.__setattr__(self, "n", n)
        if not np.isfinite(self.d) or self.d <= 0:
            raise InvalidPlaneError(f"plane distance must be positive, got {self.d}")
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise InvalidPlaneError("plane normal must be unit length")

    def depth_at(self, camera: Camera, pixel) -> float:
        ray = np.array([(pixel[0] - camera.cx) / camera.fx, (pixel[1] - camera.cy) / camera.fy, 1.0])
        dn = float(self.n @ ray)
        return -self.d / dn if dn < 0 else float("nan")


@dataclass
class PlaneField:
    d: np.ndarray          # (H, W)
    n: np.ndarray          # (H, W, 3)
    cost: np.ndarray       # (H, W), INVALID_COST until evaluated
    ref_id: int
    source_ids: List[int] = field(default_factory=list)
    covered: Optional[np.ndarray] = None
    degenerate: bool = False

    @property
    def shape(self) -> tuple:
        return self.d.shape

    def hypothesis(self, x: int, y: int) -> PlaneHypothesis:
        return PlaneHypothesis(float(self.d[y, x]), self.n[y, x])

    def depth(self, camera: Camera) -> np.ndarray:
        """Per-pixel depth ``-d / (n . ray)``; NaN where the plane does not face the ray."""
        dn = np.sum(self.n * camera.pixel_rays(), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(dn < 0, -self.d / dn, np.nan)

    def copy(self) -> "PlaneField":
        return PlaneField(self.d.copy(), self.n.copy(), self.cost.copy(), self.ref_id, list(self.source_ids),
                          None if self.covered is None else self.covered.copy(), self.degenerate)


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _cone_sample(axis: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors within ``max_deg`` of each unit ``axis`` row (uniform angle, uniform azimuth)."""
    axis = np.asarray(axis, dtype=np.float64)
    v = rng.standard_normal(axis.shape)
    perp = v - np.sum(v * axis, axis=-1, keepdims=True) * axis
    norm = np.linalg.norm(perp, axis=-1, keepdims=True)
    fallback = np.cross(axis, np.array([1.0, 0.0, 0.0]))
    perp = np.where(norm > 1e-12, perp / np.where(norm > 1e-12, norm, 1.0), _unit(fallback + 1e-12))
    ang = np.deg2rad(max_deg) * rng.random(axis.shape[:-1])[..., None]
    return _unit(np.cos(ang) * axis + np.sin(ang) * perp)


def init_planes(depth: np.ndarray, normal: np.ndarray, camera: Camera, seed: int = 0,
                depth_range: Optional[Tuple[float, float]] = None, alpha: Optional[np.ndarray] = None,
                min_alpha: float = 0.5) -> PlaneField:
    """Planes from a rendered depth/normal pair; uncovered pixels get seeded random planes.

    Covered means a positive finite depth with a non-zero normal (and
    ``alpha >= min_alpha`` when ``alpha`` is given). Normals are flipped to face
    the pixel ray and ``d = -n . X`` with ``X`` the back-projected pixel.
    Random planes draw depth uniformly from ``depth_range`` (default: the range
    of covered depths) and a normal within 60 degrees of the reversed ray.
    """
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    H, W = depth.shape
    if (H, W) != camera.shape or normal.shape != (H, W, 3):
        raise ValueError("depth/normal shapes do not match the camera")
    rays = camera.pixel_rays()
    nlen = np.linalg.norm(normal, axis=-1)
    covered = np.isfinite(depth) & (depth > 0) & (nlen > 1e-6)
    if alpha is not None:
        covered &= np.asarray(alpha) >= min_alpha
    n = np.where(covered[..., None], normal / np.where(nlen > 1e-6, nlen, 1.0)[..., None], 0.0)
    facing = np.sum(n * rays, axis=-1)
    n = np.where((facing > 0)[..., None], -n, n)
    X = rays * np.where(covered, depth, 0.0)[..., None]
    d = -np.sum(n * X, axis=-1)
    covered &= d > 0

    if depth_range is None:
        depth_range = (float(depth[covered].min()), float(depth[covered].max())) if covered.any() else (0.5, 20.0)
    lo, hi = depth_range
    if hi <= lo:
        lo, hi = 0.9 * lo, 1.1 * hi
    rng = np.random.default_rng(seed)
    z_rand = rng.uniform(lo, hi, size=(H, W))
    n_rand = _cone_sample(-_unit(rays), INIT_CONE_DEG, rng)
    d_rand = -np.sum(n_rand * rays, axis=-1) * z_rand

    degenerate = not covered.any()
    if degenerate:
        warnings.warn("no covered pixels; plane field initialised at random", RuntimeWarning, stacklevel=2)
    field_n = np.where(covered[..., None], n, n_rand)
    field_d = np.where(covered, d, d_rand)
    return PlaneField(field_d, field_n, np.full((H, W), INVALID_COST), camera.id, [], covered, degenerate)


# ----------------------------------------------------------------------------
# homography & cost
# ----------------------------------------------------------------------------

def homography(plane: PlaneHypothesis, ref: Camera, src: Camera) -> np.ndarray:
    """Plane-induced homography ``K_src (R - t n^T / d) K_ref^-1`` from reference to source pixels."""
    d = float(plane.d)
    if not d > 0:
        raise InvalidPlaneError("plane distance must be positive")
    R, t = relative_pose(ref, src)
    return src.K @ (R - np.outer(t, plane.n) / d) @ np.linalg.inv(ref.K)


def warp_pixel(H: np.ndarray, p, size: Optional[Tuple[int, int]] = None):
    """Dehomogenised ``H @ (x, y, 1)``; ``None`` when ``w <= 1e-9`` or outside ``size = (W, H)``."""
    q = np.asarray(H, dtype=np.float64) @ np.array([p[0], p[1], 1.0])
    if q[2] <= W_EPS:
        return None
    out = q[:2] / q[2]
    if size is not None:
        w, h = size
        if not (0 <= out[0] < w and 0 <= out[1] < h):
            return None
    return out


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def window_offsets(patch: int = DEFAULT_PATCH, stride: int = 1) -> np.ndarray:
    """``(Q, 2)`` integer (dx, dy) offsets of the odd ``(patch//2*2+1)`` square window."""
    half = patch // 2
    r = np.arange(-half, half + 1, stride)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)


class _SourceView:
    """Precomputed terms of ``H p = A p - b (c . p)`` with ``c = K_ref^-T n / d``."""

    def __init__(self, ref: Camera, src: Camera, src_img: np.ndarray):
        R, t = relative_pose(ref, src)
        self.Kinv = np.linalg.inv(ref.K)
        self.A = src.K @ R @ self.Kinv
        self.b = src.K @ t
        self.gray = to_gray(src_img)
        self.w, self.h = src.width, src.height


def _ncc_cost(ref_vals, ref_ok, src_vals, src_ok) -> np.ndarray:
    m = (ref_ok & src_ok).astype(np.float64)
    cnt = m.sum(axis=1)
    q = m.shape[1]
    safe = np.maximum(cnt, 1.0)
    a = ref_vals * m
    b = src_vals * m
    ma = a.sum(axis=1) / safe
    mb = b.sum(axis=1) / safe
    va = (a * ref_vals).sum(axis=1) / safe - ma**2
    vb = (b * src_vals).sum(axis=1) / safe - mb**2
    cov = (a * src_vals).sum(axis=1) / safe - ma * mb
    ok = (cnt >= 0.5 * q) & (va >= VAR_EPS) & (vb >= VAR_EPS)
    ncc = cov / np.sqrt(np.where(ok, va * vb, 1.0))
    return np.where(ok, np.clip(1.0 - ncc, 0.0, 2.0), INVALID_COST)


def _costs(ref_gray: np.ndarray, views: Sequence[_SourceView], px: np.ndarray, d: np.ndarray, n: np.ndarray,
           offsets: np.ndarray) -> np.ndarray:
    """Aggregated cost for planes ``(d, n)`` at integer pixels ``px`` (P, 2)."""
    P = len(px)
    out = np.full(P, INVALID_COST)
    if P == 0 or not views:
        return out
    Hr, Wr = ref_gray.shape
    for s in range(0, P, CHUNK):
        sl = slice(s, s + CHUNK)
        p0 = px[sl]
        dd, nn = d[sl], n[sl]
        valid_plane = np.isfinite(dd) & (dd > 0)
        wx = p0[:, None, 0] + offsets[None, :, 0]
        wy = p0[:, None, 1] + offsets[None, :, 1]
        ref_ok = (wx >= 0) & (wx < Wr) & (wy >= 0) & (wy < Hr)
        ref_vals = ref_gray[np.clip(wy, 0, Hr - 1).astype(np.intp), np.clip(wx, 0, Wr - 1).astype(np.intp)]
        total = np.zeros(len(p0))
        count = np.zeros(len(p0))
        for v in views:
            c = (nn @ v.Kinv) / np.where(valid_plane, dd, 1.0)[:, None]
            cp = c[:, 0:1] * wx + c[:, 1:2] * wy + c[:, 2:3]
            hx = v.A[0, 0] * wx + v.A[0, 1] * wy + v.A[0, 2] - v.b[0] * cp
            hy = v.A[1, 0] * wx + v.A[1, 1] * wy + v.A[1, 2] - v.b[1] * cp
            hw = v.A[2, 0] * wx + v.A[2, 1] * wy + v.A[2, 2] - v.b[2] * cp
            front = hw > W_EPS
            safe_w = np.where(front, hw, 1.0)
            sx, sy = hx / safe_w, hy / safe_w
            src_ok = front & (sx >= 0) & (sx <= v.w - 1) & (sy >= 0) & (sy <= v.h - 1)
            src_vals = map_coordinates(v.gray, [np.where(src_ok, sy, 0.0).ravel(), np.where(src_ok, sx, 0.0).ravel()],
                                       order=1, mode="nearest").reshape(sx.shape)
            cost = _ncc_cost(ref_vals, ref_ok, src_vals, src_ok)
            cost = np.where(valid_plane, cost, INVALID_COST)
            good = cost < INVALID_COST
            total += np.where(good, cost, 0.0)
            count += good
        out[sl] = np.where(count > 0, total / np.maximum(count, 1.0), INVALID_COST)
    return out


def patch_cost(ref_img, src_img, p, plane: PlaneHypothesis, ref: Camera, src: Camera,
               patch: int = DEFAULT_PATCH, stride: int = 1) -> float:
    """``1 - NCC`` between the reference window at ``p`` and its plane-warped source samples.

    The window is ``patch // 2 * 2 + 1`` pixels square. Samples warping outside
    either image are excluded; more than half excluded, or a window variance
    below 1e-8, gives the invalid cost 2.
    """
    view = _SourceView(ref, src, src_img)
    px = np.array([[float(p[0]), float(p[1])]])
    return float(_costs(to_gray(ref_img), [view], px, np.array([plane.d]), plane.n[None],
                        window_offsets(patch, stride))[0])


# ----------------------------------------------------------------------------
# propagation
# ----------------------------------------------------------------------------

_NEIGHBOURS = ((0, -1), (0, 1), (-1, 0), (1, 0))  # (dx, dy): up, down, left, right


def _keep_better(ref_gray, views, px, offsets, ray, cd, cn, best_d, best_n, best_c):
    facing = np.sum(cn * ray, axis=1) < 0
    c = _costs(ref_gray, views, px, np.where(facing, cd, np.nan), cn, offsets)
    better = c < best_c
    return (np.where(better, cd, best_d), np.where(better[:, None], cn, best_n), np.where(better, c, best_c))


def propagate(field: PlaneField, ref: Camera, ref_img, sources: Sequence[Tuple[Camera, np.ndarray]],
              rounds: int = 3, seed: int = 0, patch: int = DEFAULT_PATCH, stride: int = 1) -> PlaneField:
    """Checkerboard Patchmatch sweeps over ``field`` (returns a new field).

    Each round updates the even then the odd checkerboard colour. A pixel tries
    its current plane, its four neighbours' planes and one random perturbation
    (depth +-10% and normal within 10 degrees, both halved every round) and
    keeps the cheapest; the current plane wins ties.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    out = field.copy()
    out.source_ids = [c.id for c, _ in sources]
    H, W = out.shape
    ref_gray = to_gray(ref_img)
    views = [_SourceView(ref, c, img) for c, img in sources]
    offsets = window_offsets(patch, stride)
    rays = ref.pixel_rays()
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    all_px = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)

    out.cost = _costs(ref_gray, views, all_px, out.d.ravel(), out.n.reshape(-1, 3), offsets).reshape(H, W)
    if not views or np.all(out.cost >= INVALID_COST):
        out.degenerate = True
    colour_masks = [((xx + yy) % 2) == c for c in (0, 1)]

    for r in range(rounds):
        jitter_d = JITTER_DEPTH * 0.5**r
        jitter_n = JITTER_CONE_DEG * 0.5**r
        for mask in colour_masks:
            ys, xs = np.nonzero(mask)
            px = np.stack([xs, ys], axis=1).astype(np.float64)
            best_d = out.d[ys, xs].copy()
            best_n = out.n[ys, xs].copy()
            best_c = out.cost[ys, xs].copy()
            cands = []
            for dx, dy in _NEIGHBOURS:
                nx, ny = xs + dx, ys + dy
                inside = (nx >= 0) & (nx < W) & (ny >= 0) & (ny < H)
                nx, ny = np.where(inside, nx, xs), np.where(inside, ny, ys)
                cands.append((out.d[ny, nx], out.n[ny, nx]))
            for cd, cn in cands:
                best_d, best_n, best_c = _keep_better(ref_gray, views, px, offsets, rays[ys, xs],
                                                      cd, cn, best_d, best_n, best_c)
            # refine the winner: perturb depth along the ray and the normal, then re-derive d
            ray = rays[ys, xs]
            z = -best_d / np.minimum(np.sum(best_n * ray, axis=1), -1e-12)
            pz = z * (1.0 + rng.uniform(-jitter_d, jitter_d, size=len(xs)))
            pn = _cone_sample(best_n, jitter_n, rng)
            pd = -np.sum(pn * ray, axis=1) * pz
            best_d, best_n, best_c = _keep_better(ref_gray, views, px, offsets, ray, pd, pn, best_d, best_n, best_c)
            out.d[ys, xs] = best_d
            out.n[ys, xs] = best_n
            out.cost[ys, xs] = best_c
    return out


def select_source_views(ref: Camera, cameras: Sequence[Camera], cloud: PointCloud, k: int = 2,
                        min_covisible: int = 100, patch_px: int = 1) -> List[Camera]:
    """Up to ``k`` nearest cameras (by position) sharing ``min_covisible`` visible sparse points with ``ref``."""
    ref_vis = set(visible_indices(ref, cloud.positions, patch_px, cloud.ids).tolist())
    cands = []
    for cam in cameras:
        if cam.id == ref.id:
            continue
        shared = len(ref_vis.intersection(visible_indices(cam, cloud.positions, patch_px, cloud.ids).tolist()))
        if shared >= min_covisible:
            cands.append((float(np.linalg.norm(cam.position - ref.position)), cam.id, cam))
    cands.sort(key=lambda c: (c[0], c[1]))
    return [c[2] for c in cands[:k]]


# ----------------------------------------------------------------------------
# repositioning
# ----------------------------------------------------------------------------

def disagreeing_pixels(rendered: Frame, optimized: PlaneField, camera: Camera, tau: float,
                       min_alpha: float = 0.5, max_cost: float = INVALID_COST):
    """``(mask, d_opt)`` of covered pixels whose rendered depth differs from the plane depth by > tau."""
    d_opt = optimized.depth(camera)
    covered = (rendered.alpha >= min_alpha) & (rendered.depth > COVERAGE_EPS)
    ok = covered & np.isfinite(d_opt) & (d_opt > 0) & (optimized.cost < max_cost)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(rendered.depth - d_opt) / d_opt
    return ok & (rel > tau), d_opt


def refine_and_reposition(cloud: GaussianCloud, camera: Camera, rendered: Frame, optimized: PlaneField,
                          ref_img, tau: float = 0.05, min_alpha: float = 0.5,
                          max_cost: float = INVALID_COST, opacity: float = 0.1) -> GaussianCloud:
    """Append Gaussians at the optimized depth of pixels where the render disagrees.

    Disagreeing pixels (see :func:`disagreeing_pixels`) are back-projected at
    their plane depth, deduplicated on a ``scene_radius / 256`` voxel grid (first
    pixel in raster order wins) and turned into isotropic Gaussians coloured by
    the reference image with scale equal to the mean 3-NN distance in the pool.
    Existing Gaussians are not modified.
    """
    if optimized.ref_id != camera.id or rendered.shape != camera.shape:
        raise ValueError("rendered frame and plane field must belong to the camera")
    if not tau > 0:
        raise ValueError("tau must be positive")
    mask, d_opt = disagreeing_pixels(rendered, optimized, camera, tau, min_alpha, max_cost)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return cloud
    pts = camera.backproject(np.stack([xs, ys], axis=1).astype(np.float64), d_opt[ys, xs])
    voxel = cloud.scene_radius / 256.0
    keys = np.floor(pts / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first = np.sort(first)
    pts, ys, xs = pts[first], ys[first], xs[first]
    footprint = d_opt[ys, xs] / camera.fx
    if len(pts) > 1:
        k = min(4, len(pts))
        dist, _ = cKDTree(pts).query(pts, k=k)
        scale = dist[:, 1:].mean(axis=1)
    else:
        scale = footprint
    scale = np.maximum(scale, 1e-7)
    colors = np.asarray(ref_img, dtype=np.float64)[ys, xs]
    m = len(pts)
    new = GaussianCloud(pts, np.repeat(np.log(scale)[:, None], 3, axis=1), np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)),
                        np.full(m, logit(opacity)), colors,
                        scene_center=cloud.scene_center, scene_radius=cloud.scene_radius)
    return cloud.concat(new)


def dump_plane_field(field: PlaneField, camera: Camera, prefix) -> None:
    """Debug dump: ``<prefix>.depth`` (float binary) and ``<prefix>_normal.png``."""
    from .io import write_depth, write_normal_png

    write_depth(f"{prefix}.depth", np.nan_to_num(field.depth(camera), nan=0.0))
    write_normal_png(f"{prefix}_normal.png", field.n)
