"""Forward Gaussian splatting on the CPU.

Gaussians are projected with the first-order (EWA) perspective Jacobian::

    t    = R_cam @ mean + t_cam                      (camera frame)
    J    = [[fx/z, 0, -fx*u/z], [0, fy/z, -fy*v/z]]
    cov2 = J R_cam Sigma R_cam^T J^T + 0.3 * I       (pixels^2)

where ``u = x/z`` and ``v = y/z`` are clamped to ``JACOBIAN_LIMIT`` times the
half field-of-view tangents (the mean itself is not clamped). Without the
clamp a Gaussian just in front of the camera but far off-axis gets an
unbounded footprint that covers the whole image. Splats are composited
front to back: ``a_i = min(0.99, o_i * exp(-0.5 d^T cov2^-1 d))``
(skipped below ``alpha_threshold``), ``T_i = prod_{j<i} (1 - a_j)``,
``C = sum_i c_i a_i T_i + T_final * background``.  Compositing of a pixel
stops at the first splat whose incoming transmittance is below
``transmittance_floor``.

Tiles only accelerate the computation: a splat is binned to every tile its
``alpha_threshold`` iso-contour can reach, so the tiled result equals the
per-pixel evaluation of all splats in global depth order.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .scene_model import DEPTH_EPSILON, Camera, Frame, Gaussian, GaussianCloud

COV2D_BLUR = 0.3
MAX_ALPHA = 0.99
JACOBIAN_LIMIT = 1.3
COVERAGE_EPS = 1e-6


@dataclass(frozen=True)
class RenderOptions:
    tile_px: int = 16
    alpha_threshold: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)
    # divide composited depth/normal by alpha for the reported maps
    normalize_depth: bool = True

    def __post_init__(self):
        if self.tile_px < 1:
            raise InvalidInputError("tile_px must be >= 1")
        if not 0 < self.alpha_threshold < 1:
            raise InvalidInputError("alpha_threshold must lie in (0, 1)")
        if not 0 <= self.transmittance_floor < 1:
            raise InvalidInputError("transmittance_floor must lie in [0, 1)")

    @property
    def bg(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class Splat2D:
    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    normal_cam: np.ndarray

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)


class Projection:
    """Screen-space splats for the Gaussians that survive culling.

    Arrays are indexed by splat; ``index`` maps back to Gaussian rows. The
    intermediate quantities needed by the backward pass are kept as attributes.
    """

    def __init__(self, camera: Camera, cloud: GaussianCloud):
        self.camera = camera
        n = len(cloud)
        t_all = cloud.means @ camera.R.T + camera.t if n else np.zeros((0, 3))
        z = t_all[:, 2]
        front = z > DEPTH_EPSILON
        idx = np.flatnonzero(front)

        t = t_all[idx]
        x, y, z = t[:, 0], t[:, 1], t[:, 2]
        fx, fy = camera.fx, camera.fy
        rot = cloud.rotations[idx] if len(idx) else np.zeros((0, 3, 3))
        scales = cloud.scales[idx]
        M = rot * scales[:, None, :]
        sigma = M @ np.swapaxes(M, 1, 2)
        lim_u, lim_v = jacobian_limits(camera)
        u = np.clip(x / z, -lim_u, lim_u)
        v = np.clip(y / z, -lim_v, lim_v)
        J = np.zeros((len(idx), 2, 3))
        J[:, 0, 0] = fx / z
        J[:, 0, 2] = -fx * u / z
        J[:, 1, 1] = fy / z
        J[:, 1, 2] = -fy * v / z
        T = J @ camera.R
        cov = T @ sigma @ np.swapaxes(T, 1, 2)
        cov[:, 0, 0] += COV2D_BLUR
        cov[:, 1, 1] += COV2D_BLUR
        mean2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)

        tr = cov[:, 0, 0] + cov[:, 1, 1]
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr**2 - det, 0.0))
        sig = np.sqrt(lam_max)
        inside = (
            (mean2d[:, 0] >= -3 * sig) & (mean2d[:, 0] < camera.width + 3 * sig)
            & (mean2d[:, 1] >= -3 * sig) & (mean2d[:, 1] < camera.height + 3 * sig)
        )
        keep = np.flatnonzero(inside)

        self.index = idx[keep]
        self.t_cam = t[keep]
        self.uv_clamped = np.stack([u, v], axis=1)[keep]  # tangents used by the Jacobian
        self.rot = rot[keep]
        self.scales = scales[keep]
        self.M = M[keep]
        self.sigma = sigma[keep]
        self.J = J[keep]
        self.T = T[keep]
        self.cov2d = cov[keep]
        self.det = det[keep]
        self.lam_max = lam_max[keep]
        self.mean2d = mean2d[keep]
        self.depth = self.t_cam[:, 2]
        c = self.cov2d
        self.conic = np.stack([c[:, 1, 1], -c[:, 0, 1], c[:, 0, 0]], axis=1) / self.det[:, None]
        self.raw_color = cloud.colors[self.index]
        self.color = np.clip(self.raw_color, 0.0, 1.0)
        self.opacity = cloud.opacities[self.index]
        self.normal_cam = _normals(cloud, self.index, camera) @ camera.R.T if len(self.index) else np.zeros((0, 3))
        # global front-to-back order, ties broken by Gaussian index
        self.order = np.lexsort((self.index, self.depth))

    def __len__(self) -> int:
        return len(self.index)

    def splat(self, k: int) -> Splat2D:
        return Splat2D(int(self.index[k]), self.mean2d[k].copy(), self.cov2d[k].copy(),
                       float(self.depth[k]), self.color[k].copy(), float(self.opacity[k]),
                       self.normal_cam[k].copy())


def jacobian_limits(camera: Camera):
    """Bounds on ``x/z`` and ``y/z`` used when forming the projection Jacobian."""
    return (JACOBIAN_LIMIT * 0.5 * camera.width / camera.fx,
            JACOBIAN_LIMIT * 0.5 * camera.height / camera.fy)


def _normals(cloud: GaussianCloud, rows: np.ndarray, camera: Camera) -> np.ndarray:
    """World-space camera-facing shortest-axis normals for the given Gaussian rows."""
    rot = cloud.rotations[rows]
    axis = np.argmin(cloud.log_scales[rows], axis=1)  # argmin keeps the lowest index on ties
    n = rot[np.arange(len(rows)), :, axis]
    view = cloud.means[rows] - camera.position
    flip = np.einsum("ij,ij->i", n, view) > 0
    n[flip] *= -1
    return n


def gaussian_normal(g: Gaussian, camera: Camera) -> np.ndarray:
    """Unit eigenvector of the smallest covariance eigenvalue, oriented toward the camera."""
    cloud = GaussianCloud.from_gaussians([g])
    return _normals(cloud, np.array([0]), camera)[0]


def project_gaussians(camera: Camera, cloud: GaussianCloud) -> Projection:
    return Projection(camera, cloud)


def project_gaussian(camera: Camera, g: Gaussian) -> Optional[Splat2D]:
    proj = Projection(camera, GaussianCloud.from_gaussians([g]))
    return proj.splat(0) if len(proj) else None


# ----------------------------------------------------------------------------
# compositing
# ----------------------------------------------------------------------------

def composite_pixel(splats: List[Splat2D], pixel, opts: RenderOptions = RenderOptions()):
    """Composite depth-sorted splats at one pixel; returns ``(color, depth, normal, alpha)``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    for a, b in zip(splats, splats[1:]):
        if b.depth < a.depth:
            raise ContractViolation("splats must be sorted by ascending depth")
    color = np.zeros(3)
    normal = np.zeros(3)
    depth = alpha = 0.0
    T = 1.0
    for s in splats:
        if T < opts.transmittance_floor:
            break
        d = pixel - s.mean2d
        a = s.opacity * np.exp(-0.5 * d @ s.conic @ d)
        if a < opts.alpha_threshold:
            continue
        w = min(a, MAX_ALPHA) * T
        color += w * s.color
        depth += w * s.depth
        normal += w * s.normal_cam
        alpha += w
        T *= 1.0 - min(a, MAX_ALPHA)
    color = color + T * opts.bg
    return (color, *_finish(depth, normal, alpha, opts))


def _finish(depth, normal, alpha, opts):
    if alpha > COVERAGE_EPS:
        n = np.linalg.norm(normal)
        normal = normal / n if n > 0 else np.zeros(3)
        if opts.normalize_depth:
            depth = depth / alpha
    else:
        depth, normal = 0.0, np.zeros(3)
    return depth, normal, alpha


@dataclass
class TileWork:
    pixel_rows: np.ndarray  # flat pixel indices covered by the tile
    px: np.ndarray          # (P, 2) pixel coordinates
    splats: np.ndarray      # splat indices (into the Projection), front to back


class RenderContext:
    """Everything the backward pass needs to replay a forward render."""

    def __init__(self, camera, cloud, opts, projection, tiles, t_final, tile_states=None):
        self.camera = camera
        self.tile_states = tile_states  # optional cached _tile_alpha results, one per tile
        self.opts = opts
        self.projection = projection
        self.tiles = tiles
        self.t_final = t_final
        self.n_gaussians = len(cloud)
        self.fingerprint = cloud.fingerprint()


def _bin_tiles(proj: Projection, camera: Camera, opts: RenderOptions) -> List[TileWork]:
    W, H, tp = camera.width, camera.height, opts.tile_px
    ntx, nty = -(-W // tp), -(-H // tp)
    ratio = proj.opacity / opts.alpha_threshold
    useful = ratio >= 1.0
    radius = np.sqrt(2.0 * np.log(np.where(useful, ratio, 1.0)) * proj.lam_max)
    mu = proj.mean2d
    tx0 = np.clip(np.floor((mu[:, 0] - radius) / tp), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mu[:, 0] + radius) / tp), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((mu[:, 1] - radius) / tp), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((mu[:, 1] + radius) / tp), 0, nty - 1).astype(np.int64)
    # a splat whose disc misses the image entirely gets no tiles
    hits = (useful & (mu[:, 0] + radius >= 0) & (mu[:, 0] - radius <= W - 1)
            & (mu[:, 1] + radius >= 0) & (mu[:, 1] - radius <= H - 1))

    rank = np.empty(len(proj), dtype=np.int64)
    rank[proj.order] = np.arange(len(proj))
    sel = np.flatnonzero(hits)
    nx = tx1[sel] - tx0[sel] + 1
    ny = ty1[sel] - ty0[sel] + 1
    counts = nx * ny
    owner = np.repeat(sel, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rep_nx = np.repeat(nx, counts)
    tile_x = np.repeat(tx0[sel], counts) + local % rep_nx
    tile_y = np.repeat(ty0[sel], counts) + local // rep_nx
    tile_id = tile_y * ntx + tile_x
    order = np.lexsort((rank[owner], tile_id))
    tile_sorted = tile_id[order]
    owner_sorted = owner[order]
    bounds = np.searchsorted(tile_sorted, np.arange(ntx * nty + 1))

    tiles = []
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            lo, hi = bounds[tid], bounds[tid + 1]
            v, u = np.mgrid[ty * tp:min((ty + 1) * tp, H), tx * tp:min((tx + 1) * tp, W)]
            rows = (v * W + u).reshape(-1)
            px = np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)
            tiles.append(TileWork(rows, px, owner_sorted[lo:hi]))
    return tiles


def _tile_alpha(proj: Projection, tile: TileWork, opts: RenderOptions):
    """Per-(splat, pixel) quantities for one tile, splats in front-to-back order."""
    s = tile.splats
    dx = tile.px[None, :, 0] - proj.mean2d[s, 0:1]
    dy = tile.px[None, :, 1] - proj.mean2d[s, 1:2]
    A, B, C = proj.conic[s, 0:1], proj.conic[s, 1:2], proj.conic[s, 2:3]
    q = A * dx * dx + 2 * B * dx * dy + C * dy * dy
    gexp = np.exp(-0.5 * q)
    a_raw = proj.opacity[s, None] * gexp
    used = a_raw >= opts.alpha_threshold
    a = np.where(used, np.minimum(a_raw, MAX_ALPHA), 0.0)
    one_minus = 1.0 - a
    T_incl = np.cumprod(one_minus, axis=0)
    T_before = np.empty_like(T_incl)
    T_before[0] = 1.0
    T_before[1:] = T_incl[:-1]
    live = T_before >= opts.transmittance_floor
    w = a * T_before * live
    t_final = np.prod(np.where(live, one_minus, 1.0), axis=0)
    return dict(dx=dx, dy=dy, gexp=gexp, a_raw=a_raw, used=used, a=a, T_before=T_before,
                live=live, w=w, t_final=t_final)


def render_with_context(camera: Camera, cloud: GaussianCloud, opts: RenderOptions = RenderOptions(),
                        need_geometry: bool = True, keep_state: bool = False):
    """Render ``cloud`` from ``camera`` and keep the replay context for gradients.

    ``keep_state`` caches the per-tile compositing terms so the backward pass
    does not recompute them (more memory, less time).
    """
    H, W = camera.height, camera.width
    if H < 1 or W < 1:
        raise InvalidInputError("zero-sized image")
    proj = Projection(camera, cloud)
    tiles = _bin_tiles(proj, camera, opts)
    npx = H * W
    color = np.empty((npx, 3))
    alpha = np.zeros(npx)
    depth = np.zeros(npx)
    normal = np.zeros((npx, 3))
    t_final = np.ones(npx)
    bg = opts.bg
    states = [] if keep_state else None
    for tile in tiles:
        rows = tile.pixel_rows
        if len(tile.splats) == 0:
            color[rows] = bg
            if keep_state:
                states.append(None)
            continue
        st = _tile_alpha(proj, tile, opts)
        if keep_state:
            states.append(st)
        w = st["w"]
        s = tile.splats
        color[rows] = w.T @ proj.color[s] + st["t_final"][:, None] * bg
        alpha[rows] = w.sum(axis=0)
        t_final[rows] = st["t_final"]
        if need_geometry:
            depth[rows] = w.T @ proj.depth[s]
            normal[rows] = w.T @ proj.normal_cam[s]

    covered = alpha > COVERAGE_EPS
    if need_geometry:
        if opts.normalize_depth:
            depth = np.where(covered, depth / np.where(covered, alpha, 1.0), 0.0)
        else:
            depth = np.where(covered, depth, 0.0)
        nn = np.linalg.norm(normal, axis=1, keepdims=True)
        normal = np.where(covered[:, None] & (nn > 0), normal / np.where(nn > 0, nn, 1.0), 0.0)
    frame = Frame(color=color.reshape(H, W, 3), depth=depth.reshape(H, W),
                  normal=normal.reshape(H, W, 3), alpha=alpha.reshape(H, W))
    return frame, RenderContext(camera, cloud, opts, proj, tiles, t_final, states)


def render(camera: Camera, cloud: GaussianCloud, opts: RenderOptions = RenderOptions()) -> Frame:
    return render_with_context(camera, cloud, opts)[0]


def splat_table(proj: Projection) -> str:
    """Tab-delimited dump of projected splats (``--dump-splats``)."""
    buf = io.StringIO()
    buf.write("gaussian\tu\tv\tdepth\tcov_xx\tcov_xy\tcov_yy\topacity\tr\tg\tb\n")
    for k in proj.order:
        c = proj.cov2d[k]
        buf.write("\t".join([str(int(proj.index[k]))] + [f"{v:.6g}" for v in (
            *proj.mean2d[k], proj.depth[k], c[0, 0], c[0, 1], c[1, 1], proj.opacity[k], *proj.color[k])]) + "\n")
    return buf.getvalue()
