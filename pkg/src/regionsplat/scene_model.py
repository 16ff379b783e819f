"""Core geometric types, pinhole projection and occlusion-aware point visibility.

Conventions used throughout the package:

* camera frame is OpenCV style (x right, y down, z forward);
* pixel ``(u, v)`` addresses the centre of column ``u`` / row ``v``, so the
  image covers ``[0, width) x [0, height)``;
* quaternions are stored ``(w, x, y, z)``, the COLMAP ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import InvalidInputError

DEPTH_EPSILON = 1e-6
DEFAULT_PATCH_PX = 16


# ----------------------------------------------------------------------------
# rotations
# ----------------------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (normalised) quaternions ``(..., 4)`` in wxyz order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


# ----------------------------------------------------------------------------
# cameras
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    """Undistorted pinhole camera with a world-to-camera rigid transform."""

    id: int
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    image_path: Optional[str] = None

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64).reshape(3, 3)
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        for a in (K, R, t):
            a.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidInputError(f"camera {self.id}: image size must be >= 1")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError(f"camera {self.id}: non-finite parameters")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError(f"camera {self.id}: R is not a proper rotation")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidInputError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise InvalidInputError(f"camera {self.id}: principal point outside the image")

    @classmethod
    def look_at(cls, id, position, target, K, width, height, up=(0.0, 0.0, 1.0), image_path=None):
        """Camera at ``position`` whose optical axis points at ``target``."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(id, K, R, -R @ position, width, height, image_path)

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return (np.asarray(points_cam, dtype=np.float64) - self.t) @ self.R

    def project(self, points: np.ndarray):
        """Vectorised projection; returns ``(uv, z, in_frustum)`` for ``(n, 3)`` points."""
        pc = self.to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        front = z > DEPTH_EPSILON
        safe_z = np.where(front, z, 1.0)
        uv = np.stack(
            [self.fx * pc[:, 0] / safe_z + self.cx, self.fy * pc[:, 1] / safe_z + self.cy], axis=1
        )
        inside = (
            front
            & (uv[:, 0] >= 0) & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)
        )
        return uv, z, inside

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with z = 1 for every pixel, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def backproject(self, uv, depth) -> np.ndarray:
        """World points for pixel coordinates ``uv`` at camera-frame depth ``depth``."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        depth = np.asarray(depth, dtype=np.float64).reshape(-1)
        pc = np.stack(
            [(uv[:, 0] - self.cx) / self.fx * depth, (uv[:, 1] - self.cy) / self.fy * depth, depth],
            axis=1,
        )
        return self.to_world(pc)

    def with_image(self, image_path: Optional[str]) -> "Camera":
        return Camera(self.id, self.K, self.R, self.t, self.width, self.height, image_path)

    def scaled(self, s: float) -> "Camera":
        """Same camera in a world whose coordinates were multiplied by ``s``."""
        return Camera(self.id, self.K, self.R, self.t * s, self.width, self.height, self.image_path)


def relative_pose(ref: Camera, src: Camera):
    """``(R, t)`` mapping reference-camera coordinates to source-camera coordinates."""
    R = src.R @ ref.R.T
    return R, src.t - R @ ref.t


# ----------------------------------------------------------------------------
# sparse points
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Point3D:
    id: int
    position: tuple
    color: tuple
    track_length: int = 0


class PointCloud:
    """Ordered sparse points stored column-wise (ids, positions, colours, track lengths)."""

    def __init__(self, ids, positions, colors=None, track_lengths=None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(ids)
        if positions.shape[0] != n:
            raise InvalidInputError("ids and positions differ in length")
        colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        track_lengths = (
            np.zeros(n, dtype=np.int64) if track_lengths is None
            else np.asarray(track_lengths, dtype=np.int64).reshape(-1)
        )
        if len(np.unique(ids)) != n:
            raise InvalidInputError("point ids must be unique")
        if not np.all(np.isfinite(positions)):
            raise InvalidInputError("point positions must be finite")
        if colors.size and (colors.min() < 0 or colors.max() > 1):
            raise InvalidInputError("point colours must lie in [0, 1]")
        self.ids = ids
        self.positions = positions
        self.colors = colors
        self.track_lengths = track_lengths
        for a in (ids, positions, colors, track_lengths):
            a.setflags(write=False)
        self._index = None

    @classmethod
    def from_points(cls, points: Sequence[Point3D]) -> "PointCloud":
        if not points:
            return cls.empty()
        return cls(
            [p.id for p in points],
            [p.position for p in points],
            [p.color for p in points],
            [p.track_length for p in points],
        )

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Point3D]:
        for i in range(len(self)):
            yield self.point(i)

    def point(self, i: int) -> Point3D:
        return Point3D(
            int(self.ids[i]), tuple(self.positions[i]), tuple(self.colors[i]), int(self.track_lengths[i])
        )

    def index_of(self, ids) -> np.ndarray:
        """Row indices for the given point ids (all must exist)."""
        if self._index is None:
            self._index = {int(k): i for i, k in enumerate(self.ids)}
        return np.array([self._index[int(k)] for k in ids], dtype=np.int64)

    def subset(self, ids) -> "PointCloud":
        ids = sorted(int(k) for k in ids)
        rows = self.index_of(ids)
        return PointCloud(self.ids[rows], self.positions[rows], self.colors[rows], self.track_lengths[rows])

    def scaled(self, s: float) -> "PointCloud":
        return PointCloud(self.ids, self.positions * s, self.colors, self.track_lengths)


# ----------------------------------------------------------------------------
# Gaussians
# ----------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic Gaussian in its stored (optimisation) parameterisation."""

    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    @property
    def covariance(self) -> np.ndarray:
        M = self.rotation * self.scale
        return M @ M.T


class GaussianCloud:
    """Structure-of-arrays container for a set of Gaussians.

    ``scene_center`` and ``scene_radius`` define the normalisation used by the
    position-aware scale factor and by density control thresholds.
    """

    FIELDS = ("means", "log_scales", "quats", "opacity_logits", "colors")

    def __init__(self, means, log_scales, quats, opacity_logits, colors,
                 scene_center=(0.0, 0.0, 0.0), scene_radius=1.0):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.array(quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        self.scene_center = np.array(scene_center, dtype=np.float64).reshape(3)
        self.scene_radius = float(scene_radius)
        if not self.scene_radius > 0:
            raise InvalidInputError("scene_radius must be positive")

    @classmethod
    def empty(cls, scene_center=(0.0, 0.0, 0.0), scene_radius=1.0) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   scene_center, scene_radius)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], scene_center=(0.0, 0.0, 0.0), scene_radius=1.0):
        if not gaussians:
            return cls.empty(scene_center, scene_radius)
        return cls(
            [g.mean for g in gaussians], [g.log_scale for g in gaussians], [g.quat for g in gaussians],
            [g.opacity_logit for g in gaussians], [g.color for g in gaussians], scene_center, scene_radius,
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                        float(self.opacity_logits[i]), self.colors[i].copy())

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    @property
    def covariances(self) -> np.ndarray:
        M = self.rotations * self.scales[:, None, :]
        return M @ np.swapaxes(M, 1, 2)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def replace(self, **arrays) -> "GaussianCloud":
        p = self.params()
        p.update(arrays)
        center = arrays.get("scene_center", self.scene_center)
        radius = arrays.get("scene_radius", self.scene_radius)
        return GaussianCloud(*(p[k] for k in self.FIELDS), scene_center=center, scene_radius=radius)

    def copy(self) -> "GaussianCloud":
        return self.replace()

    def subset(self, keep) -> "GaussianCloud":
        keep = np.asarray(keep)
        return GaussianCloud(*(getattr(self, k)[keep] for k in self.FIELDS),
                             scene_center=self.scene_center, scene_radius=self.scene_radius)

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(self, k), getattr(other, k)]) for k in self.FIELDS),
                             scene_center=self.scene_center, scene_radius=self.scene_radius)

    def fingerprint(self) -> tuple:
        """Cheap identity token used to pair a forward pass with its backward pass."""
        return (len(self), float(np.sum(self.means)), float(np.sum(self.log_scales)),
                float(np.sum(self.quats)), float(np.sum(self.opacity_logits)), float(np.sum(self.colors)))

    def equals(self, other: "GaussianCloud") -> bool:
        return (len(self) == len(other)
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.FIELDS)
                and np.array_equal(self.scene_center, other.scene_center)
                and self.scene_radius == other.scene_radius)


@dataclass
class Frame:
    """Rendered or ground-truth buffers for one camera."""

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self) -> tuple:
        return self.depth.shape


# ----------------------------------------------------------------------------
# projection & visibility
# ----------------------------------------------------------------------------

def project_point(camera: Camera, point) -> Optional[tuple]:
    """Project a world point; ``None`` when behind the camera or outside the image.

    Returns ``(pixel, depth)`` where ``pixel`` is a length-2 array.
    """
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidInputError(f"point must be a finite 3-vector, got {point!r}")
    uv, z, inside = camera.project(p[None])
    if not inside[0]:
        return None
    return uv[0], float(z[0])


def visible_indices(camera: Camera, positions: np.ndarray, patch_px: int = DEFAULT_PATCH_PX,
                    ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Row indices of the nearest projected point inside each ``patch_px`` image cell.

    Ties in depth go to the lowest id (row order when ``ids`` is omitted).
    """
    if patch_px < 1:
        raise InvalidInputError("patch_px must be >= 1")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(positions)):
        raise InvalidInputError("non-finite point position")
    uv, z, inside = camera.project(positions)
    rows = np.flatnonzero(inside)
    if len(rows) == 0:
        return rows
    cols_per_row = -(-camera.width // patch_px)
    cell = (np.floor(uv[rows, 1] / patch_px).astype(np.int64) * cols_per_row
            + np.floor(uv[rows, 0] / patch_px).astype(np.int64))
    key_id = rows if ids is None else np.asarray(ids)[rows]
    order = np.lexsort((key_id, z[rows], cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    return np.sort(rows[order[first]])


def visible_points(camera: Camera, cloud: PointCloud, patch_px: int = DEFAULT_PATCH_PX) -> set:
    """Ids of points that survive the per-patch nearest-depth occlusion filter."""
    rows = visible_indices(camera, cloud.positions, patch_px, cloud.ids)
    return set(int(i) for i in cloud.ids[rows])
