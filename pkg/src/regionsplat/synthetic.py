"""Analytic synthetic scenes: textured rectangles, a camera path, sampled points
and exact ray-cast ground truth.

Scene files are JSON documents with this schema (all lengths in scene units)::

    {
      "width": 64, "height": 48, "fov_deg": 80.0,
      "point_density": 7.0,            # sparse points per unit area
      "seed": 0,
      "samples_per_segment": 0,        # extra cameras interpolated between keyframes
      "up": [0, 0, 1],                 # world up vector for look-at cameras
      "min_track": 2,                  # keep points seen by at least this many cameras
      "surfaces": [
        {"origin": [x, y, z], "edge_u": [..], "edge_v": [..],
         "texture": {"base": [r, g, b], "alt": [r, g, b], "period": 0.5,
                     "gradient": [gu, gv]},
         "group": 0}                   # optional
      ],
      "keyframes": [{"position": [x, y, z], "target": [x, y, z], "groups": [0]}, ...]
    }

Surfaces are rectangles ``origin + s * edge_u + t * edge_v`` with ``s, t`` in
``[0, 1]``; ``edge_u`` and ``edge_v`` must be orthogonal.

Groups model a reconstruction stitched from separately matched parts: a point
on a surface with a ``group`` only counts observations from cameras listing
that group (cameras without ``groups`` observe everything). Interpolated
cameras inherit the groups of the segment's first keyframe.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidSpecError
from .scene_model import Camera, Frame, PointCloud, intrinsics, visible_indices


@dataclass
class Texture:
    base: Sequence[float] = (0.8, 0.3, 0.2)
    alt: Sequence[float] = (0.2, 0.5, 0.8)
    period: float = 0.5
    gradient: Sequence[float] = (0.1, 0.1)

    def evaluate(self, a: np.ndarray, b: np.ndarray, len_u: float, len_v: float) -> np.ndarray:
        """RGB at metric surface coordinates ``(a, b)``.

        A sinusoidal checkerboard plus an incommensurate diagonal wave keeps the
        pattern aperiodic over a matching window; the linear gradient breaks the
        remaining symmetry.
        """
        p = self.period
        checker = np.sin(2 * np.pi * a / p) * np.sin(2 * np.pi * b / p)
        wave = np.sin(2 * np.pi * (0.37 * a + 0.93 * b) / (0.77 * p) + 0.5)
        mix = np.clip(0.5 + 0.35 * checker + 0.15 * wave, 0.0, 1.0)[..., None]
        base = np.asarray(self.base, dtype=np.float64)
        alt = np.asarray(self.alt, dtype=np.float64)
        grad = (self.gradient[0] * (a / max(len_u, 1e-12) - 0.5)
                + self.gradient[1] * (b / max(len_v, 1e-12) - 0.5))[..., None]
        return np.clip(base * (1 - mix) + alt * mix + grad, 0.0, 1.0)


@dataclass
class Surface:
    origin: Sequence[float]
    edge_u: Sequence[float]
    edge_v: Sequence[float]
    texture: Texture = field(default_factory=Texture)
    group: Optional[int] = None

    def arrays(self):
        o = np.asarray(self.origin, dtype=np.float64)
        eu = np.asarray(self.edge_u, dtype=np.float64)
        ev = np.asarray(self.edge_v, dtype=np.float64)
        return o, eu, ev

    @property
    def area(self) -> float:
        _, eu, ev = self.arrays()
        return float(np.linalg.norm(np.cross(eu, ev)))

    def color_at(self, points: np.ndarray) -> np.ndarray:
        o, eu, ev = self.arrays()
        lu, lv = np.linalg.norm(eu), np.linalg.norm(ev)
        d = points - o
        return self.texture.evaluate(d @ eu / lu, d @ ev / lv, lu, lv)


@dataclass
class Keyframe:
    position: Sequence[float]
    target: Sequence[float]
    groups: Optional[List[int]] = None


@dataclass
class SceneSpec:
    surfaces: List[Surface]
    keyframes: List[Keyframe]
    width: int = 64
    height: int = 48
    fov_deg: float = 80.0
    point_density: float = 7.0
    seed: int = 0
    samples_per_segment: int = 0
    up: Sequence[float] = (0.0, 0.0, 1.0)
    min_track: int = 2

    def validate(self):
        if not self.surfaces:
            raise InvalidSpecError("scene has no surfaces")
        if not self.keyframes:
            raise InvalidSpecError("scene has no cameras")
        if self.width < 1 or self.height < 1:
            raise InvalidSpecError("image size must be positive")
        if not 0 < self.fov_deg < 180:
            raise InvalidSpecError("fov_deg must lie in (0, 180)")
        if self.point_density < 0 or self.samples_per_segment < 0 or self.min_track < 0:
            raise InvalidSpecError("density and samples_per_segment must be non-negative")
        for i, s in enumerate(self.surfaces):
            _, eu, ev = s.arrays()
            if s.area <= 0:
                raise InvalidSpecError(f"surface {i} has zero area")
            if abs(eu @ ev) > 1e-9 * np.linalg.norm(eu) * np.linalg.norm(ev):
                raise InvalidSpecError(f"surface {i}: edges must be orthogonal")
        for i, k in enumerate(self.keyframes):
            if np.allclose(k.position, k.target):
                raise InvalidSpecError(f"keyframe {i}: position equals target")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        try:
            surfaces = [
                Surface(s["origin"], s["edge_u"], s["edge_v"], Texture(**s.get("texture", {})),
                        s.get("group"))
                for s in data.get("surfaces", [])
            ]
            keyframes = [Keyframe(k["position"], k["target"], k.get("groups"))
                         for k in data.get("keyframes", [])]
            extra = {k: data[k] for k in ("width", "height", "fov_deg", "point_density", "seed",
                                          "samples_per_segment", "up", "min_track") if k in data}
        except (KeyError, TypeError) as exc:
            raise InvalidSpecError(f"malformed scene spec: {exc}") from None
        return cls(surfaces, keyframes, **extra)


def load_scene_spec(path) -> SceneSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidSpecError(f"scene spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidSpecError(f"{path}: {exc}") from None
    return SceneSpec.from_dict(data)


def save_scene_spec(spec: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

def _camera_path(spec: SceneSpec) -> List[Camera]:
    return _camera_path_groups(spec)[0]


def _camera_path_groups(spec: SceneSpec):
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    K = intrinsics(f, f, spec.width / 2.0, spec.height / 2.0)
    poses, groups = [], []
    kfs = spec.keyframes
    for i, kf in enumerate(kfs):
        poses.append((np.asarray(kf.position, float), np.asarray(kf.target, float)))
        groups.append(kf.groups)
        if i + 1 < len(kfs):
            nxt = kfs[i + 1]
            for j in range(1, spec.samples_per_segment + 1):
                s = j / (spec.samples_per_segment + 1)
                pos = (1 - s) * np.asarray(kf.position, float) + s * np.asarray(nxt.position, float)
                tgt = (1 - s) * np.asarray(kf.target, float) + s * np.asarray(nxt.target, float)
                poses.append((pos, tgt))
                groups.append(kf.groups)
    cams = [Camera.look_at(i, p, t, K, spec.width, spec.height, up=spec.up, image_path=f"{i:05d}.png")
            for i, (p, t) in enumerate(poses)]
    return cams, groups


def raycast(camera: Camera, surfaces: Sequence[Surface]):
    """Nearest surface hit per pixel.

    Returns ``(depth, surface_index, world_points)``; depth is the camera-frame z
    (0 where nothing is hit) and surface_index is -1 there.
    """
    rays_cam = camera.pixel_rays()
    dirs = rays_cam @ camera.R  # world directions, camera-frame z component = 1
    origin = camera.position
    best = np.full(camera.shape, np.inf)
    index = np.full(camera.shape, -1, dtype=np.int64)
    for k, s in enumerate(surfaces):
        o, eu, ev = s.arrays()
        n = np.cross(eu, ev)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((o - origin) @ n) / denom
            hit = origin + t[..., None] * dirs
            rel = hit - o
            a = rel @ eu / (eu @ eu)
            b = rel @ ev / (ev @ ev)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & (t < best)
        best[ok] = t[ok]
        index[ok] = k
    depth = np.where(index >= 0, best, 0.0)
    points = origin + depth[..., None] * dirs
    return depth, index, points


def render_ground_truth(camera: Camera, surfaces: Sequence[Surface]) -> Frame:
    depth, index, points = raycast(camera, surfaces)
    color = np.zeros(camera.shape + (3,))
    normal = np.zeros(camera.shape + (3,))
    for k, s in enumerate(surfaces):
        m = index == k
        if not m.any():
            continue
        color[m] = s.color_at(points[m])
        _, eu, ev = s.arrays()
        n_cam = camera.R @ (np.cross(eu, ev) / np.linalg.norm(np.cross(eu, ev)))
        n = np.broadcast_to(n_cam, (int(m.sum()), 3)).copy()
        rays = camera.pixel_rays()[m]
        flip = np.einsum("ij,ij->i", n, rays) > 0
        n[flip] *= -1
        normal[m] = n
    alpha = (index >= 0).astype(np.float64)
    return Frame(color=color, depth=depth, normal=normal, alpha=alpha)


def _sample_points(spec: SceneSpec, rng: np.random.Generator):
    pos, col, src = [], [], []
    for si, s in enumerate(spec.surfaces):
        n = int(round(s.area * spec.point_density))
        if n == 0:
            continue
        o, eu, ev = s.arrays()
        st = rng.random((n, 2))
        p = o + st[:, :1] * eu + st[:, 1:] * ev
        pos.append(p)
        col.append(s.color_at(p))
        src.append(np.full(n, si))
    if not pos:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pos), np.concatenate(col), np.concatenate(src)


def _track_lengths(positions, cameras, frames, tol=1e-6, allowed=None):
    """Cameras observing each point: unoccluded in the ground truth and front-most in its pixel.

    ``allowed`` is an optional ``(n_cameras, n_points)`` mask of observations that count.
    """
    counts = np.zeros(len(positions), dtype=np.int64)
    for ci, (cam, fr) in enumerate(zip(cameras, frames)):
        rows = visible_indices(cam, positions, patch_px=1)
        if len(rows) == 0:
            continue
        uv, z, _ = cam.project(positions[rows])
        px = np.minimum(np.floor(uv).astype(np.int64), [cam.width - 1, cam.height - 1])
        gt = fr.depth[px[:, 1], px[:, 0]]
        seen = (gt > 0) & (z <= gt * (1 + 1e-3) + tol)
        if allowed is not None:
            seen &= allowed[ci, rows]
        counts[rows[seen]] += 1
    return counts


def generate_synthetic_scene(spec: SceneSpec):
    """Cameras, sparse point cloud and exact per-camera ground truth.

    Sampled points seen by fewer than ``spec.min_track`` cameras (of their
    surface's group, when set) are dropped.

    Deterministic for a fixed ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cameras, cam_groups = _camera_path_groups(spec)
    frames = [render_ground_truth(c, spec.surfaces) for c in cameras]
    positions, colors, src = _sample_points(spec, rng)
    allowed = None
    if any(s.group is not None for s in spec.surfaces):
        surf_group = np.array([-1 if s.group is None else s.group for s in spec.surfaces])[src]
        allowed = np.array([(surf_group < 0) | (True if g is None else np.isin(surf_group, g))
                            for g in cam_groups]).reshape(len(cameras), len(positions))
    tracks = _track_lengths(positions, cameras, frames, allowed=allowed)
    # like an SfM reconstruction, only keep points observed by enough cameras
    keep = tracks >= spec.min_track
    positions, colors, tracks = positions[keep], colors[keep], tracks[keep]
    cloud = PointCloud(np.arange(1, len(positions) + 1), positions, colors, tracks)
    return cameras, cloud, frames


def corrupt_depths(cloud: PointCloud, cameras: Sequence[Camera], fraction: float = 0.2, seed: int = 0,
                   error=(0.2, 0.5)):
    """Push a random ``fraction`` of the points along their ray from the
    camera-position centroid by a relative depth error drawn from ``error``
    (too near or too far with equal probability).

    Returns the corrupted cloud (same ids, colours and tracks) and the rows
    that were moved.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(cloud)
    rows = np.sort(rng.choice(n, int(round(fraction * n)), replace=False))
    sign = rng.choice([-1.0, 1.0], len(rows))
    factor = 1.0 + sign * rng.uniform(error[0], error[1], len(rows))
    center = np.mean([c.position for c in cameras], axis=0)
    pos = cloud.positions.copy()
    pos[rows] = center + (pos[rows] - center) * factor[:, None]
    return PointCloud(cloud.ids, pos, cloud.colors, cloud.track_lengths), rows


# ----------------------------------------------------------------------------
# preset scenes
# ----------------------------------------------------------------------------

ROOM_PALETTE = [
    ((0.85, 0.35, 0.25), (0.15, 0.45, 0.75)),
    ((0.25, 0.75, 0.35), (0.70, 0.20, 0.65)),
    ((0.90, 0.80, 0.25), (0.20, 0.25, 0.55)),
]


def plane_surface(center, normal_axis="z", size=20.0, texture=None, tilt_deg=0.0) -> Surface:
    """Square plane perpendicular to the camera's z axis, optionally tilted about y."""
    c = np.asarray(center, dtype=np.float64)
    th = np.radians(tilt_deg)
    eu = np.array([np.cos(th), 0.0, np.sin(th)]) * size
    ev = np.array([0.0, 1.0, 0.0]) * size
    return Surface(list(c - 0.5 * eu - 0.5 * ev), list(eu), list(ev), texture or Texture())


def single_plane_spec(depth=5.0, n_cameras=4, width=48, height=48, seed=0, spacing=0.6,
                      point_density=12.0, period=0.8) -> SceneSpec:
    """Fronto-parallel textured plane at z = ``depth`` seen by cameras near the origin."""
    surf = plane_surface((0.0, 0.0, depth), size=8.0,
                         texture=Texture(period=period, gradient=(0.2, -0.1)))
    offsets = [(spacing * np.cos(2 * np.pi * i / n_cameras), spacing * np.sin(2 * np.pi * i / n_cameras))
               for i in range(n_cameras)]
    kfs = [Keyframe([x, y, 0.0], [0.3 * x, 0.3 * y, depth]) for x, y in offsets]
    return SceneSpec([surf], kfs, width=width, height=height, fov_deg=60.0,
                     point_density=point_density, seed=seed, up=(0.0, -1.0, 0.0))


def three_room_spec(width=64, height=48, seed=0, point_density=13.0, cams_per_room=10,
                    room_size=8.0, wall_height=3.0, fov_deg=80.0, wall_thickness=0.4) -> SceneSpec:
    """Three rooms in a row along x joined by doorways, with a camera loop per room
    and one camera standing in the doorway between rooms 0 and 1.

    Dividing walls have two faces ``wall_thickness`` apart, so each face lies
    nearer to its own room than to the neighbouring one. Surfaces and cameras
    carry their room as group, so sparse points are triangulated per room."""
    half = room_size / 2
    H = wall_height
    door_half, door_h = 1.0, 2.2
    surfaces = []
    for k in range(3):
        base, alt = ROOM_PALETTE[k]
        tex = Texture(base, alt, period=0.9, gradient=(0.15, 0.1))
        x0 = k * room_size - half
        # floor between this room's wall faces (no floor strip under the doorways)
        f0 = x0 + (0.5 * wall_thickness if k > 0 else 0.0)
        f1 = x0 + room_size - (0.5 * wall_thickness if k < 2 else 0.0)
        surfaces.append(Surface([f0, -half, 0.0], [f1 - f0, 0, 0], [0, room_size, 0], tex, k))
        surfaces.append(Surface([x0, half, 0.0], [room_size, 0, 0], [0, 0, H], tex, k))  # back wall
        surfaces.append(Surface([x0, -half, 0.0], [room_size, 0, 0], [0, 0, H], tex, k))  # front wall
    end_tex = Texture((0.6, 0.6, 0.6), (0.1, 0.1, 0.1), period=0.7)
    surfaces.append(Surface([-half, -half, 0.0], [0, room_size, 0], [0, 0, H], end_tex, 0))
    surfaces.append(Surface([3 * room_size - half, -half, 0.0], [0, room_size, 0], [0, 0, H], end_tex, 2))
    for k, side in ((1, -1), (1, 1), (2, -1), (2, 1)):
        x = k * room_size - half + side * 0.5 * wall_thickness
        room = k - 1 if side < 0 else k  # the room this face looks into
        tex = Texture((0.5, 0.3, 0.1), (0.95, 0.9, 0.8), period=0.6)
        surfaces.append(Surface([x, -half, 0.0], [0, half - door_half, 0], [0, 0, H], tex, room))
        surfaces.append(Surface([x, door_half, 0.0], [0, half - door_half, 0], [0, 0, H], tex, room))
        surfaces.append(Surface([x, -door_half, door_h], [0, 2 * door_half, 0], [0, 0, H - door_h], tex, room))

    keyframes = []

    def room_loop(k):
        cx = k * room_size
        for j in range(cams_per_room):
            th = 2 * np.pi * j / cams_per_room + 0.3
            pos = [cx + 0.22 * room_size * np.cos(th), 0.22 * room_size * np.sin(th), 1.6]
            # look across the room, through its centre, at the opposite wall
            tgt = [cx - half * np.cos(th), -half * np.sin(th), 0.0]
            keyframes.append(Keyframe(pos, tgt, [k]))

    room_loop(0)
    keyframes.append(Keyframe([half, 0.0, 1.6], [half, half, 1.0], [0, 1]))  # doorway camera
    room_loop(1)
    room_loop(2)
    return SceneSpec(surfaces, keyframes, width=width, height=height, fov_deg=fov_deg,
                     point_density=point_density, seed=seed)


def doorway_camera_index(cams_per_room=10) -> int:
    return cams_per_room


def stereo_plane_spec(tilt_deg=0.0, size=128, depth=5.0, baseline=0.5, seed=0) -> SceneSpec:
    """Reference camera at the origin plus two source cameras offset along x and y."""
    tex = Texture((0.9, 0.6, 0.2), (0.1, 0.2, 0.6), period=0.35, gradient=(0.2, 0.15))
    surf = plane_surface((0.0, 0.0, depth), size=12.0, texture=tex, tilt_deg=tilt_deg)
    kfs = [
        Keyframe([0.0, 0.0, 0.0], [0.0, 0.0, depth]),
        Keyframe([baseline, 0.0, 0.0], [0.0, 0.0, depth]),
        Keyframe([0.0, baseline, 0.0], [0.0, 0.0, depth]),
    ]
    return SceneSpec([surf], kfs, width=size, height=size, fov_deg=60.0, point_density=2.0, seed=seed,
                     up=(0.0, -1.0, 0.0))
