"""Camera-position k-means regions with visibility-driven camera selection.

Partition file (JSON)::

    {"n_regions": N, "seed": s, "patch_px": p, "iterations_run": k,
     "centroids": [[x, y, z], ...],
     "regions": [{"id": i, "centroid": [...], "distance_threshold": g,
                  "camera_ids": [...], "point_ids": [...]}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import EmptyRegionError, InvalidInputError, PartitionError
from .scene_model import DEFAULT_PATCH_PX, Camera, PointCloud, visible_indices

KMEANS_MAX_ITER = 100


@dataclass
class KMeansModel:
    centroids: np.ndarray
    seed: int = 0
    iterations_run: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 3)
        if len(self.centroids) < 1:
            raise InvalidInputError("k-means model needs at least one centroid")

    @property
    def n(self) -> int:
        return len(self.centroids)

    def assign(self, positions: np.ndarray) -> np.ndarray:
        """Nearest-centroid labels for ``(m, 3)`` positions; ties go to the lowest id."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(positions)):
            raise InvalidInputError("non-finite position")
        d2 = ((positions[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)  # argmin returns the first minimum


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None]) ** 2).sum(axis=2)


def fit_kmeans(positions, n: int, seed: int = 0) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations (at most 100).

    An empty cluster is re-seeded with the point farthest from its assigned
    centroid. Deterministic for a fixed ``seed``.
    """
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if n < 1:
        raise InvalidInputError("number of regions must be >= 1")
    if len(x) < n:
        raise InvalidInputError(f"{len(x)} positions cannot form {n} clusters")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite camera position")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, n):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2) / total, rng.random(), side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
    c = np.array(centers)
    labels = None
    it = 0
    for it in range(1, KMEANS_MAX_ITER + 1):
        new = np.argmin(_sq_dists(x, c), axis=1)
        new = _repair_empty(x, c, new)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        c = np.array([x[labels == k].mean(axis=0) for k in range(n)])
    return KMeansModel(c, seed, it)


def _repair_empty(x: np.ndarray, c: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = len(c)
    labels = labels.copy()
    for k in range(n):
        if np.any(labels == k):
            continue
        d = np.sqrt(((x - c[labels]) ** 2).sum(axis=1))
        # only steal from clusters that keep at least one member
        sizes = np.bincount(labels, minlength=n)
        d = np.where(sizes[labels] > 1, d, -1.0)
        far = int(np.argmax(d))
        if d[far] < 0:
            continue
        labels[far] = k
    return labels


def assign_region(position, model: KMeansModel) -> int:
    p = np.asarray(position, dtype=np.float64).reshape(-1)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidInputError(f"position must be a finite 3-vector, got {position!r}")
    return int(model.assign(p[None])[0])


# ----------------------------------------------------------------------------
# visibility mask
# ----------------------------------------------------------------------------

def visibility_counts(camera: Camera, region_point_ids, cloud: PointCloud,
                      patch_px: int = DEFAULT_PATCH_PX) -> Tuple[int, int]:
    """``(M_A, M_c)``: visible points owned by the region and all visible points."""
    rows = visible_indices(camera, cloud.positions, patch_px, cloud.ids)
    ids = cloud.ids[rows]
    owned = np.isin(ids, np.fromiter(region_point_ids, dtype=np.int64, count=len(region_point_ids)))
    return int(owned.sum()), int(len(ids))


def mask_rule(m_a: int, m_c: int, n: int) -> bool:
    """``M_A / M_c > 1 / N`` evaluated exactly in integers; ``N = 1`` keeps any camera with ``M_c > 0``."""
    if m_c <= 0:
        return False
    if n == 1:
        return True
    return m_a * n > m_c


def camera_mask(camera: Camera, region_point_ids, cloud: PointCloud, n: int,
                patch_px: int = DEFAULT_PATCH_PX) -> bool:
    if n < 1:
        raise InvalidInputError("N must be >= 1")
    return mask_rule(*visibility_counts(camera, region_point_ids, cloud, patch_px), n)


def build_region_cloud(selected: Sequence[Camera], cloud: PointCloud, patch_px: int = DEFAULT_PATCH_PX,
                       region_id: Optional[int] = None) -> Set[int]:
    """Union of points visible from the selected cameras."""
    if not selected:
        raise InvalidInputError("no cameras selected")
    out: Set[int] = set()
    for cam in selected:
        out.update(int(i) for i in cloud.ids[visible_indices(cam, cloud.positions, patch_px, cloud.ids)])
    if not out:
        raise EmptyRegionError(f"region {region_id if region_id is not None else '?'} sees no points")
    return out


# ----------------------------------------------------------------------------
# regions
# ----------------------------------------------------------------------------

@dataclass
class Region:
    id: int
    centroid: np.ndarray
    camera_ids: List[int]
    point_ids: Set[int] = field(default_factory=set)
    distance_threshold: float = 0.0
    assigned_point_ids: Set[int] = field(default_factory=set, repr=False)

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        self.camera_ids = sorted(int(c) for c in self.camera_ids)
        self.point_ids = set(int(p) for p in self.point_ids)

    def to_dict(self) -> dict:
        return {"id": self.id, "centroid": [float(v) for v in self.centroid],
                "distance_threshold": float(self.distance_threshold),
                "camera_ids": list(self.camera_ids), "point_ids": sorted(self.point_ids),
                "assigned_point_ids": sorted(self.assigned_point_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(int(d["id"]), d["centroid"], d["camera_ids"], set(d["point_ids"]),
                   float(d["distance_threshold"]), set(d.get("assigned_point_ids", [])))


def distance_threshold(centroid, cameras: Sequence[Camera]) -> float:
    if not cameras:
        raise InvalidInputError("no cameras to compute a distance threshold")
    return float(max(np.linalg.norm(c.position - centroid) for c in cameras))


@dataclass
class Partition:
    model: KMeansModel
    regions: List[Region]
    patch_px: int = DEFAULT_PATCH_PX

    def summary(self) -> str:
        lines = ["region\tcameras\tpoints\tassigned_points\tthreshold\tcamera_ids"]
        for r in self.regions:
            lines.append(f"{r.id}\t{len(r.camera_ids)}\t{len(r.point_ids)}\t{len(r.assigned_point_ids)}\t"
                         f"{r.distance_threshold:.6g}\t{','.join(map(str, r.camera_ids))}")
        return "\n".join(lines) + "\n"


def partition_scene(cameras: Sequence[Camera], cloud: PointCloud, n: int, seed: int = 0,
                    patch_px: int = DEFAULT_PATCH_PX, cloud_patch_px: Optional[int] = None) -> Partition:
    """Cluster camera positions, assign points, select cameras per region by the
    visibility mask (over every scene camera) and build region point clouds.

    ``cloud_patch_px`` is the occlusion cell size used when gathering each
    region's point cloud (defaults to ``patch_px``).
    """
    cameras = sorted(cameras, key=lambda c: c.id)
    if n < 1 or len(cameras) < n:
        raise InvalidInputError(f"need 1 <= N <= #cameras, got N={n} with {len(cameras)} cameras")
    cloud_patch_px = patch_px if cloud_patch_px is None else cloud_patch_px
    model = fit_kmeans([c.position for c in cameras], n, seed)
    labels = model.assign(cloud.positions) if len(cloud) else np.zeros(0, dtype=np.int64)
    owned_ids = [set(int(i) for i in cloud.ids[labels == k]) for k in range(n)]

    # visibility of each camera once; ownership counts per region follow
    vis_rows = [visible_indices(c, cloud.positions, patch_px, cloud.ids) for c in cameras]
    regions = []
    for k in range(n):
        selected = []
        for cam, rows in zip(cameras, vis_rows):
            m_c = len(rows)
            m_a = int(np.sum(labels[rows] == k)) if m_c else 0
            if mask_rule(m_a, m_c, n):
                selected.append(cam)
        if not selected:
            raise PartitionError(k, "selected no cameras; reduce the number of regions")
        points = build_region_cloud(selected, cloud, cloud_patch_px, k)
        regions.append(Region(k, model.centroids[k], [c.id for c in selected], points,
                              distance_threshold(model.centroids[k], selected), owned_ids[k]))
    return Partition(model, regions, patch_px)


def save_partition(path, part: Partition) -> None:
    data = {
        "n_regions": part.model.n,
        "seed": part.model.seed,
        "iterations_run": part.model.iterations_run,
        "patch_px": part.patch_px,
        "centroids": [[float(v) for v in c] for c in part.model.centroids],
        "regions": [r.to_dict() for r in part.regions],
    }
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_partition(path) -> Partition:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"partition file not found: {path}")
    try:
        data = json.loads(path.read_text())
        model = KMeansModel(data["centroids"], data.get("seed", 0), data.get("iterations_run", 0))
        regions = [Region.from_dict(r) for r in data["regions"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed partition file ({exc})") from exc
    return Partition(model, regions, int(data.get("patch_px", DEFAULT_PATCH_PX)))
