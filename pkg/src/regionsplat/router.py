"""Global merge of region clouds and per-view local/global routing.

Decision log (tab separated, one header line)::

    view_id  verdict  region  distance  threshold  distance_ok  own  total  ratio  visibility_ok  n

``verdict`` is ``local`` or ``global``; ``region`` is the region the view's
position is assigned to; ``ratio`` is ``own / total`` (``nan`` when the view
sees no dense point).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import ContractViolation, InvalidInputError, MergeError
from .partitioner import KMeansModel, Region, mask_rule
from .rasterizer import RenderOptions, render
from .scene_model import DEFAULT_PATCH_PX, Camera, Frame, GaussianCloud, visible_indices

LOG_HEADER = ("view_id", "verdict", "region", "distance", "threshold", "distance_ok",
              "own", "total", "ratio", "visibility_ok", "n")


def build_global(locals_: Sequence[GaussianCloud], model: KMeansModel) -> GaussianCloud:
    """Trim every region cloud to its own k-means cell and concatenate the rest.

    Scene centre and radius of the result are the mean of the kept means and
    the largest distance from it.
    """
    if len(locals_) != model.n:
        raise InvalidInputError(f"expected {model.n} region clouds, got {len(locals_)}")
    parts = []
    for i, cloud in enumerate(locals_):
        if len(cloud) == 0:
            continue
        parts.append(cloud.subset(np.flatnonzero(model.assign(cloud.means) == i)))
    kept = [p for p in parts if len(p)]
    if not kept:
        raise MergeError("no Gaussian lies inside its own region; the global cloud is empty")
    merged = kept[0]
    for p in kept[1:]:
        merged = merged.concat(p)
    center = merged.means.mean(axis=0)
    radius = float(np.linalg.norm(merged.means - center, axis=1).max())
    return GaussianCloud(merged.means, merged.log_scales, merged.quats, merged.opacity_logits,
                         merged.colors, scene_center=center, scene_radius=radius if radius > 0 else 1.0)


def region_threshold(region: Region, cameras: Sequence[Camera]) -> float:
    """Largest distance from the region centroid to one of its selected cameras.

    ``cameras`` is the scene camera list; the region's ``camera_ids`` pick from it.
    """
    by_id = {c.id: c for c in cameras}
    missing = [i for i in region.camera_ids if i not in by_id]
    if missing:
        raise ContractViolation(f"region {region.id}: unknown camera ids {missing}")
    if not region.camera_ids:
        raise ContractViolation(f"region {region.id} has no selected cameras")
    return float(max(np.linalg.norm(by_id[i].position - region.centroid) for i in region.camera_ids))


@dataclass
class DensePoints:
    """Trained Gaussian means with the region owning each one."""

    positions: np.ndarray
    owners: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.owners = np.asarray(self.owners, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.owners):
            raise InvalidInputError("one owner per dense point required")

    @classmethod
    def from_global(cls, global_cloud: GaussianCloud, model: KMeansModel) -> "DensePoints":
        means = global_cloud.means
        return cls(means, model.assign(means) if len(means) else np.zeros(0, dtype=np.int64))

    @classmethod
    def from_regions(cls, per_region: Sequence[np.ndarray]) -> "DensePoints":
        """Concatenate per-region point arrays, tagging each with its list index."""
        pos = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in per_region]
        owners = [np.full(len(p), i) for i, p in enumerate(pos)]
        if not pos:
            return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        return cls(np.concatenate(pos), np.concatenate(owners))


@dataclass
class RouteDecision:
    local_region: Optional[int]  # None means the global cloud
    assigned_region: int
    distance: float
    threshold: float
    distance_ok: bool
    own: int
    total: int
    visibility_ok: bool
    n: int

    @property
    def is_local(self) -> bool:
        return self.local_region is not None

    @property
    def ratio(self) -> float:
        return self.own / self.total if self.total else math.nan

    @property
    def zero_visibility(self) -> bool:
        return self.total == 0

    @property
    def verdict(self) -> str:
        return "local" if self.is_local else "global"

    def log_row(self, view_id) -> str:
        vals = (view_id, self.verdict, self.assigned_region, f"{self.distance:.9g}", f"{self.threshold:.9g}",
                int(self.distance_ok), self.own, self.total, f"{self.ratio:.9g}", int(self.visibility_ok), self.n)
        return "\t".join(str(v) for v in vals)


def route(view: Camera, model: KMeansModel, regions: Sequence[Region], dense: DensePoints, n: int,
          patch_px: int = DEFAULT_PATCH_PX) -> RouteDecision:
    """Local when the view is strictly inside its region's distance threshold and
    its region owns strictly more than ``1/n`` of the dense points it sees.

    ``n = 1`` waives the visibility share. A view that sees no dense point is
    always routed to the global cloud.
    """
    if n < 1:
        raise InvalidInputError("N must be >= 1")
    by_id: Dict[int, Region] = {r.id: r for r in regions}
    i = int(model.assign(view.position[None])[0])
    if i not in by_id:
        raise ContractViolation(f"no region record for assigned region {i}")
    region = by_id[i]
    distance = float(np.linalg.norm(view.position - model.centroids[i]))
    threshold = float(region.distance_threshold)
    distance_ok = distance < threshold

    rows = visible_indices(view, dense.positions, patch_px)
    total = int(len(rows))
    own = int(np.sum(dense.owners[rows] == i)) if total else 0
    visibility_ok = mask_rule(own, total, n)  # n = 1: any visible point
    local = i if distance_ok and visibility_ok else None
    return RouteDecision(local, i, distance, threshold, distance_ok, own, total, visibility_ok, n)


def render_view(decision: RouteDecision, locals_: Sequence[GaussianCloud], global_cloud: GaussianCloud,
                view: Camera, opts: RenderOptions = RenderOptions()) -> Frame:
    """Render the untrimmed local cloud for a local verdict, else the global cloud."""
    if decision.is_local:
        i = decision.local_region
        if i >= len(locals_) or locals_[i] is None:
            raise ContractViolation(f"no local cloud for region {i}")
        return render(view, locals_[i], opts)
    return render(view, global_cloud, opts)


def decision_log(rows: Sequence[tuple]) -> str:
    """Format ``(view_id, RouteDecision)`` pairs as the tab-separated log."""
    lines = ["\t".join(LOG_HEADER)]
    lines.extend(d.log_row(v) for v, d in rows)
    return "\n".join(lines) + "\n"


def parse_decision_log(text: str) -> list:
    """Rows of the log as dicts with typed fields."""
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or tuple(lines[0].split("\t")) != LOG_HEADER:
        raise InvalidInputError("not a decision log")
    out = []
    for line in lines[1:]:
        v = dict(zip(LOG_HEADER, line.split("\t")))
        out.append({
            "view_id": int(v["view_id"]), "verdict": v["verdict"], "region": int(v["region"]),
            "distance": float(v["distance"]), "threshold": float(v["threshold"]),
            "distance_ok": v["distance_ok"] == "1", "own": int(v["own"]), "total": int(v["total"]),
            "ratio": float(v["ratio"]), "visibility_ok": v["visibility_ok"] == "1", "n": int(v["n"]),
        })
    return out
