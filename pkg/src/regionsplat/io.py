"""On-disk formats: PNG images, float depth maps and trained Gaussian clouds.

Depth map (``.depth``), little endian::

    b"DPT1" | uint32 width | uint32 height | uint32 reserved (0) | float32[height * width]

Gaussian cloud (``.gsc``), little endian::

    b"GSC1" | uint32 version (1) | uint32 count | uint32 floats_per_record (14)
    count x float32[14] = mean(3) log_scale(3) quat_wxyz(4) opacity_logit(1) color(3)

Each cloud file has a JSON sidecar ``<name>.json`` holding ``scene_center``,
``scene_radius`` and ``config_hash``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .scene_model import GaussianCloud

DEPTH_MAGIC = b"DPT1"
CLOUD_MAGIC = b"GSC1"
CLOUD_VERSION = 1
RECORD_FLOATS = 14
_HEADER = struct.Struct("<4sIII")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    """Save an ``(H, W, 3)`` or ``(H, W)`` float image in [0, 1]."""
    Image.fromarray(to_uint8(img)).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 RGB in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_normal_png(path, normal: np.ndarray) -> None:
    """Normal map mapped from [-1, 1] to [0, 255]."""
    write_png(path, (np.asarray(normal) + 1.0) * 0.5)


def write_depth(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise InvalidInputError("depth map must be 2D")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        f.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated depth file")
    magic, w, h, _ = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise InvalidInputError(f"{path}: bad depth magic {magic!r}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != w * h:
        raise InvalidInputError(f"{path}: expected {w * h} values, found {body.size}")
    return body.reshape(h, w).astype(np.float64)


def cloud_records(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate(
        [cloud.means, cloud.log_scales, cloud.quats, cloud.opacity_logits[:, None], cloud.colors], axis=1
    ).astype("<f4")


def save_cloud(path, cloud: GaussianCloud, config_hash: Optional[str] = None) -> None:
    """Write the binary cloud and its JSON sidecar (``path`` with suffix ``.json``)."""
    path = Path(path)
    rec = cloud_records(cloud)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, len(cloud), RECORD_FLOATS))
        f.write(rec.tobytes())
    side = {
        "count": len(cloud),
        "scene_center": [float(x) for x in cloud.scene_center],
        "scene_radius": float(cloud.scene_radius),
        "config_hash": config_hash,
    }
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_cloud(path) -> GaussianCloud:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"cloud file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated cloud file")
    magic, version, count, width = _HEADER.unpack_from(data)
    if magic != CLOUD_MAGIC or version != CLOUD_VERSION or width != RECORD_FLOATS:
        raise InvalidInputError(f"{path}: unsupported cloud header")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != count * RECORD_FLOATS:
        raise InvalidInputError(f"{path}: expected {count} records")
    rec = body.reshape(count, RECORD_FLOATS).astype(np.float64)
    center, radius = np.zeros(3), 1.0
    side = path.with_suffix(".json")
    if side.is_file():
        meta = json.loads(side.read_text())
        center, radius = meta["scene_center"], meta["scene_radius"]
    return GaussianCloud(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14],
                         scene_center=center, scene_radius=radius)
