"""Reader/writer for COLMAP sparse models in text form."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError, UnsupportedModelError
from .scene_model import Camera, PointCloud, intrinsics, quat_to_rotmat, rotmat_to_quat

SUPPORTED_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


def _data_lines(path: Path, keep_blank=False):
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if not line and not keep_blank:
                continue
            yield no, line


def _floats(path, no, tokens, what):
    try:
        return [float(x) for x in tokens]
    except ValueError:
        raise ParseError(path, no, f"expected numbers in {what}") from None


def _read_cameras(path: Path) -> dict:
    cams = {}
    for no, line in _data_lines(path):
        tok = line.split()
        if len(tok) < 4:
            raise ParseError(path, no, "camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS...")
        try:
            cam_id, width, height = int(tok[0]), int(tok[2]), int(tok[3])
        except ValueError:
            raise ParseError(path, no, "bad camera id or image size") from None
        model = tok[1]
        params = _floats(path, no, tok[4:], "camera parameters")
        if model in SUPPORTED_MODELS and len(params) != SUPPORTED_MODELS[model]:
            raise ParseError(path, no, f"{model} expects {SUPPORTED_MODELS[model]} parameters")
        cams[cam_id] = (model, width, height, params)
    return cams


def _intrinsic_matrix(model, params):
    if model == "PINHOLE":
        return intrinsics(*params)
    f, cx, cy = params
    return intrinsics(f, f, cx, cy)


def load_colmap_model(directory) -> tuple:
    """Load ``cameras.txt``, ``images.txt`` and ``points3D.txt``.

    Returns one :class:`Camera` per registered image (camera id = IMAGE_ID,
    ordered by id) and the sparse :class:`PointCloud`.
    """
    directory = Path(directory)
    paths = {name: directory / name for name in ("cameras.txt", "images.txt", "points3D.txt")}
    for name, p in paths.items():
        if not p.is_file():
            raise InvalidInputError(f"missing COLMAP file: {p}")

    intr = _read_cameras(paths["cameras.txt"])

    cameras = []
    lines = _data_lines(paths["images.txt"], keep_blank=True)
    for no, line in lines:
        if not line:
            continue
        tok = line.split()
        if len(tok) < 10:
            raise ParseError(paths["images.txt"], no, "image line needs 10 fields")
        try:
            image_id, cam_ref = int(tok[0]), int(tok[8])
        except ValueError:
            raise ParseError(paths["images.txt"], no, "bad image or camera id") from None
        qt = _floats(paths["images.txt"], no, tok[1:8], "pose")
        name = " ".join(tok[9:])
        next(lines, None)  # POINTS2D line, unused
        if cam_ref not in intr:
            raise ParseError(paths["images.txt"], no, f"unknown camera id {cam_ref}")
        model, width, height, params = intr[cam_ref]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedModelError(
                f"image {image_id} uses camera model {model}; only PINHOLE and SIMPLE_PINHOLE are supported"
            )
        q = np.array(qt[:4])
        if np.linalg.norm(q) == 0:
            raise ParseError(paths["images.txt"], no, "zero quaternion")
        cameras.append(Camera(image_id, _intrinsic_matrix(model, params), quat_to_rotmat(q),
                              np.array(qt[4:7]), width, height, name))
    cameras.sort(key=lambda c: c.id)

    ids, xyz, rgb, tracks = [], [], [], []
    for no, line in _data_lines(paths["points3D.txt"]):
        tok = line.split()
        if len(tok) < 8:
            raise ParseError(paths["points3D.txt"], no, "point line needs at least 8 fields")
        try:
            ids.append(int(tok[0]))
        except ValueError:
            raise ParseError(paths["points3D.txt"], no, "bad point id") from None
        vals = _floats(paths["points3D.txt"], no, tok[1:8], "point record")
        xyz.append(vals[:3])
        rgb.append([v / 255.0 for v in vals[3:6]])
        tracks.append((len(tok) - 8) // 2)
    if not ids:
        return cameras, PointCloud.empty()
    return cameras, PointCloud(ids, xyz, np.clip(rgb, 0.0, 1.0), tracks)


def write_colmap_model(directory, cameras, cloud: PointCloud) -> None:
    """Write a sparse text model that :func:`load_colmap_model` reads back exactly
    up to float formatting (17 significant digits)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam in cameras:
            fh.write(f"{cam.id} PINHOLE {cam.width} {cam.height} "
                     f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}\n")
    with open(directory / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for cam in cameras:
            q = rotmat_to_quat(cam.R)
            vals = " ".join(repr(float(v)) for v in (*q, *cam.t))
            name = cam.image_path or f"{cam.id:05d}.png"
            fh.write(f"{cam.id} {vals} {cam.id} {name}\n\n")
    with open(directory / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for i in range(len(cloud)):
            x, y, z = (repr(float(v)) for v in cloud.positions[i])
            r, g, b = (int(round(v * 255)) for v in cloud.colors[i])
            track = " ".join("0 0" for _ in range(int(cloud.track_lengths[i])))
            fh.write(f"{int(cloud.ids[i])} {x} {y} {z} {r} {g} {b} 0 {track}".rstrip() + "\n")
