"""Command-line pipeline: synth -> partition -> train -> render -> eval.

Scene directory layout (written by ``synth``, or any COLMAP text model)::

    <scene>/sparse/{cameras,images,points3D}.txt   (or the three files at the top level)
    <scene>/images/<image name>                     PNG training and ground-truth images
    <scene>/depth/<id>.depth                        ground-truth depth (synthetic scenes only)

Every 8th camera (by id order, starting with the first) is held out from
training and used by ``render`` and ``eval``.

Exit codes: 0 success, 2 usage or input error, 3 output already exists,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io as rio
from .colmap import load_colmap_model, write_colmap_model
from .errors import (ContractViolation, EmptyRegionError, InvalidInputError, MergeError, PartitionError,
                     RegionSplatError, TrainingCollapseError, TrainingDivergenceError)
from .metrics import MetricReport, memory_report, psnr, ssim
from .partitioner import Partition, load_partition, partition_scene, save_partition
from .rasterizer import RenderOptions, project_gaussians, splat_table
from .router import DensePoints, build_global, decision_log, render_view, route
from .scene_model import DEFAULT_PATCH_PX, Camera, PointCloud
from .synthetic import (generate_synthetic_scene, load_scene_spec, single_plane_spec, three_room_spec)
from .trainer.train import TrainConfig, train_region_full

log = logging.getLogger("regionsplat")

EXIT_OK, EXIT_INPUT, EXIT_COLLISION, EXIT_DIVERGENCE = 0, 2, 3, 4
HOLDOUT_EVERY = 8
PRESETS = {"three-room": three_room_spec, "plane": single_plane_spec}


class OutputCollision(RegionSplatError):
    pass


# ----------------------------------------------------------------------------
# scene helpers
# ----------------------------------------------------------------------------

def split_views(cameras: Sequence[Camera], every: int = HOLDOUT_EVERY) -> Tuple[List[Camera], List[Camera]]:
    """``(train, held_out)``: every ``every``-th camera in id order is held out (0 disables)."""
    cams = sorted(cameras, key=lambda c: c.id)
    if every <= 0:
        return cams, []
    return ([c for i, c in enumerate(cams) if i % every],
            [c for i, c in enumerate(cams) if i % every == 0])


def _sparse_dir(scene: Path) -> Path:
    return scene / "sparse" if (scene / "sparse" / "cameras.txt").is_file() else scene


def load_scene(scene) -> Tuple[List[Camera], PointCloud]:
    scene = Path(scene)
    if not scene.is_dir():
        raise InvalidInputError(f"scene directory not found: {scene}")
    return load_colmap_model(_sparse_dir(scene))


def load_images(scene, cameras: Sequence[Camera]) -> Dict[int, np.ndarray]:
    scene = Path(scene)
    out = {}
    for cam in cameras:
        img = rio.read_png(scene / "images" / (cam.image_path or f"{cam.id:05d}.png"))
        if img.shape[:2] != cam.shape:
            raise InvalidInputError(f"image {cam.image_path} is {img.shape[1]}x{img.shape[0]}, "
                                    f"camera {cam.id} expects {cam.width}x{cam.height}")
        out[cam.id] = img
    return out


def _claim(*paths: Path) -> None:
    """Refuse to overwrite earlier results."""
    taken = [str(p) for p in paths if p.exists()]
    if taken:
        raise OutputCollision(f"output already exists: {', '.join(taken)}")


def _view_name(cam: Camera) -> str:
    return Path(cam.image_path).stem if cam.image_path else f"{cam.id:05d}"


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.scene in PRESETS:
        spec = PRESETS[args.scene](seed=args.seed if args.seed is not None else 0)
    else:
        spec = load_scene_spec(args.scene)
        if args.seed is not None:
            spec.seed = args.seed
    _claim(out / "sparse", out / "images")
    cameras, cloud, frames = generate_synthetic_scene(spec)
    write_colmap_model(out / "sparse", cameras, cloud)
    (out / "images").mkdir(parents=True)
    (out / "depth").mkdir(exist_ok=True)
    for cam, fr in zip(cameras, frames):
        rio.write_png(out / "images" / cam.image_path, fr.color)
        rio.write_depth(out / "depth" / f"{cam.id:05d}.depth", fr.depth)
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    print(f"wrote {len(cameras)} cameras and {len(cloud)} points to {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cameras, cloud = load_scene(args.scene)
    train, _ = split_views(cameras, args.holdout_every)
    out = Path(args.out)
    _claim(out)
    part = partition_scene(train, cloud, args.regions, seed=args.seed or 0, patch_px=args.patch_px,
                           cloud_patch_px=args.cloud_patch_px)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_partition(out, part)
    summary = part.summary()
    out.with_suffix(".tsv").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    data = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise InvalidInputError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{p}: {exc}") from None
    if args.iterations is not None:
        data["iterations"] = args.iterations
    if args.seed is not None:
        data["seed"] = args.seed
    return TrainConfig.from_dict(data)


def _train_worker(job):
    region, cameras, images, cloud, config = job
    res = train_region_full(region, cameras, images, cloud, config)
    return res.cloud, res.log


def _write_log(path: Path, rows: Sequence[dict]) -> None:
    keys = ("iteration", "loss", "gaussians", "peak_gaussians")
    lines = ["\t".join(keys)] + ["\t".join(f"{r[k]:.9g}" if k == "loss" else str(r[k]) for k in keys) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_log(path) -> List[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        it, loss, g, peak = line.split("\t")
        rows.append({"iteration": int(it), "loss": float(loss), "gaussians": int(g), "peak_gaussians": int(peak)})
    return rows


def cmd_train(args) -> int:
    config = _load_config(args)
    cameras, cloud = load_scene(args.scene)
    train, _ = split_views(cameras, args.holdout_every)
    if args.partition:
        part = load_partition(args.partition)
    else:
        part = partition_scene(train, cloud, args.regions, seed=args.seed or 0, patch_px=args.patch_px,
                               cloud_patch_px=args.cloud_patch_px)
    out = Path(args.out)
    n = part.model.n
    _claim(out / "global.gsc", *(out / f"region_{i}.gsc" for i in range(n)))
    out.mkdir(parents=True, exist_ok=True)
    if not args.partition:
        save_partition(out / "partition.json", part)
    images = load_images(args.scene, train)
    jobs = [(r, train, {c: images[c] for c in r.camera_ids if c in images}, cloud, config) for r in part.regions]
    if args.jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, n)) as pool:
            results = list(pool.map(_train_worker, jobs))
    else:
        results = [_train_worker(j) for j in jobs]

    locals_ = [c for c, _ in results]
    h = config.hash()
    for i, (c, rows) in enumerate(results):
        rio.save_cloud(out / f"region_{i}.gsc", c, h)
        _write_log(out / f"region_{i}_log.tsv", rows)
        if args.dump_splats:
            cam = next(c2 for c2 in train if c2.id in part.regions[i].camera_ids)
            (out / f"region_{i}_splats.tsv").write_text(splat_table(project_gaussians(cam, c)))
    glob = build_global(locals_, part.model)
    rio.save_cloud(out / "global.gsc", glob, h)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    report = memory_report(locals_, glob, [rows for _, rows in results])
    (out / "memory.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _partition_for(args) -> Partition:
    if args.partition:
        return load_partition(args.partition)
    p = Path(args.clouds) / "partition.json"
    if not p.is_file():
        raise InvalidInputError(f"no partition given and none found at {p}")
    return load_partition(p)


def load_clouds(clouds_dir, n: int):
    d = Path(clouds_dir)
    return [rio.load_cloud(d / f"region_{i}.gsc") for i in range(n)], rio.load_cloud(d / "global.gsc")


def cmd_render(args) -> int:
    cameras, _ = load_scene(args.scene)
    _, held = split_views(cameras, args.holdout_every)
    views = held if args.views == "heldout" else sorted(cameras, key=lambda c: c.id)
    part = _partition_for(args)
    locals_, glob = load_clouds(args.clouds, part.model.n)
    out = Path(args.out)
    logpath = Path(args.decision_log) if args.decision_log else out / "decisions.tsv"
    _claim(out / "renders", logpath)
    (out / "renders").mkdir(parents=True)
    dense = DensePoints.from_global(glob, part.model)
    bg = json.loads((Path(args.clouds) / "config.json").read_text()).get("background", [0, 0, 0]) \
        if (Path(args.clouds) / "config.json").is_file() else [0, 0, 0]
    opts = RenderOptions(background=tuple(bg))
    rows = []
    for cam in views:
        d = route(cam, part.model, part.regions, dense, part.model.n, args.patch_px)
        if args.mode == "global":
            d = dataclasses.replace(d, local_region=None)
        frame = render_view(d, locals_, glob, cam, opts)
        rio.write_png(out / "renders" / f"{_view_name(cam)}.png", frame.color)
        rows.append((cam.id, d))
    logpath.parent.mkdir(parents=True, exist_ok=True)
    logpath.write_text(decision_log(rows))
    n_local = sum(d.is_local for _, d in rows)
    print(f"rendered {len(rows)} views ({n_local} local, {len(rows) - n_local} global)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cameras, _ = load_scene(args.scene)
    _, held = split_views(cameras, args.holdout_every)
    renders = Path(args.renders)
    ps, ss = [], []
    for cam in held:
        gt = load_images(args.scene, [cam])[cam.id]
        img = rio.read_png(renders / f"{_view_name(cam)}.png")
        ps.append(psnr(img, gt))
        ss.append(ssim(img, gt))
    if not ps:
        raise InvalidInputError("no held-out views to evaluate")
    report = MetricReport(float(np.mean(ps)), float(np.mean(ss)))
    if args.clouds:
        d = Path(args.clouds)
        n = len(list(d.glob("region_*.gsc")))
        locals_, glob = load_clouds(d, n)
        mem = memory_report(locals_, glob, [read_log(d / f"region_{i}_log.tsv") for i in range(n)])
        report.gaussian_counts, report.peak_resident_gaussians = mem.gaussian_counts, mem.peak_resident_gaussians
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        _claim(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regionsplat", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene_help="scene directory"):
        sp.add_argument("--scene", required=True, help=scene_help)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--holdout-every", type=int, default=HOLDOUT_EVERY,
                        help="hold out every n-th camera (0 keeps all for training)")

    s = sub.add_parser("synth", help="write a synthetic scene")
    common(s, f"scene spec JSON file or preset ({', '.join(PRESETS)})")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("partition", help="split cameras and points into regions")
    common(s)
    s.add_argument("--regions", type=int, required=True)
    s.add_argument("--patch-px", type=int, default=DEFAULT_PATCH_PX)
    s.add_argument("--cloud-patch-px", type=int, default=1)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", help="train every region and merge the global cloud")
    common(s)
    s.add_argument("--partition", help="partition file (default: partition the scene with --regions)")
    s.add_argument("--regions", type=int, default=1)
    s.add_argument("--patch-px", type=int, default=DEFAULT_PATCH_PX)
    s.add_argument("--cloud-patch-px", type=int, default=1)
    s.add_argument("--config", help="JSON file of training options")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--dump-splats", action="store_true", help="write projected splats of each region")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="route and render views")
    common(s)
    s.add_argument("--clouds", required=True, help="output directory of train")
    s.add_argument("--partition")
    s.add_argument("--patch-px", type=int, default=DEFAULT_PATCH_PX)
    s.add_argument("--views", choices=("heldout", "all"), default="heldout")
    s.add_argument("--mode", choices=("routed", "global"), default="routed")
    s.add_argument("--decision-log", help="decision log path (default: <out>/decisions.tsv)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="metrics of rendered held-out views")
    s.add_argument("--scene", required=True)
    s.add_argument("--renders", required=True, help="directory of rendered PNGs")
    s.add_argument("--clouds", help="train output directory for Gaussian counts")
    s.add_argument("--out")
    s.add_argument("--holdout-every", type=int, default=HOLDOUT_EVERY)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if getattr(args, "regions", 1) is not None and getattr(args, "regions", 1) < 1:
        log.error("--regions must be >= 1")
        return EXIT_INPUT
    if getattr(args, "jobs", 1) < 1:
        log.error("--jobs must be >= 1")
        return EXIT_INPUT
    try:
        return args.func(args)
    except OutputCollision as exc:
        log.error("%s", exc)
        return EXIT_COLLISION
    except (TrainingDivergenceError, TrainingCollapseError) as exc:
        log.error("%s", exc)
        return EXIT_DIVERGENCE
    except (InvalidInputError, PartitionError, EmptyRegionError, MergeError, ContractViolation,
            FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
