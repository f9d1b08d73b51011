"""``rimap`` command line: map, mesh, eval, simulate.

Exit codes: 0 ok, 1 usage, 2 data error, 3 internal invariant violation.
Verbosity comes from the RIM_LOG environment variable (DEBUG, INFO, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import MapperConfig, read_config
from .data_io import read_frame_cloud, read_mesh, read_ply, read_poses, write_mesh
from .errors import ConfigError, DataFormatError, RimError
from .evaluator import MapMetrics, compute_metrics, crop_ground_truth, read_visited, sample_surface, write_visited
from .simulator import generate_sequence, read_scene, read_sensor
from .trainer import TIMING_KEYS, Mapper

log = logging.getLogger("rimap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
ONLINE_ITERATIONS = 10


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _frame_path(frames_dir: Path, frame_id: int) -> Path:
    for ext in (".ply", ".xyz", ".txt"):
        p = frames_dir / f"{frame_id:06d}{ext}"
        if p.exists():
            return p
    raise DataFormatError(f"no cloud file for frame {frame_id} in {frames_dir}")


def _write_json_atomic(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1))
    tmp.replace(path)


def cmd_map(args) -> int:
    cfg = read_config(args.config) if args.config else MapperConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.online:
        cfg.trainer.iterations_per_frame = ONLINE_ITERATIONS
    poses = read_poses(args.poses)
    frames_dir = Path(args.frames_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    work = out / "work"
    shutil.rmtree(work, ignore_errors=True)
    ckpt = out / "checkpoint"
    try:
        mapper = Mapper(cfg, work_dir=work)
        frames = []
        started = time.time()
        for pose in poses:
            cloud, dropped = read_frame_cloud(_frame_path(frames_dir, pose.frame_id), return_dropped=True)
            report = mapper.integrate_frame(pose, cloud, pose.frame_id)
            report.n_dropped += dropped
            frames.append(report.to_dict())
        mapper.checkpoint(ckpt)
    except BaseException:
        shutil.rmtree(ckpt, ignore_errors=True)
        raise
    finally:
        shutil.rmtree(work, ignore_errors=True)
    write_visited(mapper.visited, out / "visited.txt")
    timing = {k: mapper.timing[k] for k in TIMING_KEYS}
    covered = sum(timing.values())
    manifest = {
        "config": cfg.to_dict(),
        "inputs": {"poses": str(args.poses), "frames_dir": str(frames_dir),
                   "config": None if args.config is None else str(args.config)},
        "seed": cfg.run.seed,
        "online": bool(args.online),
        "frames": frames,
        "outputs": {"checkpoint": "checkpoint", "visited": "visited.txt"},
        # wall-clock fields; ignored when comparing runs
        "timing": {"modules_s": timing, "frame_wall_s": mapper.frame_time,
                   "coverage": covered / mapper.frame_time if mapper.frame_time > 0 else 1.0},
        "timestamps": {"started": started, "finished": time.time()},
    }
    _write_json_atomic(manifest, out / "manifest.json")
    print(f"mapped {len(poses)} frames; checkpoint at {ckpt}")
    return EXIT_OK


def _parse_region(text):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 6:
        raise ConfigError(f"--region needs 6 numbers (lo xyz, hi xyz), got {len(vals)}")
    return np.array(vals[:3]), np.array(vals[3:])


def cmd_mesh(args) -> int:
    region = _parse_region(args.region) if args.region else None
    mapper = load_checkpoint(args.map)
    try:
        mesh = mapper.extract_mesh(region, normals=not args.no_normals)
    finally:
        del mapper
    if len(mesh) == 0:
        log.warning("region contains no observed surface; writing an empty mesh")
    write_mesh(mesh, args.out, "ascii" if args.ascii else "binary")
    print(f"wrote {len(mesh)} triangles to {args.out}")
    return EXIT_OK


def _load_points(path, n, seed):
    """Surface points from a mesh (area-sampled) or a point cloud file."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        ply = read_ply(path)
        face = ply.get("face")
        if face is not None and len(face.get("vertex_indices", face.get("vertex_index", []))) > 0:
            return sample_surface(read_mesh(path), n, seed)
    return read_frame_cloud(path)


def cmd_eval(args) -> int:
    rec = _load_points(args.mesh, args.samples, args.seed)
    gt = _load_points(args.gt, args.samples, args.seed + 1)
    if args.visited:
        gt = crop_ground_truth(gt, read_visited(args.visited))
    if len(rec) == 0 or len(gt) == 0:
        raise DataFormatError("nothing to evaluate: reconstruction or ground truth is empty")
    m = compute_metrics(rec, gt, args.tau)
    print(MapMetrics.TABLE_HEADER)
    print(m.table_row())
    print(m.record())
    return EXIT_OK


def cmd_simulate(args) -> int:
    scene = read_scene(args.scene)
    sensor = read_sensor(args.sensor)
    traj = read_poses(args.trajectory)
    generate_sequence(scene, traj, sensor, args.out, args.seed)
    print(f"wrote {len(traj)} frames to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rimap", description="Incremental implicit mapping toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("map", help="integrate a posed sequence and write a checkpoint")
    m.add_argument("--poses", required=True)
    m.add_argument("--frames-dir", required=True)
    m.add_argument("--config")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--online", action="store_true", help=f"{ONLINE_ITERATIONS} iterations per frame")
    m.set_defaults(func=cmd_map)

    me = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    me.add_argument("--map", required=True, help="checkpoint directory")
    me.add_argument("--region", help="'x0,y0,z0,x1,y1,z1' in metres")
    me.add_argument("--out", required=True)
    me.add_argument("--ascii", action="store_true")
    me.add_argument("--no-normals", action="store_true")
    me.set_defaults(func=cmd_mesh)

    e = sub.add_parser("eval", help="compare a mesh against ground truth")
    e.add_argument("--mesh", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--visited")
    e.add_argument("--tau", type=float, default=0.10)
    e.add_argument("--samples", type=int, default=1_000_000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="render a synthetic sequence")
    s.add_argument("--scene", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--sensor", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    level = os.environ.get("RIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s %(message)s", force=True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, ConfigError, OSError, ValueError) as exc:
        print(f"rimap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RimError, AssertionError) as exc:
        print(f"rimap {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
