"""Command-line entry point: ``semvox <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible plan.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetError, RunConfig, load_dataset, thread_count, write_dataset
from .evaluation import EmptyCloudError, EvalCloud, evaluate
from .mesh import extract_mesh, extract_vertex_cloud, read_ply, write_ply
from .semantics import LabelSet
from .synthetic import corridor_world, flat_world, grass_strip_world, incline_world, load_scene
from .traversability import (
    OccupancyGrid,
    PlanningError,
    TraversabilityConfig,
    plan_path,
    project_occupancy,
    save_path_csv,
    score_vertices,
)
from .tsdf import IntegratorConfig
from .voxel_store import CapacityExceededError, MapConfig, VoxelStore

log = logging.getLogger("semvox")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3

PRESETS = {
    "flat": flat_world,
    "incline": incline_world,
    "grass-strip": grass_strip_world,
    "corridor": corridor_world,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _xy(text: str):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return np.array([x, y])


def _frames(text: str):
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}") from None


def _label_ids(text: str, labelset: LabelSet) -> frozenset[int]:
    ids = set()
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        ids.add(int(tok) if tok.isdigit() else labelset.index(tok))
    return frozenset(ids)


# -- subcommands ------------------------------------------------------------------------


def cmd_integrate(args) -> int:
    from .pipeline import Mapper

    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    if args.dataset:
        cfg.dataset = Path(args.dataset)
    if cfg.dataset is None:
        raise UsageError("integrate: a dataset directory is required (argument or [run] dataset)")
    if args.out:
        cfg.output = Path(args.out)
    if args.frames:
        cfg.frames = args.frames
    if args.voxel_size or args.truncation:
        cfg.map = MapConfig(
            voxel_size=args.voxel_size or cfg.map.voxel_size,
            truncation=args.truncation or (None if args.voxel_size else cfg.map.truncation),
            num_labels=cfg.map.num_labels,
            max_blocks=cfg.map.max_blocks,
        )
    if args.mode:
        cfg.integrator = replace(cfg.integrator, mode=args.mode)
    if args.no_bayes:
        cfg.semantics = replace(cfg.semantics, bayes=False)
    cfg.validate()

    ds = Dataset(cfg.dataset, cfg.max_depth)
    labelset = LabelSet.load(cfg.labelset) if cfg.labelset else ds.labelset
    if len(labelset) != cfg.map.num_labels:
        cfg.map = replace(cfg.map, num_labels=len(labelset))
    if cfg.semantics.unlabeled_id is None and labelset.unlabeled_id is not None:
        cfg.semantics = replace(cfg.semantics, unlabeled_id=labelset.unlabeled_id)
    mapper = Mapper(cfg.map, cfg.integrator, cfg.semantics, cfg.lidar or ds.lidar)

    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out / "reports.jsonl", "w") as rep_file:
        for cloud, img in load_dataset(cfg.dataset, cfg.frames, max_depth=cfg.max_depth):
            rep = mapper.integrate(cloud, img if not args.geometry_only else None)
            rep_file.write(rep.to_json() + "\n")
            n += 1
    mapper.store.save(out / "map.svox")
    blocks, observed, nbytes = mapper.store.stats()
    log.info("integrated %d frames: %d blocks, %d observed voxels, %.1f MB", n, blocks, observed, nbytes / 1e6)
    if args.mesh:
        write_ply(out / "mesh.ply", extract_mesh(mapper.store), labelset)
    return EXIT_OK


def cmd_mesh(args) -> int:
    store = VoxelStore.load(args.map)
    labelset = LabelSet.load(args.labelset) if args.labelset else None
    if labelset is not None and len(labelset) != store.config.num_labels:
        raise DatasetError(f"label set has {len(labelset)} classes, map has {store.config.num_labels}")
    mesh = extract_mesh(store, args.min_weight)
    write_ply(args.out, mesh, labelset)
    log.info("mesh: %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))
    return EXIT_OK


def _traversability_cfg(args, labelset: LabelSet | None) -> TraversabilityConfig:
    cfg = RunConfig.load(args.config).traversability if args.config else TraversabilityConfig()
    over = {}
    for name in ("radius", "max_height_diff", "max_steepness", "max_roughness", "grid_resolution",
                 "inflation_radius"):
        v = getattr(args, name)
        if v is not None:
            over[name] = v
    if args.traversable_labels is not None:
        if labelset is None and not all(t.strip().isdigit() for t in args.traversable_labels.split(",") if t):
            raise UsageError("class names in --traversable-labels need --labelset")
        over["traversable_labels"] = _label_ids(args.traversable_labels, labelset)
    return replace(cfg, **over)


def cmd_traverse(args) -> int:
    labelset = LabelSet.load(args.labelset) if args.labelset else None
    cfg = _traversability_cfg(args, labelset)
    mesh = read_ply(args.mesh)
    scores = score_vertices(mesh, cfg)
    grid = project_occupancy(scores, mesh, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # scored PLY: untraversable vertices are written in red, the rest keep their color
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else np.full((len(mesh.vertices), 3), 128)
    colors = np.where(scores.traversable[:, None], colors, np.array([255, 0, 0])).astype(np.uint8)
    mesh.vertex_colors = colors
    write_ply(out / "traversability.ply", mesh)
    grid.save(out / "grid.pgm", out / "grid.meta", cfg)
    log.info("grid %dx%d, %d free cells", *grid.cells.shape, int(np.count_nonzero(grid.cells == 0)))
    return EXIT_OK


def cmd_plan(args) -> int:
    grid = OccupancyGrid.load(args.grid, args.meta)
    path = plan_path(grid, args.start, args.goal)
    save_path_csv(args.out, path)
    log.info("path: %d cells, cost %.3f m", len(path.cells), path.cost)
    print(json.dumps({"cost": path.cost, "cells": len(path.cells), "waypoints": len(path.waypoints)}))
    return EXIT_OK


def _read_cloud(path) -> EvalCloud:
    mesh = read_ply(path)
    if not len(mesh.vertices):
        raise EmptyCloudError(f"{path} has no vertices")
    if len(mesh.faces):
        pts, labels = extract_vertex_cloud(mesh)
    else:
        pts, labels = mesh.vertices, mesh.vertex_labels
    return EvalCloud(pts, labels)


def cmd_eval(args) -> int:
    pred = _read_cloud(args.prediction)
    gt = _read_cloud(args.ground_truth)
    if gt.labels is not None and np.all(gt.labels < 0):
        gt.labels = None
    rep = evaluate(pred, gt, args.voxel_size, workers=thread_count())
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.per_class:
        names = LabelSet.load(args.labelset).names if args.labelset else None
        Path(args.per_class).write_text(rep.per_class_csv(names))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.preset:
        scene = PRESETS[args.preset]()
    elif args.scene:
        scene = load_scene(args.scene)
    else:
        raise UsageError("synth: give a scene file or --preset")
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    write_dataset(scene, args.out, args.gt_density, args.voxel_size)
    log.info("wrote %d frames to %s", len(scene.trajectory), args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semvox", description="Semantic TSDF mapping, traversability and planning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("integrate", help="fuse a dataset into a map snapshot")
    s.add_argument("dataset", nargs="?", help="dataset directory (overrides [run] dataset)")
    s.add_argument("--config", help="run configuration file")
    s.add_argument("--out", help="output directory (map.svox, reports.jsonl)")
    s.add_argument("--mode", choices=["projective", "non_projective"], help="distance model")
    s.add_argument("--frames", type=_frames, help="frame range START:END (end exclusive)")
    s.add_argument("--voxel-size", type=float, help="voxel edge length in meters")
    s.add_argument("--truncation", type=float, help="truncation distance in meters")
    s.add_argument("--no-bayes", action="store_true", help="keep only the latest label observation")
    s.add_argument("--geometry-only", action="store_true", help="ignore label images")
    s.add_argument("--mesh", action="store_true", help="also write mesh.ply")
    s.set_defaults(func=cmd_integrate)

    s = sub.add_parser("mesh", help="extract a labeled mesh from a map snapshot")
    s.add_argument("map", help="map snapshot (.svox)")
    s.add_argument("--out", required=True, help="output PLY")
    s.add_argument("--labelset", help="label set file for vertex colors")
    s.add_argument("--min-weight", type=float, default=1e-4, help="minimum voxel weight to mesh")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("traverse", help="score mesh traversability and project an occupancy grid")
    s.add_argument("mesh", help="labeled mesh PLY")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="run configuration file ([traversability] section)")
    s.add_argument("--labelset", help="label set file (for class names)")
    s.add_argument("--traversable-labels", help="comma separated class names or ids")
    s.add_argument("--radius", type=float, help="neighbourhood radius in meters")
    s.add_argument("--max-height-diff", type=float, help="height difference threshold in meters")
    s.add_argument("--max-steepness", type=float, help="steepness threshold in degrees")
    s.add_argument("--max-roughness", type=float, help="roughness threshold in degrees")
    s.add_argument("--grid-resolution", type=float, help="occupancy cell size in meters")
    s.add_argument("--inflation-radius", type=float, help="obstacle inflation radius in meters")
    s.set_defaults(func=cmd_traverse)

    s = sub.add_parser("plan", help="A* path on an occupancy grid")
    s.add_argument("grid", help="occupancy grid PGM")
    s.add_argument("--meta", help="grid metadata file (default: PGM path with .meta)")
    s.add_argument("--start", type=_xy, required=True, help="start X,Y in meters")
    s.add_argument("--goal", type=_xy, required=True, help="goal X,Y in meters")
    s.add_argument("--out", required=True, help="waypoint CSV")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("eval", help="score a mesh or cloud against ground truth")
    s.add_argument("prediction", help="predicted mesh or cloud PLY")
    s.add_argument("ground_truth", help="ground-truth cloud PLY")
    s.add_argument("--voxel-size", type=float, required=True, help="voxel size setting the 2*nu clamp")
    s.add_argument("--out", help="write the JSON report here too")
    s.add_argument("--per-class", help="write per-class IoU CSV here")
    s.add_argument("--labelset", help="label set file for class names in the CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("scene", nargs="?", help="scene description file")
    s.add_argument("out", nargs="?", help="output dataset directory")
    s.add_argument("--preset", choices=sorted(PRESETS), help="built-in scene instead of a file")
    s.add_argument("--seed", type=int, help="override the scene seed")
    s.add_argument("--gt-density", type=float, default=400.0, help="ground-truth points per square meter")
    s.add_argument("--voxel-size", type=float, default=0.1, help="voxel size written to run.cfg")
    s.set_defaults(func=cmd_synth)
    return p


def _join_coordinates(argv: list[str]) -> list[str]:
    # argparse takes "-3.5,2" for an option; bind coordinate values explicitly
    out, i = [], 0
    while i < len(argv):
        if argv[i] in ("--start", "--goal") and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_coordinates(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
        if args.command == "synth" and args.preset and args.out is None:
            args.out, args.scene = args.scene, None
        if args.command == "synth" and not args.out:
            raise UsageError("synth: an output directory is required")
        if args.command == "plan" and args.meta is None:
            args.meta = str(Path(args.grid).with_suffix(".meta"))
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"semvox: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PlanningError as e:
        print(f"semvox: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DatasetError, EmptyCloudError, CapacityExceededError, OSError, ValueError, KeyError) as e:
        print(f"semvox: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
