import json
import subprocess
import sys

import numpy as np
import pytest

from semvox.cli import EXIT_DATA, EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE, main
from semvox.mesh import read_ply
from semvox.traversability import FREE, OCCUPIED, OccupancyGrid
from semvox.voxel_store import VoxelStore


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--preset", "flat", str(root / "ds"), "--gt-density", "100"]) == EXIT_OK
    return root


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "semvox", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("integrate", "mesh", "traverse", "plan", "eval", "synth"):
        assert cmd in out.stdout
    out = subprocess.run([sys.executable, "-m", "semvox", "integrate", "--help"], capture_output=True, text=True)
    assert "--mode" in out.stdout and "--frames" in out.stdout


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["plan", "g.pgm", "--start", "1", "--goal", "2,3", "--out", "p.csv"]) == EXIT_USAGE
    assert main(["integrate"]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["integrate", str(tmp_path / "missing")]) == EXIT_DATA
    (tmp_path / "scans").mkdir()
    assert main(["integrate", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "bad.svox").write_bytes(b"junk")
    assert main(["mesh", str(tmp_path / "bad.svox"), "--out", str(tmp_path / "m.ply")]) == EXIT_DATA


def test_synth_writes_layout(small):
    ds = small / "ds"
    for name in ("poses.txt", "labels_index.txt", "lidar.cfg", "labelset.cfg", "scene.txt", "gt.ply", "run.cfg"):
        assert (ds / name).exists()
    assert len(list((ds / "scans").glob("*.bin"))) == 50


def test_snapshots_are_byte_identical(small):
    ds = small / "ds"
    for name in ("a", "b"):
        assert main(["integrate", str(ds), "--frames", "0:4", "--out", str(small / name)]) == EXIT_OK
    a = (small / "a" / "map.svox").read_bytes()
    assert a == (small / "b" / "map.svox").read_bytes()
    lines = (small / "a" / "reports.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rep = json.loads(lines[0])
    assert set(rep) == {"frame", "updated_voxels", "new_blocks", "labeled_voxels", "elapsed_ms"}


def test_projective_mode_and_no_bayes(small):
    ds = small / "ds"
    out = small / "proj"
    assert main(["integrate", str(ds), "--frames", "0:3", "--mode", "projective", "--no-bayes",
                 "--out", str(out)]) == EXIT_OK
    proj = VoxelStore.load(out / "map.svox")
    nonproj = VoxelStore.load(small / "a" / "map.svox") if (small / "a").exists() else None
    assert len(proj) > 0
    if nonproj is not None:
        assert (out / "map.svox").read_bytes() != (small / "a" / "map.svox").read_bytes()


def test_mesh_traverse_plan(small, tmp_path):
    ds = small / "ds"
    out = tmp_path / "run"
    assert main(["integrate", str(ds), "--frames", "0:12", "--out", str(out), "--mesh"]) == EXIT_OK
    assert main(["mesh", str(out / "map.svox"), "--out", str(out / "m.ply"),
                 "--labelset", str(ds / "labelset.cfg")]) == EXIT_OK
    mesh = read_ply(out / "m.ply")
    assert len(mesh.faces) > 0
    assert main(["traverse", str(out / "m.ply"), "--out", str(out / "trav"), "--labelset",
                 str(ds / "labelset.cfg"), "--traversable-labels", "road"]) == EXIT_OK
    grid = OccupancyGrid.load(out / "trav" / "grid.pgm")
    free = np.argwhere(grid.cells == FREE)
    occ = np.argwhere(grid.cells == OCCUPIED)
    assert len(free) and len(occ)
    # start and goal on the ground ring driven by the sensor
    start = grid.cell_to_world(free[np.argmin(np.linalg.norm(grid.cell_to_world(free) - [7.0, 0.0], axis=1))])
    goal = grid.cell_to_world(free[np.argmin(np.linalg.norm(grid.cell_to_world(free) - [0.0, 7.0], axis=1))])
    csv = out / "p.csv"
    rc = main(["plan", str(out / "trav" / "grid.pgm"), "--start", f"{start[0]},{start[1]}",
               "--goal", f"{goal[0]},{goal[1]}", "--out", str(csv)])
    assert rc == EXIT_OK
    pts = np.loadtxt(csv, delimiter=",", skiprows=1)
    assert np.allclose(pts[0], start) and np.allclose(pts[-1], goal)
    # a goal on an occupied cell is rejected with the planning exit code
    blocked = grid.cell_to_world(occ[0])
    rc = main(["plan", str(out / "trav" / "grid.pgm"), "--start", f"{start[0]},{start[1]}",
               "--goal", f"{blocked[0]},{blocked[1]}", "--out", str(csv)])
    assert rc == EXIT_INFEASIBLE


def test_eval_writes_report(small, tmp_path, capsys):
    ds = small / "ds"
    rc = main(["eval", str(ds / "gt.ply"), str(ds / "gt.ply"), "--voxel-size", "0.1",
               "--out", str(tmp_path / "r.json"), "--per-class", str(tmp_path / "c.csv"),
               "--labelset", str(ds / "labelset.cfg")])
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["RE"] == 0 and rep["CD"] == 0 and rep["RC"] == 100 and rep["Acc"] == 100
    assert (tmp_path / "c.csv").read_text().startswith("class,name,iou\n")


@pytest.mark.slow
def test_end_to_end_flat_world(tmp_path, capsys):
    ds = tmp_path / "flat"
    assert main(["synth", "--preset", "flat", str(ds), "--gt-density", "2500"]) == EXIT_OK
    assert main(["integrate", "--config", str(ds / "run.cfg"), "--out", str(tmp_path / "out"), "--mesh"]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "out" / "mesh.ply"), str(ds / "gt.ply"), "--voxel-size", "0.1"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["RE"] <= 5.0
    assert rep["RC"] >= 95.0
    # label accuracy is reported; its 100% target is checked by the acceptance suite
    assert rep["Acc"] is not None and rep["Acc"] >= 99.0
