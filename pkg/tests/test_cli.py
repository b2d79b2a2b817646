import csv
import json

import numpy as np
import pytest

from checks import cli_pipeline
from terracost import envmodel, patchex
from terracost.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    return root, cli_pipeline(root)


def test_missing_required_argument_is_usage_error(capsys):
    assert main(["gen-env", "--out", "x"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["gen-env", "--size", "4x4", "--out", "x", "--threads", "0"]) == 2


def test_bad_size_is_usage_error(tmp_path):
    assert main(["gen-env", "--size", "4by4", "--out", str(tmp_path / "e")]) == 2


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-env", "--size", "4x4", "--out", str(blocker / "env")]) == 3


def test_eval_without_model_is_io_error(tmp_path, pipeline):
    root, _ = pipeline
    code = main(["eval", "--model", str(tmp_path / "none.tcnn"), "--dataset", str(root / "ds.tcpd"),
                 "--out", str(tmp_path / "r.csv")])
    assert code == 3


def test_untraversable_waypoints_are_domain_error(tmp_path, pipeline):
    root, _ = pipeline
    env = envmodel.load_environment(root / "env")
    # the outer border carries class 0 (no data)
    wp = tmp_path / "wp.csv"
    wp.write_text(f"x,y\n0.0,0.0\n{env.shape[1] * env.geo.resolution / 2},0.0\n")
    assert main(["record", "--env", str(root / "env"), "--waypoints", str(wp), "--out", str(tmp_path / "l")]) == 4


def test_gen_env_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-env", "--size", "6x5", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    for f in envmodel.LAYER_FILES.values():
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    a, b = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in "ab")
    assert a["settings"].pop("out") == "a" and b["settings"].pop("out") == "b"
    assert a == b
    env = envmodel.load_environment(tmp_path / "a")
    assert env.shape == (100, 120)


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TERRACOST_SEED", "4")
    assert main(["gen-env", "--size", "6x5", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-env", "--size", "6x5", "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "height.tcrs").read_bytes() == (tmp_path / "b" / "height.tcrs").read_bytes()


def test_pipeline_manifests(pipeline):
    root, manifests = pipeline
    for step, path in manifests.items():
        doc = json.loads(path.read_text())
        assert doc["command"] == step
        assert doc["settings"]["seed"] == 11
        assert all(len(h) == 64 for h in doc["outputs"].values())
    ds = patchex.load_dataset(root / "ds.tcpd")
    doc = json.loads(manifests["build-dataset"].read_text())
    assert doc["results"]["samples"] == len(ds)
    assert (root / "report.csv").read_text().startswith("group,variable,rmse,mape,count")


def test_ablate_and_report(tmp_path, pipeline):
    root, _ = pipeline
    m, d = str(root / "model.tcnn"), str(root / "ds.tcpd")
    assert main(["ablate", "--model", m, "--dataset", d, "--out", str(tmp_path / "ab.csv")]) == 0
    with open(tmp_path / "ab.csv", newline="") as fh:
        kept = {row["kept"] for row in csv.DictReader(fh)}
    assert len(kept) == 7
    assert main(["report", "--model", m, "--dataset", d, "--format", "svg", "--out", str(tmp_path / "r.svg")]) == 0
    assert (tmp_path / "r.svg").read_text().startswith("<svg")


def test_path_cost_and_planning(tmp_path, pipeline):
    root, _ = pipeline
    env_dir = str(root / "env")
    grid = tmp_path / "grid.csv"
    assert main(["build-grid", "--env", env_dir, "--oracle", "--out", str(grid)]) == 0
    routes = {}
    for objective in ("time", "energy"):
        out = tmp_path / f"{objective}.csv"
        cost = tmp_path / f"{objective}_cost.csv"
        code = main(["plan", "--env", env_dir, "--grid", str(grid), "--start", "3,3", "--goal", "9,9",
                     "--objective", objective, "--out", str(out), "--cost-out", str(cost)])
        assert code == 0
        routes[objective] = out
        total = cost.read_text().splitlines()[-1].split(",")
        routes[objective + "_total"] = (float(total[3]), float(total[4]))
    t_time, e_time = routes["time_total"]
    t_energy, e_energy = routes["energy_total"]
    assert t_time <= t_energy * (1 + 1e-6)
    assert e_energy <= e_time * (1 + 1e-6)
    # the planned route is a valid path-cost input covering floor(length / d) segments
    code = main(["path-cost", "--env", env_dir, "--oracle", "--path", str(routes["time"]),
                 "--out", str(tmp_path / "pc.csv")])
    assert code == 0
    pts = np.loadtxt(routes["time"], delimiter=",", skiprows=1)
    length = np.hypot(*np.diff(pts, axis=0).T).sum()
    rows = (tmp_path / "pc.csv").read_text().splitlines()
    assert len(rows) - 2 == int(np.floor(length + 1e-9))
    assert float(rows[-1].split(",")[3]) > 0
