from __future__ import annotations

import socket
import threading

import numpy as np
import pytest
import yaml

from lidarodom.io.cli import main
from lidarodom.io.formats import read_results, read_trajectory

SPEC = {
    "world": {"type": "corridor"},
    "trajectory": {"type": "straight", "velocity": [1.0, 0.0, 0.0], "duration": 1.6},
    "sensor": {"azimuth_steps": 450},
    "scans": 12,
    "seed": 4,
    "gt_map_spacing": 0.1,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump(SPEC))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "ds")]) == 0
    return root / "ds" / "dataset.yaml"


@pytest.fixture(scope="module")
def two_lidar_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli2")
    spec = dict(SPEC, scans=4, lidars=[[0.2, 0, 0.1, 0, 0, 0, 1], [-0.2, 0, 0.1, 0, 0, 1, 0]])
    (root / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert main(["synth", "--spec", str(root / "spec.yaml"), "--out", str(root / "ds")]) == 0
    return root / "ds" / "dataset.yaml"


def test_run_writes_outputs_and_eval_scores_them(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--dataset", str(dataset), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "voxel_leaf: 0.1" in text and "mode: deterministic" in text
    traj = read_trajectory(out / "trajectory.txt")
    assert len(traj) == 12
    summary = read_results(out / "summary.txt")
    assert summary["scans_processed"] == 12 and summary["prior.wio"] == 11
    for name in ("map.txt", "timing.dat", "config.yaml"):
        assert (out / name).is_file()

    ev = tmp_path / "eval"
    gt = dataset.parent / "groundtruth.txt"
    assert main(["eval", "--est", str(out / "trajectory.txt"), "--gt", str(gt),
                 "--map-est", str(out / "map.txt"), "--map-gt", str(dataset.parent / "groundtruth_map.txt"),
                 "--out", str(ev)]) == 0
    res = read_results(ev / "results.txt")
    assert res["ape_mean"] < 0.05 and res["ape_pairs"] == 12 and res["map_rmse"] < 0.06
    assert (ev / "ape.dat").is_file() and "ape_mean" in capsys.readouterr().out


def test_eval_of_ground_truth_against_itself_is_zero(dataset, tmp_path):
    gt = dataset.parent / "groundtruth.txt"
    assert main(["eval", "--est", str(gt), "--gt", str(gt), "--out", str(tmp_path)]) == 0
    res = read_results(tmp_path / "results.txt")
    assert res["ape_max"] == pytest.approx(0.0, abs=1e-9)


def test_runs_are_bit_identical(dataset, tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--dataset", str(dataset), "--out", str(tmp_path / name), "--seed", "3"]) == 0
    assert (tmp_path / "a" / "trajectory.txt").read_bytes() == (tmp_path / "b" / "trajectory.txt").read_bytes()


def test_husky_profile_settings_echo(two_lidar_dataset, tmp_path, capsys):
    assert main(["run", "--profile", "husky", "--dataset", str(two_lidar_dataset), "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    for line in ("lidars: 2", "voxel_leaf: 0.1", "scan_to_submap_iterations: 20", "workers: 4",
                 "prior_sources: wio:odometry,imu:imu"):
        assert line in text


def test_husky_profile_rejects_single_lidar(dataset, tmp_path, capsys):
    assert main(["run", "--profile", "husky", "--dataset", str(dataset), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("lidarodom: error:") and "2 lidars" in err and "\n" not in err


def test_scenario_option(dataset, tmp_path):
    sc = tmp_path / "s.yaml"
    sc.write_text("events:\n  - {time: 0.35, action: drop_source, id: wio}\n")
    assert main(["run", "--dataset", str(dataset), "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 0
    summary = read_results(tmp_path / "o" / "summary.txt")
    assert summary["prior.imu"] > 0


def test_stream_option_sends_records(dataset, tmp_path):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]
    got = []

    def serve():
        conn, _ = srv.accept()
        with conn:
            buf = b""
            while chunk := conn.recv(65536):
                buf += chunk
        got.append(buf.decode())

    th = threading.Thread(target=serve)
    th.start()
    assert main(["run", "--dataset", str(dataset), "--out", str(tmp_path), "--stream", f"127.0.0.1:{port}"]) == 0
    th.join(10)
    srv.close()
    assert got[0] == (tmp_path / "trajectory.txt").read_text()


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        ["run", "--dataset", "missing.yaml", "--out", "x"],
        ["run", "--profile", "tank", "--dataset", "d.yaml", "--out", "x"],
        ["eval", "--est", "missing.txt", "--gt", "missing.txt", "--out", "x"],
        ["run", "--dataset", "d.yaml", "--out", "x", "--stream", "nohost"],
        ["synth", "--spec", "missing.yaml", "--out", "x"],
        ["inspect", "missing.yaml"],
    ],
)
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("lidarodom: error:")


def test_bad_config_exits_1(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("registration:\n  iterations: 3\n")
    assert main(["run", "--config", str(cfg), "--dataset", str(dataset), "--out", str(tmp_path)]) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_runtime_failure_exits_2(dataset, tmp_path, monkeypatch, capsys):
    import lidarodom.io.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "replay", boom)
    assert main(["run", "--dataset", str(dataset), "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.strip() == "lidarodom: runtime failure: RuntimeError: disk on fire"


def test_inspect(dataset, capsys):
    assert main(["inspect", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "lidar0" in out and "events 12" in out and "rate 50.00 Hz" in out
