import hashlib
import json
import logging

import pytest

from teachrepeat.cli import EXIT_CONFIG, EXIT_EVAL, EXIT_INIT, EXIT_NAV, EXIT_OK, main, read_trajectory


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def corridor(tmp_path_factory):
    out = tmp_path_factory.mktemp("corridor")
    assert main(["world", "gen", "--preset", "corridor", "--out-dir", str(out)]) == EXIT_OK
    world = str(out / "world.json")
    assert main(["teach", "--preset", "corridor", "--world", world, "--out-dir", str(out)]) == EXIT_OK
    assert main(["repeat", "--preset", "corridor", "--world", world, "--graph", str(out / "teach"),
                 "--keep-frames", "--out-dir", str(out / "runs")]) == EXIT_OK
    return out


def test_world_gen_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["world", "gen", "--preset", "corridor", "--seed", "3", "--out-dir", str(tmp_path / d)]) == 0
    assert digest(tmp_path / "a" / "world.json") == digest(tmp_path / "b" / "world.json")


def test_pipeline_outputs(corridor):
    graph = json.loads((corridor / "teach" / "graph.json").read_text())
    assert graph["meta"]["preset"] == "corridor"
    run = corridor / "runs" / "run_00"
    status = json.loads((run / "status.json").read_text())
    assert status["success"] is True
    traj = read_trajectory(run / "trajectory.csv")
    assert len(traj) > 10
    report = json.loads((run / "report.json").read_text())
    assert report["ate"] < 0.1


def test_evaluate_and_report(corridor):
    out = corridor / "eval"
    assert main(["evaluate", "--graph", str(corridor / "teach"), str(corridor / "runs"),
                 "--out-dir", str(out)]) == EXIT_OK
    rows = json.loads((out / "evaluation.json").read_text())
    assert len(rows) == 1 and rows[0]["success"]
    rep = corridor / "report"
    assert main(["report", "--graph", str(corridor / "teach"), str(corridor / "runs"), "--out-dir", str(rep)]) == 0
    assert (rep / "runs.csv").exists() and (rep / "node_selection_table.csv").exists()
    assert (rep / "runs_run_00_error_map.svg").exists()


def test_report_without_runs_is_an_evaluation_error(corridor, tmp_path):
    assert main(["report", "--graph", str(corridor / "teach"), "--out-dir", str(tmp_path)]) == EXIT_EVAL


def test_finetune_not_triggered_on_clean_runs(corridor, tmp_path, caplog):
    caplog.set_level(logging.INFO)
    rc = main(["finetune", "--preset", "corridor", "--graph", str(corridor / "teach"),
               "--world", str(corridor / "world.json"), str(corridor / "runs"), "--out-dir", str(tmp_path)])
    assert rc == EXIT_OK
    assert "not triggered" in caplog.text


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[params]\ndelta = 0.1\nfoo = 1\n")
    assert main(["world", "gen", "--config", str(bad), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["world", "gen", "--preset", "nowhere", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_initialization_failure_exit_code(corridor, tmp_path):
    cfg = tmp_path / "never.ini"
    cfg.write_text("[oracle]\nmin_overlap = 1.01\n")  # no registration can succeed
    rc = main(["repeat", "--config", str(cfg), "--preset", "corridor", "--world", str(corridor / "world.json"),
               "--graph", str(corridor / "teach"), "--out-dir", str(tmp_path)])
    assert rc == EXIT_INIT
    assert json.loads((tmp_path / "run_00" / "status.json").read_text())["cause"] == "initialization"


@pytest.mark.slow
def test_navigation_failure_exit_code(tmp_path):
    cfg = tmp_path / "smoke.ini"
    cfg.write_text('[scenario]\npreset = "smoke"\nrepeat_epochs = [1]\n\n[repeat]\nvariant = "lidar"\n')
    assert main(["teach", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_OK
    rc = main(["repeat", "--config", str(cfg), "--graph", str(tmp_path / "teach"), "--out-dir", str(tmp_path / "r")])
    assert rc == EXIT_NAV
    assert json.loads((tmp_path / "r" / "run_00" / "status.json").read_text())["success"] is False
