import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from teachrepeat.geometry import DomainError, Trajectory
from teachrepeat.metrics import (BASELINE_GRID, NODE_SELECTION_TABLE, ate_yae, error_map_svg, ewa,
                                 fixed_threshold_nodes, make_report, pointwise_errors, table_comparison,
                                 write_reports_csv, write_reports_json)
from teachrepeat.registration import planar_pose


def planar(xs, ys, yaws_deg):
    n = len(xs)
    return Trajectory.from_poses(np.arange(n) * 0.1,
                                 [planar_pose(x, y, np.deg2rad(a)) for x, y, a in zip(xs, ys, yaws_deg)])


def line(n=101, length=10.0):
    return planar(np.linspace(0, length, n), np.zeros(n), np.zeros(n))


# ------------------------------------------------------------ storage-weighted accuracy

def test_ewa_examples():
    assert ewa(1.0, 1.0, 3) == pytest.approx(1 / math.log(3))
    assert ewa(0.078, 1.0, 724) == pytest.approx(1.947, abs=5e-4)
    assert ewa(0.065, 1.0, 2816) == pytest.approx(1.937, abs=5e-4)
    with pytest.raises(DomainError):
        ewa(0.0, 1.0, 10)
    with pytest.raises(DomainError):
        ewa(0.1, 1.0, 1)


@given(st.floats(1e-3, 10), st.floats(1e-3, 10), st.integers(2, 100_000))
def test_ewa_decreases_with_error_and_nodes(err, extra, n):
    assert ewa(err + extra, 1.0, n) < ewa(err, 1.0, n)
    assert ewa(err, 1.0, n + 1) < ewa(err, 1.0, n)
    assert ewa(err, 2.0, n) == pytest.approx(2 * ewa(err, 1.0, n))


def test_table_comparison_rows():
    rows = table_comparison()
    assert len(rows) == len(NODE_SELECTION_TABLE)
    failed = [r for r in rows if r["ewa_ate"] is None]
    assert [r["threshold"] for r in failed] == ["8m/60deg"]
    for r in rows:
        if r["ewa_ate"] is not None:
            assert r["ewa_yae"] > 0 and r["ewa_ate"] > 0


def test_baseline_grid_is_increasing():
    d = [g[0] for g in BASELINE_GRID]
    a = [g[1] for g in BASELINE_GRID]
    assert d == sorted(d) and a == sorted(a) and len(BASELINE_GRID) == 6


# ------------------------------------------------------------ ATE / YAE

def test_identical_trajectories_have_zero_error():
    t = planar(np.linspace(0, 5, 40), np.sin(np.linspace(0, 3, 40)), np.linspace(0, 60, 40))
    e = ate_yae(t, t)
    assert (e.ate, e.yae, e.ate_std, e.yae_std) == (0.0, 0.0, 0.0, 0.0)


def test_constant_offset():
    teach = line(1001)
    rep = planar(np.linspace(0, 10, 41), np.full(41, 0.1), np.full(41, 2.0))
    e = ate_yae(rep, teach)
    assert e.ate == pytest.approx(0.1, abs=1e-9)
    assert e.yae == pytest.approx(2.0, abs=1e-9)


def test_yaw_error_wraps():
    teach = planar([0.0], [0.0], [179.0])
    rep = planar([0.0], [0.0], [-179.0])
    assert pointwise_errors(rep, teach)[1][0] == pytest.approx(2.0, abs=1e-9)


@given(st.integers(0, 10_000))
def test_pointwise_errors_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    teach = planar(*rng.uniform(-5, 5, (2, 60)), rng.uniform(-180, 180, 60))
    rep = planar(*rng.uniform(-5, 5, (2, 20)), rng.uniform(-180, 180, 20))
    d, dyaw = pointwise_errors(rep, teach)
    D = np.linalg.norm(rep.xyz[:, None] - teach.xyz[None], axis=2)
    j = D.argmin(axis=1)
    assert np.allclose(d, D.min(axis=1))
    diff = np.rad2deg(rep.yaw() - teach.yaw()[j])
    assert np.allclose(dyaw, np.abs((diff + 180) % 360 - 180), atol=1e-9)


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        pointwise_errors(Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4))), line())


# ------------------------------------------------------------ fixed-threshold baseline

def test_fixed_threshold_examples():
    assert fixed_threshold_nodes(line(), 2.0, 90.0) == [0, 20, 40, 60, 80, 100]
    spin = planar(np.zeros(91), np.zeros(91), np.arange(91.0))
    assert fixed_threshold_nodes(spin, 100.0, 30.0) == [0, 30, 60, 90]
    with pytest.raises(ValueError):
        fixed_threshold_nodes(line(), 0.0, 10.0)


@given(st.floats(0.3, 5.0), st.floats(0.3, 5.0))
def test_fixed_threshold_monotone_in_distance(d1, d2):
    lo, hi = sorted((d1, d2))
    t = line(301, 30.0)
    assert len(fixed_threshold_nodes(t, hi, 90.0)) <= len(fixed_threshold_nodes(t, lo, 90.0))


# ------------------------------------------------------------ reports

def test_reports_roundtrip(tmp_path):
    teach = line(1001)
    rep = planar(np.linspace(0, 10, 41), np.full(41, 0.1), np.full(41, 2.0))
    r = make_report(rep, teach, True, 10.0, 12, 4096, "run_00")
    write_reports_json([r], tmp_path / "r.json")
    write_reports_csv([r], tmp_path / "r.csv")
    d = json.loads((tmp_path / "r.json").read_text())[0]
    assert d["ewa_ate"] == pytest.approx(ewa(0.1, 1.0, 12))
    assert d["label"] == "run_00" and d["success"] is True
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert float(rows[0]["ate"]) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        write_reports_csv([], tmp_path / "empty.csv")


def test_error_map_svg(tmp_path):
    teach = line(101)
    rep = planar(np.linspace(0, 10, 20), np.linspace(0, 0.5, 20), np.zeros(20))
    error_map_svg(rep, teach, tmp_path / "m.svg")
    text = (tmp_path / "m.svg").read_text()
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert text.count("<line") == 19
