import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teachrepeat.geometry import Pose, Trajectory, curvature_series, quat_from_euler
from teachrepeat.registration import OracleBackend, RegistrationResult
from teachrepeat.scenarios import PathSpec, add_partition, corridor_world, sample_path, straight_spec
from teachrepeat.teach import (TeachGraph, TeachParams, TeachStream, build_graph, drifted_odometry,
                               refine_nodes_stage2, run_teach, select_nodes_stage1)


def fake_register(max_gap):
    def reg(ref, j):
        return RegistrationResult(Pose.identity(), 0.0 if j - ref <= max_gap else 1.0, 10, j - ref <= max_gap)
    return reg


def test_defaults():
    p = TeachParams()
    assert (p.v_i, p.w_pos, p.w_rot, p.tau, p.eps, p.eps_seg) == (1.2, 1.0, 1.15, 0.25, 0.16, 0.04)


def test_stage1_all_register():
    nodes, warn = select_nodes_stage1(50, fake_register(1000))
    assert nodes == [0, 49] and warn == []


@given(st.integers(2, 200), st.integers(1, 30))
def test_stage1_gap_rule(n, gap):
    nodes, _ = select_nodes_stage1(n, fake_register(gap))
    assert nodes[0] == 0 and nodes[-1] == n - 1
    assert all(b - a <= gap for a, b in zip(nodes[:-1], nodes[1:]))
    # every node except the last is exactly the last passing frame
    assert all(b - a == gap for a, b in zip(nodes[:-2], nodes[1:-1]))


def test_stage1_immediate_failure_warns():
    nodes, warn = select_nodes_stage1(4, fake_register(0))
    assert nodes == [0, 1, 2, 3] and len(warn) == 3


def test_stage1_occlusion_wall_brute_force():
    spec = straight_spec(20.0)
    _, b = corridor_world(spec, 0)
    add_partition(b, spec, 10.0)
    world = b.build()
    truth = sample_path(spec, world)
    stream = TeachStream(world, truth)
    oracle = OracleBackend(world)

    def loss(ref, j):
        prior = truth.pose(ref).inverse() @ truth.pose(j)
        return oracle.register(prior, stream.lidar(j), stream.radar(ref)).loss

    nodes, _ = select_nodes_stage1(len(truth), lambda r, j: RegistrationResult(Pose.identity(), loss(r, j), 1, True))
    # brute force from the start: the last frame before the first failure
    first_fail = next(j for j in range(1, len(truth)) if loss(0, j) > 0.25)
    assert nodes == [0, first_fail - 1, len(truth) - 1]
    assert all(loss(first_fail - 1, j) <= 0.25 for j in range(first_fail, len(truth)))
    x = truth.xyz[nodes[1], 0]
    assert 9.0 < x < 10.0  # just before the partition


def test_stage2_straight_path_no_insertion():
    spec = straight_spec(20.0)
    odom = sample_path(spec)
    res = refine_nodes_stage2([0, len(odom) - 1], odom)
    assert res.nodes == [0, len(odom) - 1]
    assert res.global_error == pytest.approx(0.0, abs=1e-9)


def test_stage2_corner_inserts_curvature_max():
    spec = PathSpec((("straight", 6.0), ("turn", 90.0, 1.0), ("straight", 6.0)))
    odom = sample_path(spec)
    n = len(odom)
    res = refine_nodes_stage2([0, n - 1], odom)
    c = curvature_series(odom.xyz)
    first = 1 + int(np.argmax(c[1:n - 1]))
    assert first in res.nodes
    assert len(res.nodes) >= 3
    assert res.global_error <= 0.16
    assert all(b < a for a, b in zip(res.history[:-1], res.history[1:]))


def test_stage2_rejects_bad_input():
    odom = sample_path(straight_spec(5.0))
    with pytest.raises(ValueError):
        refine_nodes_stage2([0], odom)


def _random_odom(rng, n=60):
    yaw = np.cumsum(rng.normal(0, 0.05, n))
    xy = np.cumsum(np.column_stack([np.cos(yaw), np.sin(yaw)]) * 0.12, axis=0)
    return Trajectory(np.arange(n) * 0.1, np.column_stack([xy, np.zeros(n)]),
                      np.array([quat_from_euler(y) for y in yaw]))


def test_graph_edges_telescope(rng):
    odom = _random_odom(rng)
    g = build_graph([0, 59], odom)
    assert len(g.edges) == 1
    assert g.edges[0].T.almost_equal(odom.pose(0).inverse() @ odom.pose(59), 1e-12)
    idx = [0, 7, 20, 33, 41, 59]
    g = build_graph(idx, odom)
    assert len(g.edges) == len(idx) - 1
    T = Pose.identity()
    for e in g.edges:
        T = T @ e.T
    assert T.almost_equal(odom.pose(0).inverse() @ odom.pose(59), 1e-9)


def test_graph_insertion_order_independent(rng):
    odom = _random_odom(rng)
    a = build_graph([0, 59, 20, 7, 41, 33], odom)
    b = build_graph([0, 7, 20, 33, 41, 59], odom)
    for ea, eb in zip(a.edges, b.edges):
        assert ea.T.almost_equal(eb.T, 0.0)


def test_graph_save_load(tmp_path):
    spec = straight_spec(8.0)
    w, _ = corridor_world(spec, 0)
    truth = sample_path(spec, w)
    g = build_graph([0, 30, len(truth) - 1], truth, TeachStream(w, truth), truth, {"k": 1})
    g.save(tmp_path)
    g2 = TeachGraph.load(tmp_path)
    assert [n.frame_index for n in g2.nodes] == [0, 30, len(truth) - 1]
    np.testing.assert_array_equal(g2.node(1).lidar.xyz, g.node(1).lidar.xyz)
    np.testing.assert_array_equal(g2.node(1).radar.doppler, g.node(1).radar.doppler)
    assert g2.edge_to(2).T.almost_equal(g.edge_to(2).T, 0.0)
    assert g2.meta == {"k": 1}
    assert g2.storage_bytes() == g.storage_bytes() > 0


def test_drifted_odometry_deterministic():
    truth = sample_path(straight_spec(10.0))
    a = drifted_odometry(truth, 0.01, 0.001, 3)
    b = drifted_odometry(truth, 0.01, 0.001, 3)
    np.testing.assert_array_equal(a.xyz, b.xyz)
    assert drifted_odometry(truth, 0.0, 0.0, 3) is truth
    assert np.linalg.norm(a.xyz[-1] - truth.xyz[-1]) > 0


def test_run_teach_short_straight_two_nodes():
    spec = straight_spec(8.0)
    w, _ = corridor_world(spec, 0)
    truth = sample_path(spec, w)
    res = run_teach(w, truth, OracleBackend(w))
    assert len(res.graph.nodes) == 2
