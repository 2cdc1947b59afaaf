import math

import numpy as np
import pytest

from teachrepeat.geometry import Pose
from teachrepeat.preprocess import FovMask, crop_lidar, geometry_image, image_normals
from teachrepeat.registration import (BIAS_CLAMP, CorrectionModel, IcpBackend, IcpConfig, InitializationError,
                                      OracleBackend, OracleConfig, initial_node_search, make_backend, planar_pose)
from teachrepeat.scenarios import corridor_world, loop_world, sample_path, straight_spec
from teachrepeat.teach import TeachStream, build_graph
from teachrepeat.world import RadarFrame


@pytest.fixture(scope="module")
def loop():
    w, spec = loop_world(0)
    return w, sample_path(spec, w)


def test_icp_identical_frames_identity(loop):
    w, traj = loop
    icp = IcpBackend()
    pose = traj.pose(100)
    lf = crop_lidar(w.render_lidar(pose), FovMask(0.0, math.radians(67.5)))
    g = geometry_image(lf.xyz, icp.cfg.image)
    _, ok = image_normals(g)
    lf = lf.subset(np.sort(g.src[g.valid & ok]))  # one point per image cell
    live = RadarFrame(0.0, lf.xyz.copy(), np.zeros(len(lf)), lf.intensity.copy(), lf.labels, pose)
    res = icp.register(Pose.identity(), lf, live)
    assert res.converged
    assert res.T.translation_norm() < 1e-6 and res.T.rotation_angle() < 1e-6


def test_icp_30_degree_prior_fails(loop):
    w, traj = loop
    icp = IcpBackend()
    for s in range(20):
        p = traj.pose(50 + 7 * s)
        lf, rf = w.render_lidar(p, seed=s), w.render_radar(p, [1.2, 0, 0], seed=s, key=s)
        assert not icp.register(planar_pose(0, 0, math.radians(30)), lf, rf, key=s).converged


def test_icp_reduces_prior_error(loop):
    # sparse radar against LiDAR: the classical matcher roughly halves a 0.3 m prior error
    w, traj = loop
    icp = IcpBackend()
    errs = []
    for s in range(10):
        ref_pose = traj.pose(60 + 9 * s)
        live_pose = ref_pose @ planar_pose(0.3, 0.1, math.radians(3))
        lf, rf = w.render_lidar(ref_pose, seed=s), w.render_radar(live_pose, [1.2, 0, 0], seed=s, key=s)
        gt = live_pose.inverse() @ ref_pose
        res = icp.register(Pose.identity(), lf, rf, key=s)
        assert res.converged
        errs.append((gt.inverse() @ res.T).translation_norm())
    assert np.mean(errs) < 0.6 * gt.translation_norm()


def test_oracle_exact_offset(loop):
    w, traj = loop
    oracle = OracleBackend(w)
    ref_pose = traj.pose(100)
    live_pose = ref_pose @ planar_pose(0.3, 0.0, math.radians(5))
    lf, rf = w.render_lidar(ref_pose), w.render_radar(live_pose, [1, 0, 0])
    res = oracle.register(Pose.identity(), lf, rf)
    expected = planar_pose(0.3, 0.0, math.radians(5)).inverse()
    assert res.converged and res.T.almost_equal(expected, 1e-12)


def test_oracle_identical_identity(loop):
    w, traj = loop
    p = traj.pose(30)
    res = OracleBackend(w).register(Pose.identity(), w.render_lidar(p), w.render_radar(p, [1, 0, 0]))
    assert res.T.translation_norm() < 1e-12 and res.T.rotation_angle() < 1e-12


def test_oracle_basin_failure(loop):
    w, traj = loop
    p = traj.pose(30)
    res = OracleBackend(w).register(planar_pose(3.0, 0, 0), w.render_lidar(p), w.render_radar(p, [1, 0, 0]))
    assert not res.converged and math.isinf(res.loss)


def test_correction_applied_on_left():
    b = planar_pose(0.0, -0.2, 0.01)
    c = CorrectionModel({4: b})
    T = planar_pose(1.0, 0.5, 0.3)
    assert c.apply(4, T).almost_equal(b @ T, 1e-15)
    assert c.apply(5, T).almost_equal(T, 0.0)
    assert c.apply(None, T).almost_equal(T, 0.0)


def test_correction_clamp_and_roundtrip():
    c = CorrectionModel({1: planar_pose(3.0, 4.0, 0.0)}, w_I=0.3)
    assert c.bias(1).translation_norm() == pytest.approx(BIAS_CLAMP)
    c2 = CorrectionModel.from_dict(c.to_dict())
    assert c2.w_I == 0.3 and c2.bias(1).almost_equal(c.bias(1), 1e-15)
    with pytest.raises(ValueError):
        CorrectionModel(w_I=1.5)


def test_make_backend():
    assert make_backend("oracle").name == "oracle"
    assert make_backend("icp", icp=IcpConfig(window=4)).cfg.window == 4
    with pytest.raises(ValueError):
        make_backend("ndt")


def _small_graph():
    spec = straight_spec(30.0)
    w, _ = corridor_world(spec, 0)
    traj = sample_path(spec, w)
    stream = TeachStream(w, traj)
    idx = list(range(0, len(traj), 25))
    return w, traj, build_graph(idx, traj, stream, traj)


def test_initial_node_search_brute_force():
    w, traj, g = _small_graph()
    oracle = OracleBackend(w)
    node = g.node(3)
    live = w.render_radar(node.gt_pose, [0, 0, 0], seed=1)
    found, res = initial_node_search(live, g, oracle)
    # brute force: the node nearest to the robot
    d = [np.linalg.norm(n.gt_pose.t - node.gt_pose.t) for n in g.nodes]
    assert found == int(np.argmin(d)) == 3
    assert res.T.translation_norm() < 1e-9


def test_initial_node_search_single_node_and_failure():
    w, traj, g = _small_graph()
    g.nodes = g.nodes[:1]
    g.edges = []
    live = w.render_radar(traj.pose(5), [0, 0, 0])
    assert initial_node_search(live, g, OracleBackend(w))[0] == 0
    strict = OracleBackend(w, OracleConfig(min_overlap=1.1))
    with pytest.raises(InitializationError):
        initial_node_search(live, g, strict)
