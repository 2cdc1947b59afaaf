import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teachrepeat.doppler import (DegenerateGeometryError, InsufficientDataError, RansacConfig, ego_velocity,
                                 motion_prior)
from teachrepeat.geometry import Pose


def spread_points(n, rng):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(2, 40, size=(n, 1))


def test_default_iterations():
    cfg = RansacConfig()
    # ceil(log(0.01) / log(1 - 0.7^3)) = 11, below the 120 cap
    assert cfg.iterations == math.ceil(math.log(0.01) / math.log(1 - 0.343)) == 11
    assert RansacConfig(inlier_ratio=0.1).iterations == 120


def test_zero_doppler_gives_zero_velocity(rng):
    xyz = spread_points(50, rng)
    est = ego_velocity(xyz, np.zeros(50))
    np.testing.assert_allclose(est.v, 0.0, atol=1e-12)
    assert est.inliers.all()


def test_noiseless_recovery_matches_normal_equations(rng):
    v_true = np.array([1.0, 0.2, 0.0])
    xyz = spread_points(80, rng)
    H = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
    dop = H @ v_true
    # independent oracle: 3x3 normal equations by Cramer's rule
    A, b = H.T @ H, H.T @ dop
    det = np.linalg.det(A)
    oracle = np.array([np.linalg.det(np.column_stack([b if j == i else A[:, j] for j in range(3)])) / det
                       for i in range(3)])
    est = ego_velocity(xyz, dop)
    np.testing.assert_allclose(est.v, v_true, atol=1e-9)
    np.testing.assert_allclose(oracle, v_true, atol=1e-9)


def test_gross_outliers_excluded(rng):
    v_true = np.array([1.2, -0.1, 0.05])
    n, n_out = 100, 30
    xyz = spread_points(n, rng)
    H = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
    dop = H @ v_true + rng.normal(0, 0.01, n)
    out = rng.choice(n, n_out, replace=False)
    dop[out] += rng.choice([-1, 1], n_out) * rng.uniform(0.6, 3.0, n_out)
    est = ego_velocity(xyz, dop, seed=3)
    assert not est.inliers[out].any()
    assert np.linalg.norm(est.v - v_true) < 0.02


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.integers(0, 10_000))
def test_noiseless_recovery_property(v, seed):
    rng = np.random.default_rng(seed)
    xyz = spread_points(30, rng)
    H = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
    est = ego_velocity(xyz, H @ np.array(v), seed=seed)
    np.testing.assert_allclose(est.v, v, atol=1e-9)


def test_errors(rng):
    with pytest.raises(InsufficientDataError):
        ego_velocity(spread_points(2, rng), np.zeros(2))
    planar = spread_points(20, rng)
    planar[:, 2] = 0.0
    with pytest.raises(DegenerateGeometryError):
        ego_velocity(planar, np.zeros(20))
    with pytest.raises(DegenerateGeometryError):
        ego_velocity(np.zeros((5, 3)), np.zeros(5))


def test_motion_prior_examples():
    D = motion_prior([1.4, 0, 0], 14.0).D
    np.testing.assert_allclose(D.t, [0.1, 0, 0], atol=1e-15)
    assert D.rotation_angle() == 0.0
    assert motion_prior([0, 0, 0], 14.0).D.almost_equal(Pose.identity(), 0.0)
    with pytest.raises(ValueError):
        motion_prior([1, 0, 0], 0.0)
