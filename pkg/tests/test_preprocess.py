import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teachrepeat.geometry import Pose
from teachrepeat.preprocess import (FovMask, ImageSpec, THETA_MASK_DEG, crop_lidar, image_normals, normalize_channel,
                                    pixel_coords, project_cylindrical, pseudo_intensity, radar_pseudo_intensity)
from teachrepeat.scenarios import MATERIALS
from teachrepeat.world import LidarFrame, lidar_intensity, radar_power


def frame(xyz):
    xyz = np.asarray(xyz, float)
    return LidarFrame(0.0, xyz, np.ones(len(xyz)), np.arange(len(xyz)))


def test_crop_full_circle_is_identity():
    f = frame([[1, 0, 0], [-1, 0, 0], [0, -1, 0]])
    assert len(crop_lidar(f, FovMask(half_width=math.pi))) == 3


def test_crop_removes_point_behind():
    f = frame([[1, 0, 0], [-1, 0, 0], [1, 2, 0]])
    out = crop_lidar(f, FovMask(half_width=math.radians(67.5)))
    np.testing.assert_array_equal(out.labels, [0, 2])


def test_default_mask_width():
    assert THETA_MASK_DEG == 135.0
    assert FovMask().half_width == pytest.approx(math.radians(67.5))


def test_crop_uses_prior():
    # a prior rotating by 180 degrees flips front and back
    f = frame([[1, 0, 0], [-1, 0, 0]])
    prior = Pose([0.0, 0.0, 0.0, 1.0], [0, 0, 0])
    np.testing.assert_array_equal(crop_lidar(f, FovMask(prior=prior)).labels, [1])


def test_pseudo_intensity_examples():
    assert pseudo_intensity([0.0], [[5, 0, 0]])[0] == 0.0
    assert pseudo_intensity([4.0], [[1e-30, 0, 0]])[0] == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValueError):
        pseudo_intensity([-1.0], [[1, 0, 0]])


def _ratio(mat, d, cos_inc=1.0):
    xyz = np.array([[d, 0.0, 0.0]])
    radar = pseudo_intensity(radar_power(mat.A, cos_inc, d), xyz)[0]
    return radar / lidar_intensity(mat.rho0, cos_inc, d)


@pytest.mark.parametrize("mat", MATERIALS)
def test_ratio_range_invariant(mat):
    r10, r40 = _ratio(mat, 10.0), _ratio(mat, 40.0)
    assert abs(r10 - r40) <= 1e-12 * abs(r10)
    assert r10 == pytest.approx(mat.A / mat.rho0, rel=1e-12)


@given(st.floats(1.0, 200.0), st.floats(1.0, 200.0), st.floats(0.05, 1.0))
def test_ratio_invariant_under_range_and_incidence(d1, d2, c):
    m = MATERIALS[1]
    assert _ratio(m, d1, c) == pytest.approx(_ratio(m, d2, 1.0), rel=1e-12)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_channel([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_channel([5, 5]), [0, 0])
    with pytest.raises(ValueError):
        normalize_channel([])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_normalize_idempotent_and_bounded(v):
    a = normalize_channel(v)
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_allclose(normalize_channel(a), a, atol=1e-12)


def test_projection_center_and_resolution():
    spec = ImageSpec()
    assert (spec.height, spec.width) == (32, 675)
    # (1, 0, 0) sits on the raw origin (0, 0); the image centre after the half-size offset
    u, v = pixel_coords(np.array([[1.0, 0, 0]]), spec)
    assert (u[0], v[0]) == (spec.width // 2, spec.height // 2)


def test_projection_nearest_wins_order_free():
    spec = ImageSpec(8, 16)
    pts = np.array([[2.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    vals = np.array([20.0, 10.0, 30.0])
    for perm in ([0, 1, 2], [2, 1, 0], [1, 2, 0]):
        img = project_cylindrical(pts[perm], vals[perm], spec)
        assert img.valid.sum() == 1
        assert img.pixels[img.valid][0, 0] == 10.0
        assert img.rng[img.valid][0] == 1.0


def test_image_normals_on_plane():
    spec = ImageSpec(16, 64, math.radians(90), math.radians(40))
    ys, zs = np.meshgrid(np.linspace(-4, 4, 200), np.linspace(-2, 2, 80))
    pts = np.column_stack([np.full(ys.size, 5.0), ys.ravel(), zs.ravel()])
    img = project_cylindrical(pts, pts, spec)
    n, ok = image_normals(img)
    assert ok.sum() > 10
    np.testing.assert_allclose(np.abs(n[ok][:, 0]), 1.0, atol=1e-6)
