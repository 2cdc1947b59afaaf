"""Radar/LiDAR alignment: FOV cropping, pseudo radar intensity, normalisation, cylindrical projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DegenerateInputError, Pose, wrap_angle
from .world import LidarFrame, RadarFrame

THETA_MASK_DEG = 135.0


@dataclass(frozen=True, eq=False)
class FovMask:
    """Azimuth wedge in the radar frame.  ``prior`` maps LiDAR coordinates into the radar frame."""

    center_azimuth: float = 0.0
    half_width: float = np.deg2rad(THETA_MASK_DEG / 2)
    prior: Pose = Pose.identity()

    def __post_init__(self):
        if not 0.0 < self.half_width <= np.pi:
            raise ValueError("half_width must lie in (0, pi]")


def crop_lidar(frame: LidarFrame, mask: FovMask) -> LidarFrame:
    """Keep LiDAR points whose azimuth, seen from the radar, falls inside the mask."""
    if mask.half_width >= np.pi:
        return frame
    p = mask.prior.apply(frame.xyz) if len(frame) else frame.xyz
    az = np.arctan2(p[:, 1], p[:, 0])
    keep = np.abs(wrap_angle(az - mask.center_azimuth)) <= mask.half_width
    return frame.subset(keep)


def pseudo_intensity(power, xyz, alpha: float = 0.03) -> np.ndarray:
    """``sqrt(P) * exp(-2 alpha d)`` with ``alpha`` in 1/km and ranges in metres."""
    power = np.asarray(power, float)
    if np.any(power < 0):
        raise ValueError("radar power must be non-negative")
    d = np.linalg.norm(np.asarray(xyz, float).reshape(-1, 3), axis=1)
    return np.sqrt(power) * np.exp(-2.0 * alpha * d / 1000.0)


def radar_pseudo_intensity(frame: RadarFrame, alpha: float = 0.03) -> np.ndarray:
    return pseudo_intensity(frame.power, frame.xyz, alpha)


def normalize_channel(values) -> np.ndarray:
    """Min-max scale to ``[0, 1]``; a constant channel maps to zeros."""
    v = np.asarray(values, float)
    if v.size == 0:
        raise ValueError("cannot normalise an empty channel")
    lo, hi = v.min(), v.max()
    if hi - lo <= 0.0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def log_intensity_feature(values) -> np.ndarray:
    """Normalised log intensity, the matching feature used by the ICP backend."""
    v = np.asarray(values, float)
    return normalize_channel(np.log(np.maximum(v, 1e-30)))


@dataclass(frozen=True)
class ImageSpec:
    height: int = 32
    width: int = 675
    az_fov: float = 2 * np.pi
    el_fov: float = np.deg2rad(70.0)

    @property
    def d_az(self) -> float:
        return self.az_fov / self.width

    @property
    def d_el(self) -> float:
        return self.el_fov / self.height


@dataclass(eq=False)
class PseudoImage:
    pixels: np.ndarray  # (H, W, C)
    valid: np.ndarray  # (H, W) bool
    src: np.ndarray  # (H, W) source point index, -1 where invalid
    rng: np.ndarray  # (H, W) range of the stored point, inf where invalid
    spec: ImageSpec

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def raw_uv(xyz: np.ndarray, d_az: float, d_el: float):
    """Unshifted continuous pixel coordinates ``(atan2(y,x)/d_az, asin(z/r)/d_el)``."""
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    r = np.linalg.norm(xyz, axis=1)
    if np.any(r < 1e-12):
        raise DegenerateInputError("point at the sensor origin")
    return np.arctan2(xyz[:, 1], xyz[:, 0]) / d_az, np.arcsin(np.clip(xyz[:, 2] / r, -1, 1)) / d_el


def pixel_coords(xyz: np.ndarray, spec: ImageSpec):
    """Integer cells: azimuth ``-az_fov/2`` is column 0, the lowest elevation is row 0."""
    u_raw, v_raw = raw_uv(xyz, spec.d_az, spec.d_el)
    u = np.floor(u_raw + spec.width / 2).astype(np.int64)
    v = np.floor(v_raw + spec.height / 2).astype(np.int64)
    return np.clip(u, 0, spec.width - 1), np.clip(v, 0, spec.height - 1)


def project_cylindrical(xyz: np.ndarray, values: np.ndarray, spec: ImageSpec = ImageSpec()) -> PseudoImage:
    """Scatter points into an ``H x W`` grid; in a shared cell the nearest point wins.

    Exact range ties fall back to lexicographic ``(x, y, z)`` so the result does not
    depend on input order.
    """
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    vals = np.asarray(values, float).reshape(len(xyz), -1)
    H, W, C = spec.height, spec.width, vals.shape[1]
    pixels = np.zeros((H, W, C))
    valid = np.zeros((H, W), bool)
    src = np.full((H, W), -1, np.int64)
    rng = np.full((H, W), np.inf)
    if len(xyz) == 0:
        return PseudoImage(pixels, valid, src, rng, spec)
    u, v = pixel_coords(xyz, spec)
    r = np.linalg.norm(xyz, axis=1)
    cell = v * W + u
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0], r, cell))
    first = np.ones(len(order), bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    win = order[first]
    vv, uu = v[win], u[win]
    pixels[vv, uu] = vals[win]
    valid[vv, uu] = True
    src[vv, uu] = win
    rng[vv, uu] = r[win]
    return PseudoImage(pixels, valid, src, rng, spec)


def geometry_image(frame_xyz: np.ndarray, spec: ImageSpec = ImageSpec()) -> PseudoImage:
    return project_cylindrical(frame_xyz, frame_xyz, spec)


def intensity_image(xyz: np.ndarray, intensity: np.ndarray, spec: ImageSpec = ImageSpec()) -> PseudoImage:
    return project_cylindrical(xyz, normalize_channel(intensity) if len(intensity) else intensity, spec)


def image_normals(geom: PseudoImage) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell unit normals from neighbouring cells; returns ``(normals, ok_mask)``."""
    P = geom.pixels
    V = geom.valid
    H, W = V.shape
    n = np.zeros((H, W, 3))
    ok = np.zeros((H, W), bool)
    for du, dv in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
        # tangents along the row and column directions, wrapping in azimuth
        pu = np.roll(P, -du, axis=1)
        vu = np.roll(V, -du, axis=1)
        pv = np.zeros_like(P)
        vv = np.zeros_like(V)
        if dv > 0:
            pv[:-1], vv[:-1] = P[1:], V[1:]
        else:
            pv[1:], vv[1:] = P[:-1], V[:-1]
        a = pu - P
        b = pv - P
        c = np.cross(a, b)
        nc = np.linalg.norm(c, axis=2)
        good = V & vu & vv & (nc > 1e-9) & (np.linalg.norm(a, axis=2) < 1.5) & (np.linalg.norm(b, axis=2) < 1.5)
        c = c / np.maximum(nc, 1e-12)[..., None]
        # orient toward the sensor
        flip = np.sum(c * P, axis=2) > 0
        c[flip] *= -1
        take = good & ~ok
        n[take] = c[take]
        ok |= good
    return n, ok


# ------------------------------------------------------------ export

def save_pfm(img: PseudoImage, path, channel: int = 0) -> None:
    """Single-channel little-endian PFM, invalid cells written as NaN."""
    data = np.where(img.valid, img.pixels[..., channel], np.nan).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (img.width, img.height))
        fh.write(data.tobytes())


def save_csv_grid(img: PseudoImage, path, channel: int = 0) -> None:
    data = np.where(img.valid, img.pixels[..., channel], np.nan)
    np.savetxt(path, data, delimiter=",", fmt="%.9g")
