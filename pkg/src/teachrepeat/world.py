"""Synthetic surfel worlds and LiDAR / 4D-radar scan rendering.

Sensor frames are x forward, y left, z up.  Frames carry simulator-side
metadata (ground-truth pose, per-point surfel label, smoke losses) that the
oracle registration backend and the evaluation use; estimators never read it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import Pose
from .raycast import SurfelGrid, build_grid, cast_rays

NEVER = 2**31 - 1


@dataclass(frozen=True)
class Material:
    name: str
    rho0: float
    A: float

    def __post_init__(self):
        if not (self.rho0 > 0 and self.A > 0):
            raise ValueError("material constants must be positive")


@dataclass(frozen=True, eq=False)
class Surfel:
    center: np.ndarray
    normal: np.ndarray
    extent: float
    material: int
    added_at: int = 0
    removed_at: int = NEVER
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("surfel normal must be unit length")
        if not self.extent > 0:
            raise ValueError("surfel extent must be positive")


@dataclass(frozen=True)
class SmokeRegion:
    lo: tuple
    hi: tuple
    lidar_attenuation: float = 60.0  # 1/km
    dropout_prob: float = 0.9
    epochs: tuple = (1, NEVER)  # active for start <= epoch < end

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")

    def active(self, epoch: int) -> bool:
        return self.epochs[0] <= epoch < self.epochs[1]

    def path_length(self, origin: np.ndarray, dirs: np.ndarray, t_hit: np.ndarray) -> np.ndarray:
        """Length of each ray segment ``[0, t_hit]`` that lies inside the box (slab test)."""
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (lo - origin) * inv
            t1 = (hi - origin) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=1)
        tmin = np.maximum(tmin, 0.0)
        tmax = np.minimum(tmax, t_hit)
        return np.clip(tmax - tmin, 0.0, None)


@dataclass(frozen=True)
class SensorSpec:
    modality: str
    azimuth_fov: float
    elevation_fov: float
    max_range: float
    azimuth_res: float
    elevation_res: float
    rate: float
    points_per_second: float | None = None

    def __post_init__(self):
        if self.modality not in ("lidar", "radar4d"):
            raise ValueError(f"unknown modality {self.modality!r}")
        for name in ("azimuth_fov", "elevation_fov", "max_range", "azimuth_res", "elevation_res", "rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def points_per_frame(self) -> int:
        if self.points_per_second is None:
            return 0
        return int(round(self.points_per_second / self.rate))


# Hardware figures of the reference sensors.
RADAR_SPEC = SensorSpec("radar4d", 120.0, 30.0, 400.0, 0.5, 1.0, 14.0, 4.16e3)
LIDAR_SPEC = SensorSpec("lidar", 360.0, 70.0, 150.0, 0.1, 0.5, 10.0)
# Desk-scale versions: same FOV and rates, coarser angular grids and shorter range.
DESK_RADAR_SPEC = SensorSpec("radar4d", 120.0, 30.0, 60.0, 0.5, 1.0, 14.0, 4.16e3)
DESK_LIDAR_SPEC = SensorSpec("lidar", 360.0, 70.0, 40.0, 1.0, 5.0, 10.0)


@dataclass(frozen=True)
class RenderConfig:
    alpha: float = 0.03  # atmospheric attenuation, 1/km
    k_radar: float = 1.0  # K'
    k_lidar: float = 1.0  # K''
    lidar_range_sigma: float = 0.0
    radar_pos_sigma: float = 0.05
    doppler_sigma: float = 0.02
    outlier_frac: float = 0.10


def lidar_intensity(rho0, cos_inc, d, alpha=0.03, k_lidar=1.0):
    """``K'' rho0 cos(theta_inc) / d^2 * exp(-2 alpha d)`` with ``alpha`` in 1/km and ``d`` in m."""
    d = np.asarray(d, float)
    return k_lidar * np.asarray(rho0) * np.asarray(cos_inc) / d**2 * np.exp(-2.0 * alpha * d / 1000.0)


def radar_power(A, cos_inc, d, k_radar=1.0):
    """``K' A^2 cos^2(theta_inc) / d^4``."""
    d = np.asarray(d, float)
    return k_radar * np.asarray(A) ** 2 * np.asarray(cos_inc) ** 2 / d**4


@dataclass(eq=False)
class LidarFrame:
    t: float
    xyz: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray | None = None
    n_lost: int = 0
    gt_pose: Pose | None = None
    epoch: int = 0

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, keep) -> "LidarFrame":
        lab = None if self.labels is None else self.labels[keep]
        return LidarFrame(self.t, self.xyz[keep], self.intensity[keep], lab, self.n_lost, self.gt_pose, self.epoch)


@dataclass(eq=False)
class RadarFrame:
    t: float
    xyz: np.ndarray
    doppler: np.ndarray
    power: np.ndarray
    labels: np.ndarray | None = None
    gt_pose: Pose | None = None
    gt_velocity: np.ndarray | None = None
    epoch: int = 0

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, keep) -> "RadarFrame":
        lab = None if self.labels is None else self.labels[keep]
        return RadarFrame(self.t, self.xyz[keep], self.doppler[keep], self.power[keep], lab,
                          self.gt_pose, self.gt_velocity, self.epoch)


def frame_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])


class World:
    """Immutable surfel scene.  Surfel attributes live in parallel arrays."""

    def __init__(self, materials, centers, normals, extents, material_idx, added_at=None, removed_at=None,
                 velocity=None, smoke=(), terrain=None, name="world", meta=None):
        self.materials = list(materials)
        self.centers = np.ascontiguousarray(centers, float).reshape(-1, 3)
        self.normals = np.ascontiguousarray(normals, float).reshape(-1, 3)
        self.extents = np.ascontiguousarray(extents, float).reshape(-1)
        self.material_idx = np.asarray(material_idx, np.int64).reshape(-1)
        n = len(self.centers)
        self.added_at = np.zeros(n, np.int64) if added_at is None else np.asarray(added_at, np.int64)
        self.removed_at = np.full(n, NEVER, np.int64) if removed_at is None else np.asarray(removed_at, np.int64)
        self.velocity = np.zeros((n, 3)) if velocity is None else np.asarray(velocity, float).reshape(-1, 3)
        self.smoke = tuple(smoke)
        self.terrain = terrain or {"x": [-1e6, 1e6], "z": [0.0, 0.0]}
        self.name = name
        self.meta = dict(meta or {})
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-9):
            raise ValueError("surfel normals must be unit length")
        if np.any(self.extents <= 0):
            raise ValueError("surfel extents must be positive")
        self.rho0 = np.array([m.rho0 for m in self.materials])[self.material_idx] if n else np.zeros(0)
        self.A = np.array([m.A for m in self.materials])[self.material_idx] if n else np.zeros(0)

    def __len__(self) -> int:
        return len(self.centers)

    @cached_property
    def moving(self) -> np.ndarray:
        return np.any(self.velocity != 0.0, axis=1)

    @cached_property
    def grid(self) -> SurfelGrid:
        static = ~self.moving
        g = build_grid(self.centers[static], self.extents[static])
        # grid items index the static subset; remap to global indices
        glob = np.flatnonzero(static)
        return SurfelGrid(g.x0, g.y0, g.cell, g.nx, g.ny, g.start, glob[g.items] if len(g.items) else g.items)

    def apply_epoch(self, epoch: int) -> np.ndarray:
        """Boolean mask of surfels present at ``epoch``."""
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        return (self.added_at <= epoch) & (epoch < self.removed_at)

    def ground_height(self, x, y=None):
        return np.interp(x, self.terrain["x"], self.terrain["z"])

    def ground_slope(self, x) -> float:
        h = 0.05
        return float((self.ground_height(x + h) - self.ground_height(x - h)) / (2 * h))

    # ------------------------------------------------------------ rendering

    def _cast(self, pose: Pose, dirs_sensor: np.ndarray, max_range: float, epoch: int, t: float):
        dirs_w = dirs_sensor @ pose.R.T
        active = self.apply_epoch(epoch) & ~self.moving
        extra = None
        mv = np.flatnonzero(self.moving & self.apply_epoch(epoch))
        if len(mv):
            # moving surfels are indexed from a block appended after the static ones
            extra = (self.centers[mv] + self.velocity[mv] * t, self.normals[mv], self.extents[mv], 0)
        t_hit, idx = cast_rays(pose.t, dirs_w, max_range, self.grid, self.centers, self.normals,
                               self.extents, active, None)
        if extra is not None:
            t_m, i_m = cast_rays(pose.t, dirs_w, max_range, SurfelGrid(0, 0, 1, 1, 1, np.zeros(2, np.int64),
                                                                       np.zeros(0, np.int64)),
                                 self.centers, self.normals, self.extents, active, extra)
            closer = t_m < t_hit
            t_hit = np.where(closer, t_m, t_hit)
            idx = np.where(closer, mv[np.clip(i_m, 0, None)], idx)
        return dirs_w, t_hit, idx

    def render_lidar(self, pose: Pose, spec: SensorSpec = DESK_LIDAR_SPEC, epoch: int = 0, seed: int = 0,
                     t: float = 0.0, cfg: RenderConfig = RenderConfig(), key: int = 0) -> LidarFrame:
        if spec.modality != "lidar":
            raise ValueError("render_lidar needs a lidar spec")
        dirs = lidar_directions(spec)
        rng = frame_rng(seed, 1, key)
        if len(self) == 0:
            return LidarFrame(t, np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64), 0, pose, epoch)
        dirs_w, t_hit, idx = self._cast(pose, dirs, spec.max_range, epoch, t)
        u_drop = rng.random(len(dirs))
        noise = rng.standard_normal(len(dirs)) * cfg.lidar_range_sigma
        hit = idx >= 0
        atten = np.ones(len(dirs))
        lost = np.zeros(len(dirs), bool)
        for region in self.smoke:
            if not region.active(epoch):
                continue
            L = region.path_length(pose.t, dirs_w, np.where(hit, t_hit, spec.max_range))
            inside = L > 0
            lost |= inside & (u_drop < region.dropout_prob)
            atten *= np.exp(-2.0 * region.lidar_attenuation * L / 1000.0)
        keep = hit & ~lost
        n_lost = int(np.sum(hit & lost))
        s = idx[keep]
        d = t_hit[keep] + noise[keep]
        cos_inc = -np.sum(dirs_w[keep] * self.normals[s], axis=1)
        inten = lidar_intensity(self.rho0[s], cos_inc, t_hit[keep], cfg.alpha, cfg.k_lidar) * atten[keep]
        xyz = dirs[keep] * d[:, None]
        return LidarFrame(t, xyz, inten, s.astype(np.int64), n_lost, pose, epoch)

    def render_radar(self, pose: Pose, velocity_sensor, spec: SensorSpec = DESK_RADAR_SPEC, epoch: int = 0,
                     seed: int = 0, t: float = 0.0, cfg: RenderConfig = RenderConfig(), key: int = 0) -> RadarFrame:
        """Sparse radar scan.  Smoke regions are ignored by construction."""
        if spec.modality != "radar4d":
            raise ValueError("render_radar needs a radar4d spec")
        v = np.asarray(velocity_sensor, float).reshape(3)
        rng = frame_rng(seed, 2, key)
        target = spec.points_per_frame or 300
        n_cast = 2 * target
        az = np.deg2rad(_quantize(rng.uniform(-spec.azimuth_fov / 2, spec.azimuth_fov / 2, n_cast), spec.azimuth_res))
        el = np.deg2rad(_quantize(rng.uniform(-spec.elevation_fov / 2, spec.elevation_fov / 2, n_cast),
                                  spec.elevation_res))
        dirs = _sph_to_dir(az, el)
        pos_noise = rng.standard_normal((n_cast, 3)) * cfg.radar_pos_sigma
        dop_noise = rng.standard_normal(n_cast) * cfg.doppler_sigma
        n_out_max = int(np.ceil(cfg.outlier_frac / max(1e-9, 1 - cfg.outlier_frac) * target)) + 1
        o_az = np.deg2rad(rng.uniform(-spec.azimuth_fov / 2, spec.azimuth_fov / 2, n_out_max))
        o_el = np.deg2rad(rng.uniform(-spec.elevation_fov / 2, spec.elevation_fov / 2, n_out_max))
        o_r = rng.uniform(2.0, 0.5 * spec.max_range, n_out_max)
        o_dop = rng.uniform(-4.0, 4.0, n_out_max) + v[0]
        o_pow = 10 ** rng.uniform(-9, -4, n_out_max)
        if len(self) == 0:
            return RadarFrame(t, np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, np.int64), pose, v, epoch)
        dirs_w, t_hit, idx = self._cast(pose, dirs, spec.max_range, epoch, t)
        hit = np.flatnonzero(idx >= 0)[:int(round(target * (1 - cfg.outlier_frac)))]
        s = idx[hit]
        xyz = dirs[hit] * t_hit[hit, None] + pos_noise[hit]
        rhat = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
        dop = rhat @ v + dop_noise[hit]
        cos_inc = -np.sum(dirs_w[hit] * self.normals[s], axis=1)
        pw = radar_power(self.A[s], cos_inc, t_hit[hit], cfg.k_radar)
        n_out = min(n_out_max, int(round(len(hit) * cfg.outlier_frac / max(1e-9, 1 - cfg.outlier_frac))))
        o_xyz = _sph_to_dir(o_az[:n_out], o_el[:n_out]) * o_r[:n_out, None]
        xyz = np.vstack([xyz, o_xyz])
        dop = np.concatenate([dop, o_dop[:n_out]])
        pw = np.concatenate([pw, o_pow[:n_out]])
        labels = np.concatenate([s.astype(np.int64), np.full(n_out, -1, np.int64)])
        return RadarFrame(t, xyz, dop, pw, labels, pose, v, epoch)

    # ------------------------------------------------------------ I/O

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "materials": [{"name": m.name, "rho0": m.rho0, "A": m.A} for m in self.materials],
            "surfels": {
                "center": self.centers.tolist(),
                "normal": self.normals.tolist(),
                "extent": self.extents.tolist(),
                "material": self.material_idx.tolist(),
                "added_at": self.added_at.tolist(),
                "removed_at": self.removed_at.tolist(),
                "velocity": self.velocity.tolist(),
            },
            "smoke": [{"lo": list(s.lo), "hi": list(s.hi), "lidar_attenuation": s.lidar_attenuation,
                       "dropout_prob": s.dropout_prob, "epochs": list(s.epochs)} for s in self.smoke],
            "terrain": {"x": list(map(float, self.terrain["x"])), "z": list(map(float, self.terrain["z"]))},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        s = d["surfels"]
        mats = [Material(m["name"], m["rho0"], m["A"]) for m in d["materials"]]
        smoke = [SmokeRegion(tuple(r["lo"]), tuple(r["hi"]), r["lidar_attenuation"], r["dropout_prob"],
                             tuple(r["epochs"])) for r in d.get("smoke", [])]
        return cls(mats, np.array(s["center"], float).reshape(-1, 3), np.array(s["normal"], float).reshape(-1, 3),
                   s["extent"], s["material"], s.get("added_at"), s.get("removed_at"),
                   np.array(s.get("velocity", np.zeros((len(s["extent"]), 3))), float).reshape(-1, 3),
                   smoke, d.get("terrain"), d.get("name", "world"), d.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_smoke(self, smoke) -> "World":
        d = self.to_dict()
        w = World.from_dict(d)
        w.smoke = tuple(smoke)
        return w


def _quantize(deg: np.ndarray, res: float) -> np.ndarray:
    return (np.floor(deg / res) + 0.5) * res


def _sph_to_dir(az: np.ndarray, el: np.ndarray) -> np.ndarray:
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=1)


_DIR_CACHE: dict = {}


def lidar_directions(spec: SensorSpec) -> np.ndarray:
    key = (spec.azimuth_fov, spec.elevation_fov, spec.azimuth_res, spec.elevation_res)
    if key not in _DIR_CACHE:
        n_az = int(round(spec.azimuth_fov / spec.azimuth_res))
        n_el = int(round(spec.elevation_fov / spec.elevation_res))
        az = -spec.azimuth_fov / 2 + (np.arange(n_az) + 0.5) * spec.azimuth_res
        el = -spec.elevation_fov / 2 + (np.arange(n_el) + 0.5) * spec.elevation_res
        A, E = np.meshgrid(np.deg2rad(az), np.deg2rad(el), indexing="ij")
        _DIR_CACHE[key] = _sph_to_dir(A.ravel(), E.ravel())
    return _DIR_CACHE[key]


# ------------------------------------------------------------ frame files

def _write_csv(path, header: str, cols) -> None:
    arr = np.column_stack(cols) if len(cols[0]) else np.zeros((0, len(cols)))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_csv(path) -> np.ndarray:
    with open(path) as fh:
        fh.readline()
        rows = [list(map(float, ln.split(","))) for ln in fh if ln.strip()]
    return np.array(rows, float)


def _meta_path(path) -> Path:
    p = Path(path)
    return p.with_suffix(".meta.json")


def _write_meta(path, frame) -> None:
    meta = {"labels": None if frame.labels is None else frame.labels.tolist(),
            "gt_pose": None if frame.gt_pose is None else frame.gt_pose.to_list(),
            "epoch": int(frame.epoch)}
    if isinstance(frame, LidarFrame):
        meta["n_lost"] = int(frame.n_lost)
    else:
        meta["gt_velocity"] = None if frame.gt_velocity is None else [float(v) for v in frame.gt_velocity]
    _meta_path(path).write_text(json.dumps(meta, separators=(",", ":")))


def save_lidar_csv(frame: LidarFrame, path) -> None:
    n = len(frame)
    _write_csv(path, "t,x,y,z,intensity",
               [np.full(n, frame.t), frame.xyz[:, 0], frame.xyz[:, 1], frame.xyz[:, 2], frame.intensity])
    _write_meta(path, frame)


def save_radar_csv(frame: RadarFrame, path) -> None:
    n = len(frame)
    _write_csv(path, "t,x,y,z,doppler,power",
               [np.full(n, frame.t), frame.xyz[:, 0], frame.xyz[:, 1], frame.xyz[:, 2], frame.doppler, frame.power])
    _write_meta(path, frame)


def _load_meta(path) -> dict:
    p = _meta_path(path)
    return json.loads(p.read_text()) if p.exists() else {}


def load_lidar_csv(path, t: float | None = None) -> LidarFrame:
    a = _read_csv(path).reshape(-1, 5)
    m = _load_meta(path)
    lab = None if m.get("labels") is None else np.array(m["labels"], np.int64)
    pose = None if m.get("gt_pose") is None else Pose.from_list(m["gt_pose"])
    tt = float(a[0, 0]) if len(a) else (t or 0.0)
    return LidarFrame(tt, a[:, 1:4].copy(), a[:, 4].copy(), lab, m.get("n_lost", 0), pose, m.get("epoch", 0))


def load_radar_csv(path, t: float | None = None) -> RadarFrame:
    a = _read_csv(path).reshape(-1, 6)
    m = _load_meta(path)
    lab = None if m.get("labels") is None else np.array(m["labels"], np.int64)
    pose = None if m.get("gt_pose") is None else Pose.from_list(m["gt_pose"])
    vel = None if m.get("gt_velocity") is None else np.array(m["gt_velocity"])
    tt = float(a[0, 0]) if len(a) else (t or 0.0)
    return RadarFrame(tt, a[:, 1:4].copy(), a[:, 4].copy(), a[:, 5].copy(), lab, pose, vel, m.get("epoch", 0))
