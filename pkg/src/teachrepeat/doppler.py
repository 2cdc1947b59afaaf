"""Ego-velocity from radar Doppler with RANSAC, and the constant-velocity motion prior.

Doppler convention: ``doppler_i = r_i . v`` where ``r_i`` is the unit ray to the
point and ``v`` the sensor velocity, both in the sensor frame.  Stacking the
rays as ``H`` gives ``doppler = H v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose


class DegenerateGeometryError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    min_samples: int = 3
    confidence: float = 0.99
    inlier_ratio: float = 0.7
    max_iters: int = 120
    inlier_threshold: float = 0.10  # m/s

    def __post_init__(self):
        if self.min_samples < 3:
            raise ValueError("min_samples must be at least 3")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if not 0.0 < self.inlier_ratio <= 1.0:
            raise ValueError("inlier_ratio must lie in (0, 1]")

    @property
    def iterations(self) -> int:
        """``min(N_iter, ceil(log(1-p) / log(1-eta^M)))``."""
        w = self.inlier_ratio ** self.min_samples
        if w >= 1.0:
            return 1
        return int(min(self.max_iters, math.ceil(math.log(1 - self.confidence) / math.log(1 - w))))


@dataclass(frozen=True, eq=False)
class EgoVelocity:
    v: np.ndarray
    inliers: np.ndarray  # boolean mask over input points
    iterations: int


@dataclass(frozen=True, eq=False)
class MotionPrior:
    D: Pose
    frames: tuple = (0, 1)

    def __post_init__(self):
        if self.D.rotation_angle() > 1e-12:
            raise ValueError("motion prior must be translation-only")


def _rank_ok(H: np.ndarray) -> bool:
    s = np.linalg.svd(H, compute_uv=False)
    return s.size == 3 and s[-1] >= 1e-6 * s[0]


def ray_directions(xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    r = np.linalg.norm(xyz, axis=1, keepdims=True)
    if np.any(r < 1e-12):
        raise DegenerateGeometryError("radar point at the origin")
    return xyz / r


def ego_velocity(xyz: np.ndarray, doppler: np.ndarray, cfg: RansacConfig = RansacConfig(), seed: int = 0) -> EgoVelocity:
    """Least-squares ``v`` on the RANSAC consensus set of ``doppler = H v``."""
    dop = np.asarray(doppler, float).reshape(-1)
    if len(dop) < cfg.min_samples:
        raise InsufficientDataError(f"need at least {cfg.min_samples} points, got {len(dop)}")
    H = ray_directions(xyz)
    if not _rank_ok(H):
        raise DegenerateGeometryError("ray directions do not span 3D")
    rng = np.random.default_rng(seed)
    n_iter = cfg.iterations
    best_count, best_cost, best_mask = -1, np.inf, None
    for _ in range(n_iter):
        idx = rng.choice(len(dop), size=cfg.min_samples, replace=False)
        Hs = H[idx]
        if not _rank_ok(Hs):
            continue
        v, *_ = np.linalg.lstsq(Hs, dop[idx], rcond=None)
        res = np.abs(H @ v - dop)
        mask = res <= cfg.inlier_threshold
        count = int(mask.sum())
        cost = float(np.sum(np.minimum(res, cfg.inlier_threshold)))
        if count > best_count or (count == best_count and cost < best_cost):
            best_count, best_cost, best_mask = count, cost, mask
    if best_mask is None or best_count < cfg.min_samples:
        best_mask = np.ones(len(dop), bool)
    mask = best_mask
    v = np.zeros(3)
    for _ in range(5):
        if mask.sum() < cfg.min_samples or not _rank_ok(H[mask]):
            raise DegenerateGeometryError("consensus set is rank deficient")
        v, *_ = np.linalg.lstsq(H[mask], dop[mask], rcond=None)
        new = np.abs(H @ v - dop) <= cfg.inlier_threshold
        if np.array_equal(new, mask):
            break
        mask = new
    final = np.abs(H @ v - dop) <= cfg.inlier_threshold
    return EgoVelocity(v, final, n_iter)


def motion_prior(v_r, f: float, frames: tuple = (0, 1)) -> MotionPrior:
    """Constant-velocity inter-frame motion ``D = v_r / f`` (translation only)."""
    if not f > 0:
        raise ValueError("radar frequency must be positive")
    return MotionPrior(Pose.from_translation(np.asarray(v_r, float) / f), frames)
