"""Cross-modal registration backends and the per-node correction model.

Every backend returns ``T``: the reference (teach LiDAR) pose expressed in the
live sensor frame, so ``T.t`` is where the teach node sits relative to the robot.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, quat_from_euler, so3_exp
from .preprocess import (FovMask, ImageSpec, crop_lidar, geometry_image, image_normals, log_intensity_feature,
                         pixel_coords, radar_pseudo_intensity)
from .world import LidarFrame, RadarFrame, World, frame_rng

TAU_DEFAULT = 0.25
BIAS_CLAMP = 0.5


class NoOverlapError(RuntimeError):
    pass


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    T: Pose
    residual_rms: float
    inlier_count: int
    converged: bool
    T_raw: Pose | None = None
    history: tuple = ()
    change_fraction: float = 0.0
    quality: float | None = None  # backend-specific loss; defaults to the residual

    @property
    def loss(self) -> float:
        """Registration quality used by node selection, ``inf`` on failure."""
        if not self.converged:
            return float("inf")
        return self.residual_rms if self.quality is None else self.quality


@dataclass(frozen=True, eq=False)
class CorrectionModel:
    """Per-teach-node pose bias (applied on the left of the raw estimate) plus intensity weight."""

    biases: dict = field(default_factory=dict)
    w_I: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.w_I <= 1.0:
            raise ValueError("w_I must lie in [0, 1]")
        clamped = {}
        for k, b in self.biases.items():
            n = np.linalg.norm(b.t)
            clamped[int(k)] = b if n <= BIAS_CLAMP else Pose(b.q, b.t * (BIAS_CLAMP / n))
        object.__setattr__(self, "biases", clamped)

    def bias(self, node_id) -> Pose:
        if node_id is None:
            return Pose.identity()
        return self.biases.get(int(node_id), Pose.identity())

    def apply(self, node_id, T: Pose) -> Pose:
        b = self.bias(node_id)
        return b @ T

    def with_biases(self, updates: dict, w_I: float | None = None) -> "CorrectionModel":
        new = dict(self.biases)
        new.update({int(k): v for k, v in updates.items()})
        return CorrectionModel(new, self.w_I if w_I is None else w_I)

    def to_dict(self) -> dict:
        return {"w_I": self.w_I, "biases": {str(k): v.to_list() for k, v in sorted(self.biases.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionModel":
        return cls({int(k): Pose.from_list(v) for k, v in d.get("biases", {}).items()}, d.get("w_I", 0.5))


def planar_pose(x: float, y: float, yaw: float) -> Pose:
    return Pose(quat_from_euler(yaw), [x, y, 0.0])


# ------------------------------------------------------------ oracle

@dataclass(frozen=True)
class OracleConfig:
    noise_sigma_t: float = 0.0
    noise_sigma_yaw: float = 0.0
    min_overlap: float = 0.2
    max_change: float = 0.4
    basin_t: float = 2.0
    basin_yaw: float = np.deg2rad(20.0)
    change_bias: tuple = (0.0, 0.2, 0.0)
    change_bias_min: float = 0.05
    failure_rule: bool = True
    max_range: float = 1e9
    overlap_penalty: float = 0.6  # loss grows as overlap shrinks, so node selection keeps a margin

    def __post_init__(self):
        if self.noise_sigma_t < 0 or self.noise_sigma_yaw < 0:
            raise ValueError("noise sigmas must be non-negative")


class OracleBackend:
    """Ground truth plus noise, with an overlap / scene-change / basin failure rule.

    Scenes whose visible change fraction exceeds ``change_bias_min`` shift the
    estimate by ``change_bias`` (radar frame), emulating a static change that the
    matcher has not been adapted to.
    """

    name = "oracle"
    uses_intensity = False

    def __init__(self, world: World | None, cfg: OracleConfig = OracleConfig(), seed: int = 0):
        self.world = world
        self.cfg = cfg
        self.seed = seed
        self._present: dict = {}

    def _present_at(self, epoch: int) -> np.ndarray:
        if epoch not in self._present:
            self._present[epoch] = self.world.apply_epoch(epoch)
        return self._present[epoch]

    def overlap(self, reference, live) -> float:
        ref_lab = reference.labels[reference.labels >= 0]
        n_lost = getattr(live, "n_lost", 0)
        denom = len(live) + n_lost
        if denom == 0 or len(ref_lab) == 0:
            return 0.0
        seen = np.isin(live.labels, np.unique(ref_lab)) & (live.labels >= 0)
        return float(seen.sum()) / denom

    def change_fraction(self, reference, live) -> float:
        if self.world is None:
            return 0.0
        lab = live.labels[live.labels >= 0]
        if len(lab) == 0:
            return 0.0
        ref_present = self._present_at(reference.epoch)
        live_present = self._present_at(live.epoch)
        added = float(np.mean(~ref_present[lab]))
        rlab = reference.labels[reference.labels >= 0]
        removed = float(np.mean(~live_present[rlab])) if len(rlab) else 0.0
        return max(added, removed)

    def ground_truth(self, reference, live) -> Pose:
        return live.gt_pose.inverse() @ reference.gt_pose

    def register(self, prior: Pose, reference, live, node_id=None, correction: CorrectionModel | None = None,
                 key: int = 0) -> RegistrationResult:
        cfg = self.cfg
        T_gt = self.ground_truth(reference, live)
        ov = self.overlap(reference, live)
        ch = self.change_fraction(reference, live)
        if ov == 0.0 and cfg.failure_rule and len(live) == 0:
            raise NoOverlapError("live frame is empty")
        if cfg.failure_rule:
            d = prior.inverse() @ T_gt
            prior_bad = d.translation_norm() > cfg.basin_t or d.rotation_angle() > cfg.basin_yaw
            far = T_gt.translation_norm() > cfg.max_range
            if ov < cfg.min_overlap or ch > cfg.max_change or prior_bad or far:
                return RegistrationResult(prior, float("inf"), 0, False, prior, (), ch)
        rng = frame_rng(self.seed, 3, key, -1 if node_id is None else node_id)
        e = rng.standard_normal(3)
        noise = planar_pose(e[0] * cfg.noise_sigma_t, e[1] * cfg.noise_sigma_t, e[2] * cfg.noise_sigma_yaw)
        if ch >= cfg.change_bias_min and np.any(np.asarray(cfg.change_bias) != 0):
            noise = noise @ Pose.from_translation(cfg.change_bias)
        T_raw = noise @ T_gt
        T = correction.apply(node_id, T_raw) if correction is not None else T_raw
        n_in = int(round(ov * len(live)))
        rms = float(noise.translation_norm())
        return RegistrationResult(T, rms, n_in, True, T_raw, (), ch, rms + cfg.overlap_penalty * (1.0 - ov))


# ------------------------------------------------------------ ICP

@dataclass(frozen=True)
class IcpConfig:
    window: int = 8
    max_iters: int = 50
    tol: float = 1e-4
    gate: float = 0.6  # m, residual truncation and correspondence distance
    intensity_gate: float = 0.15
    w_I: float | None = None  # None: take the correction model's weight
    min_inliers: int = 25
    min_inlier_frac: float = 0.35
    max_rms: float = 0.2
    mask_deg: float = 135.0
    image: ImageSpec = ImageSpec(14, 360)
    alpha: float = 0.03
    damping: float = 1e-6
    max_live_points: int = 1500
    basin_t: float = 1.0  # corrections larger than the basin are not trusted
    basin_yaw: float = np.deg2rad(15.0)


@nb.njit(cache=True)
def _search(u, v, q, fq, P, V, F, NRM, NOK, win, w_I, gate, igate, wrap):
    H, W = V.shape
    n = q.shape[0]
    out = np.full(n, -1, np.int64)
    for i in range(n):
        best = 1e30
        for dv in range(-win, win + 1):
            vv = v[i] + dv
            if vv < 0 or vv >= H:
                continue
            for du in range(-win, win + 1):
                uu = u[i] + du
                if wrap:
                    uu = uu % W
                elif uu < 0 or uu >= W:
                    continue
                if not V[vv, uu] or not NOK[vv, uu]:
                    continue
                dx = q[i, 0] - P[vv, uu, 0]
                dy = q[i, 1] - P[vv, uu, 1]
                dz = q[i, 2] - P[vv, uu, 2]
                dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                if dist > gate:
                    continue
                df = abs(fq[i] - F[vv, uu])
                if w_I > 0 and df > igate:
                    continue
                cost = (1.0 - w_I) * dist / gate + w_I * df / igate
                if cost < best:
                    best = cost
                    out[i] = vv * W + uu
    return out


class IcpBackend:
    """Projective point-to-plane ICP of live points against a cropped cylindrical image.

    Correspondences are searched in a window around each point's projected pixel,
    scored by ``(1 - w_I)`` geometry plus ``w_I`` intensity, intensity-gated.
    """

    name = "icp"
    uses_intensity = True

    def __init__(self, cfg: IcpConfig = IcpConfig(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self._cache: dict = {}

    def _reference(self, reference, prior: Pose):
        cfg = self.cfg
        if isinstance(reference, LidarFrame):
            ref = crop_lidar(reference, FovMask(0.0, np.deg2rad(cfg.mask_deg / 2), prior))
            feat = log_intensity_feature(ref.intensity) if len(ref) else np.zeros(0)
        else:
            ref = reference
            feat = log_intensity_feature(radar_pseudo_intensity(ref, cfg.alpha)) if len(ref) else np.zeros(0)
        if len(ref) < 3:
            raise NoOverlapError("reference has no points inside the mask")
        geom = geometry_image(ref.xyz, cfg.image)
        fimg = np.zeros(geom.valid.shape)
        fimg[geom.valid] = feat[geom.src[geom.valid]]
        nrm, ok = image_normals(geom)
        return geom, fimg, nrm, ok

    def _live(self, live, key):
        cfg = self.cfg
        if isinstance(live, RadarFrame):
            feat = log_intensity_feature(radar_pseudo_intensity(live, cfg.alpha))
            xyz = live.xyz
        else:
            feat = log_intensity_feature(live.intensity)
            xyz = live.xyz
        if len(xyz) > cfg.max_live_points:
            idx = np.sort(frame_rng(self.seed, 4, key).choice(len(xyz), cfg.max_live_points, replace=False))
            xyz, feat = xyz[idx], feat[idx]
        return np.ascontiguousarray(xyz, float), np.ascontiguousarray(feat, float)

    def _evaluate(self, S: Pose, r, fr, geom, fimg, nrm, ok, w_I):
        cfg = self.cfg
        q = S.apply(r)
        keep = np.linalg.norm(q, axis=1) > 1e-6
        u, v = pixel_coords(np.where(keep[:, None], q, 1.0), cfg.image)
        wrap = cfg.image.az_fov >= 2 * np.pi - 1e-9
        idx = _search(u, v, q, fr, geom.pixels, geom.valid, fimg, nrm, ok, cfg.window, w_I, cfg.gate,
                      cfg.intensity_gate, wrap)
        idx[~keep] = -1
        has = idx >= 0
        W = geom.valid.shape[1]
        vv, uu = idx[has] // W, idx[has] % W
        n = np.zeros((len(q), 3))
        n[has] = nrm[vv, uu]
        e = np.zeros(len(q))
        e[has] = np.sum(n[has] * (q[has] - geom.pixels[vv, uu]), axis=1)
        inl = has & (np.abs(e) < cfg.gate)
        obj = np.where(inl, e**2, cfg.gate**2)
        return float(np.mean(obj)), q, e, inl, n

    def register(self, prior: Pose, reference, live, node_id=None, correction: CorrectionModel | None = None,
                 key: int = 0) -> RegistrationResult:
        cfg = self.cfg
        w_I = cfg.w_I if cfg.w_I is not None else (correction.w_I if correction is not None else 0.5)
        if len(live) == 0:
            raise NoOverlapError("live frame is empty")
        geom, fimg, nrm, ok = self._reference(reference, prior)
        r, fr = self._live(live, key)
        S = prior.inverse()  # live sensor frame -> reference frame
        obj, q, e, inl, n = self._evaluate(S, r, fr, geom, fimg, nrm, ok, w_I)
        history = [obj]
        it = 0
        for it in range(cfg.max_iters):
            if inl.sum() < 6:
                break
            J = np.hstack([n[inl], np.cross(q[inl], n[inl])])
            A = J.T @ J
            b = J.T @ e[inl]
            A += cfg.damping * np.trace(A) * np.eye(6) + 1e-12 * np.eye(6)
            xi = -np.linalg.solve(A, b)
            step = 1.0
            accepted = False
            for _ in range(6):
                dS = Pose.from_rt(so3_exp(step * xi[3:]), step * xi[:3])
                S_try = dS @ S
                obj_t, q_t, e_t, inl_t, n_t = self._evaluate(S_try, r, fr, geom, fimg, nrm, ok, w_I)
                if obj_t < obj:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            S, obj, q, e, inl, n = S_try, obj_t, q_t, e_t, inl_t, n_t
            history.append(obj)
            if np.linalg.norm(step * xi) < cfg.tol:
                break
        n_in = int(inl.sum())
        rms_in = float(np.sqrt(np.mean(e[inl] ** 2))) if n_in else float("inf")
        T_raw = S.inverse()
        moved = prior.inverse() @ T_raw
        in_basin = moved.translation_norm() <= cfg.basin_t and moved.rotation_angle() <= cfg.basin_yaw
        converged = (n_in >= cfg.min_inliers and n_in >= cfg.min_inlier_frac * len(r) and rms_in <= cfg.max_rms
                     and in_basin)
        T = correction.apply(node_id, T_raw) if correction is not None else T_raw
        return RegistrationResult(T, float(np.sqrt(obj)), n_in, bool(converged), T_raw, tuple(history))


def make_backend(name: str, world: World | None = None, oracle: OracleConfig = OracleConfig(),
                 icp: IcpConfig = IcpConfig(), seed: int = 0):
    if name == "oracle":
        return OracleBackend(world, oracle, seed)
    if name == "icp":
        return IcpBackend(icp, seed)
    raise ValueError(f"unknown backend {name!r}")


def initial_node_search(live, graph, backend, correction: CorrectionModel | None = None,
                        use_radar_reference: bool = False, key: int = 0) -> tuple[int, RegistrationResult]:
    """Register against every node with an identity prior; keep the smallest converged translation."""
    if len(graph.nodes) == 0:
        raise InitializationError("empty teach graph")
    best, best_res = None, None
    for node in graph.nodes:
        ref = node.radar if use_radar_reference else node.lidar
        try:
            res = backend.register(Pose.identity(), ref, live, node.id, correction, key=key)
        except NoOverlapError:
            continue
        if not res.converged:
            continue
        if best_res is None or res.T.translation_norm() < best_res.T.translation_norm():
            best, best_res = node.id, res
    if best is None:
        raise InitializationError("no teach node registered against the live frame")
    return best, best_res
