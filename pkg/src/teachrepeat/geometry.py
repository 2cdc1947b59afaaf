"""Rigid-body math: SE(3) poses, SO(3) log, cubic Hermite segments, discrete curvature.

Quaternions are stored scalar-first ``(w, x, y, z)``.  A :class:`Pose` acts on
points as ``p -> R p + t``; ``a @ b`` is the homogeneous-matrix product ``A B``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Raised when geometric input is degenerate (coincident points, origin points)."""


class AlignmentError(ValueError):
    """Raised when two sampled trajectories do not share timestamps."""


# ---------------------------------------------------------------- quaternions

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise DegenerateInputError("zero quaternion")
    q = q / n
    # canonical hemisphere keeps serialization stable
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method: branch on the largest of trace and diagonal."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    d = np.diag(R)
    k = int(np.argmax([tr, d[0], d[1], d[2]]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def quat_from_euler(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Intrinsic Z-Y-X (yaw, then pitch, then roll)."""
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qx = quat_from_axis_angle([1, 0, 0], roll)
    return quat_normalize(quat_mul(quat_mul(qz, qy), qx))


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(q0 + s * (q1 - q0))
    theta = np.arccos(min(dot, 1.0))
    sin_t = np.sin(theta)
    return quat_normalize((np.sin((1 - s) * theta) * q0 + np.sin(s * theta) * q1) / sin_t)


# ---------------------------------------------------------------- SO(3)

def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``; near pi the axis comes from the largest diagonal entry."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * skew
    if np.pi - theta < 1e-4:
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        # recover sign from the (tiny) skew part when available
        if np.dot(axis, skew) < 0.0:
            axis = -axis
        # refine the angle with atan2 for accuracy right at pi
        theta = np.arctan2(0.5 * np.linalg.norm(skew), cos_t)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * skew


def rot_error(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle ``||log(Ra^T Rb)^v||`` in radians, in ``[0, pi]``."""
    return float(np.linalg.norm(so3_log(np.asarray(Ra).T @ np.asarray(Rb))))


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------- poses

@dataclass(frozen=True, eq=False)
class Pose:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_xyz_euler(cls, xyz, yaw=0.0, pitch=0.0, roll=0.0) -> "Pose":
        return cls(quat_from_euler(yaw, pitch, roll), xyz)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(qi, -quat_to_matrix(qi) @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    @property
    def yaw(self) -> float:
        R = self.R
        return float(np.arctan2(R[1, 0], R[0, 0]))

    @property
    def direction(self) -> np.ndarray:
        """Body x-axis in the parent frame."""
        return self.R[:, 0].copy()

    def translation_norm(self) -> float:
        return float(np.linalg.norm(self.t))

    def rotation_angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0])))

    def weighted_norm(self, w_rot: float = 1.0) -> float:
        """Translation norm plus ``w_rot`` times rotation angle (m + m/rad * rad)."""
        return self.translation_norm() + w_rot * self.rotation_angle()

    def to_list(self) -> list[float]:
        return [float(v) for v in (*self.q, *self.t)]

    @classmethod
    def from_list(cls, vals) -> "Pose":
        vals = list(vals)
        return cls(np.array(vals[:4]), np.array(vals[4:7]))

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        d = self.inverse() @ other
        return d.rotation_angle() <= tol and d.translation_norm() <= tol

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(p: Pose) -> Pose:
    return p.inverse()


@dataclass(frozen=True)
class TimedPose:
    t: float
    pose: Pose


# ---------------------------------------------------------------- trajectories

@dataclass(eq=False)
class Trajectory:
    """Time-stamped poses stored column-wise: ``t (N,)``, ``xyz (N,3)``, ``quat (N,4)``."""

    t: np.ndarray
    xyz: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.quat = np.asarray(self.quat, dtype=float).reshape(-1, 4)
        if not (len(self.t) == len(self.xyz) == len(self.quat)):
            raise ValueError("trajectory arrays differ in length")

    def __len__(self) -> int:
        return len(self.t)

    def pose(self, i: int) -> Pose:
        return Pose(self.quat[i], self.xyz[i])

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    @classmethod
    def from_poses(cls, times, poses) -> "Trajectory":
        poses = list(poses)
        return cls(np.asarray(times, float), np.array([p.t for p in poses]).reshape(-1, 3),
                   np.array([p.q for p in poses]).reshape(-1, 4))

    def yaw(self) -> np.ndarray:
        w, x, y, z = self.quat.T
        return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))

    def subset(self, idx) -> "Trajectory":
        if not isinstance(idx, slice):
            idx = np.asarray(idx)
        return Trajectory(self.t[idx], self.xyz[idx], self.quat[idx])

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.xyz, axis=0), axis=1)))

    def check_increasing(self) -> None:
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")


# ---------------------------------------------------------------- Hermite

class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HermiteSegment:
    t0: float
    t1: float
    P0: np.ndarray
    P1: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    v: float

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise DomainError("t1 must exceed t0")
        for name in ("P0", "P1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        for name in ("d0", "d1"):
            d = np.asarray(getattr(self, name), float)
            object.__setattr__(self, name, d / np.linalg.norm(d))


def _hermite_basis(s):
    s2 = s * s
    s3 = s2 * s
    return 2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, -2 * s3 + 3 * s2, s3 - s2


def hermite_eval(seg: HermiteSegment, t) -> np.ndarray:
    """Position on the cubic with endpoint values ``P0, P1`` and velocities ``v d0, v d1``.

    Accepts a scalar or an array of times; returns ``(3,)`` or ``(N, 3)``.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < seg.t0) or np.any(t_arr > seg.t1):
        raise DomainError(f"t outside [{seg.t0}, {seg.t1}]")
    h = seg.t1 - seg.t0
    s = ((t_arr - seg.t0) / h)[:, None]
    h00, h10, h01, h11 = _hermite_basis(s)
    m0 = seg.v * h * seg.d0
    m1 = seg.v * h * seg.d1
    out = h00 * seg.P0 + h10 * m0 + h01 * seg.P1 + h11 * m1
    # pin the endpoints exactly
    out[t_arr == seg.t0] = seg.P0
    out[t_arr == seg.t1] = seg.P1
    return out[0] if np.ndim(t) == 0 else out


# ---------------------------------------------------------------- curvature & errors

def curvature3(p_prev, p, p_next) -> float:
    """Three-point curvature ``|a x b| / (|a| |b| |c|)`` (half the Menger curvature)."""
    p_prev, p, p_next = (np.asarray(x, float) for x in (p_prev, p, p_next))
    a = p - p_prev
    b = p_next - p
    c = p_next - p_prev
    na, nb, nc = np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)
    if min(na, nb, nc) < 1e-9:
        raise DegenerateInputError("coincident points")
    return float(np.linalg.norm(np.cross(a, b)) / (na * nb * nc))


def curvature_series(xyz: np.ndarray) -> np.ndarray:
    """Vectorised curvature at interior samples; endpoints and degenerate triples get 0."""
    xyz = np.asarray(xyz, float)
    out = np.zeros(len(xyz))
    if len(xyz) < 3:
        return out
    a = xyz[1:-1] - xyz[:-2]
    b = xyz[2:] - xyz[1:-1]
    c = xyz[2:] - xyz[:-2]
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) * np.linalg.norm(c, axis=1)
    num = np.linalg.norm(np.cross(a, b), axis=1)
    ok = (np.linalg.norm(a, axis=1) >= 1e-9) & (np.linalg.norm(b, axis=1) >= 1e-9) & (
        np.linalg.norm(c, axis=1) >= 1e-9)
    out[1:-1][ok] = num[ok] / den[ok]
    return out


def rot_error_quat(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Vectorised geodesic angle between quaternion arrays ``(N,4)``."""
    qa = np.atleast_2d(qa)
    qb = np.atleast_2d(qb)
    dot = np.abs(np.sum(qa * qb, axis=1))
    # |q_a^* q_b| vector part, via the identity |v|^2 = 1 - w^2
    vec = np.sqrt(np.clip(1.0 - np.minimum(dot, 1.0) ** 2, 0.0, None))
    return 2.0 * np.arctan2(vec, dot)


def pointwise_error(interp: Trajectory, teach: Trajectory, w_pos: float, w_rot: float) -> np.ndarray:
    if len(interp) != len(teach) or not np.array_equal(interp.t, teach.t):
        raise AlignmentError("trajectories are not sampled at common timestamps")
    e_pos = np.linalg.norm(interp.xyz - teach.xyz, axis=1)
    e_rot = rot_error_quat(interp.quat, teach.quat)
    return w_pos * e_pos + w_rot * e_rot


def segment_error(interp: Trajectory, teach: Trajectory, w_pos: float = 1.0, w_rot: float = 1.15) -> float:
    """Sum over common samples of ``w_pos * e_pos + w_rot * e_rot``."""
    return float(np.sum(pointwise_error(interp, teach, w_pos, w_rot)))
