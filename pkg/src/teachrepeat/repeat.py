"""Repeat phase: node switching, Doppler-propagated priors, registration and pure-pursuit tracking.

Pose convention: ``T`` returned by registration is the pose of the target teach
node's LiDAR frame expressed in the live radar frame, so ``T.t`` is the node
position as seen from the robot.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .doppler import (DegenerateGeometryError, InsufficientDataError, MotionPrior, RansacConfig, ego_velocity,
                      motion_prior)
from .geometry import HermiteSegment, Pose, Trajectory, hermite_eval, quat_from_euler, wrap_angle
from .registration import CorrectionModel, NoOverlapError, initial_node_search
from .teach import TeachGraph
from .world import (DESK_LIDAR_SPEC, DESK_RADAR_SPEC, RadarFrame, RenderConfig, SensorSpec, World, load_radar_csv,
                    save_radar_csv)

log = logging.getLogger(__name__)

VARIANTS = ("cross_modal", "lidar", "radar_only")
LOG_HEADER = ["frame", "t", "x", "y", "z", "qw", "qx", "qy", "qz", "target_node", "switch", "converged",
              "residual_rms"]


class NavigationFailure(RuntimeError):
    """Mid-run failure with the last target node, frame index and cause."""

    def __init__(self, cause: str, node: int, frame: int):
        super().__init__(f"{cause} (target node {node}, frame {frame})")
        self.cause = cause
        self.node = node
        self.frame = frame


@dataclass(frozen=True)
class RepeatParams:
    delta: float = 0.12  # node switching threshold (m)
    v_i: float = 1.2  # commanded forward speed (m/s)
    rate: float = 14.0  # radar frame rate (Hz)
    omega_max: float = 1.5  # rad/s
    v_max: float = 2.0
    max_failures: int = 10  # consecutive non-converged frames before aborting
    abort_radius: float = 2.0  # m, lateral deviation from the teach path
    kp: float = 0.0  # optional PD terms on the bearing angle
    kd: float = 0.0
    variant: str = "cross_modal"
    epoch: int = 0
    max_time_factor: float = 2.0  # timeout relative to the teach duration at v_i
    lookahead: float = 1.0  # steering point distance along the interpolated teach path (0: steer at the node)
    ransac: RansacConfig = RansacConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.delta <= 0 or self.rate <= 0:
            raise ValueError("delta and rate must be positive")
        if abs(self.v_i) > self.v_max:
            raise ValueError("v_i exceeds v_max")


@dataclass(eq=False)
class RobotState:
    pose: Pose
    v: float = 0.0
    omega: float = 0.0


@dataclass(eq=False)
class RepeatNode:
    id: int
    t: float
    radar: RadarFrame | None
    target: int
    T: Pose
    frame: int
    radar_path: str | None = None
    T_raw: Pose | None = None  # registration before the learned correction


@dataclass(eq=False)
class RepeatGraph:
    nodes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def estimated_poses(self, teach: TeachGraph) -> list[Pose]:
        """Robot poses in the teach odometry frame: node pose composed with the inverse registration."""
        return [teach.node(n.target).pose @ n.T.inverse() for n in self.nodes]

    def to_dict(self, frame_dir: str = "frames") -> dict:
        nodes = [{"id": n.id, "t": float(n.t), "frame": n.frame, "target": n.target, "T": n.T.to_list(),
                  "T_raw": (n.T_raw or n.T).to_list(),
                  "radar": n.radar_path or f"{frame_dir}/radar_{n.id:05d}.csv"} for n in self.nodes]
        edges = []
        for a, b in zip(self.nodes[:-1], self.nodes[1:]):
            edges.append({"from": a.id, "to": b.id})
        return {"nodes": nodes, "edges": edges, "meta": self.meta}

    def save(self, out_dir, frames: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        if frames:
            (out / "frames").mkdir(exist_ok=True)
            for n, nd in zip(self.nodes, d["nodes"]):
                if n.radar is not None:
                    save_radar_csv(n.radar, out / nd["radar"])
        path = out / "repeat_graph.json"
        path.write_text(json.dumps(d, indent=1))
        return path

    @classmethod
    def load(cls, path, load_frames: bool = False) -> "RepeatGraph":
        path = Path(path)
        if path.is_dir():
            path = path / "repeat_graph.json"
        d = json.loads(path.read_text())
        base = path.parent

        def radar(n):
            f = base / n["radar"]
            return load_radar_csv(f) if load_frames and f.exists() else None

        nodes = [RepeatNode(n["id"], n["t"], radar(n), n["target"], Pose.from_list(n["T"]), n["frame"], n["radar"],
                            Pose.from_list(n.get("T_raw", n["T"])))
                 for n in d["nodes"]]
        return cls(nodes, d.get("meta", {}))


# ------------------------------------------------------------ elementary operations

def should_switch(T_latest: Pose, delta: float = 0.12) -> bool:
    """Switch to the next node when the target is closer than ``delta`` (translation norm)."""
    return T_latest.translation_norm() < delta


def _as_pose(D) -> Pose:
    return D.D if isinstance(D, MotionPrior) else D


def coarse_prior_on_switch(T_edge: Pose, T_prev: Pose, D) -> Pose:
    """``T_edge o T_prev o D^-1``."""
    return T_edge @ T_prev @ _as_pose(D).inverse()


def coarse_prior_no_switch(T_prev: Pose, D) -> Pose:
    """``T_prev o D^-1``."""
    return T_prev @ _as_pose(D).inverse()


def pursuit_command(T: Pose, v_i: float = 1.2, omega_max: float = math.inf) -> tuple[float, float]:
    """Arc through the target point: ``omega = 2 v sin(theta) / |t|`` with the yaw-only bearing ``theta``."""
    t = T.t
    dist = float(np.linalg.norm(t[:2]))
    if dist < 1e-6:
        return 0.0, 0.0
    theta = math.atan2(t[1], t[0])
    if abs(theta) < 1e-6:
        return float(v_i), 0.0
    omega = 2.0 * v_i * math.sin(theta) / dist
    return float(v_i), float(np.clip(omega, -omega_max, omega_max))


def integrate_unicycle(pose: Pose, v: float, omega: float, dt: float, world: World | None = None,
                       height: float = 1.0) -> Pose:
    """Exact arc step in the plane; z follows the terrain when a world is given."""
    x, y, _ = pose.t
    yaw = pose.yaw
    if abs(omega) < 1e-12:
        x2 = x + v * dt * math.cos(yaw)
        y2 = y + v * dt * math.sin(yaw)
    else:
        r = v / omega
        x2 = x + r * (math.sin(yaw + omega * dt) - math.sin(yaw))
        y2 = y - r * (math.cos(yaw + omega * dt) - math.cos(yaw))
    yaw2 = float(wrap_angle(yaw + omega * dt))
    z2 = float(world.ground_height(x2)) + height if world is not None else pose.t[2]
    return Pose(quat_from_euler(yaw2), [x2, y2, z2])


def body_velocity(pose: Pose, v: float, world: World | None) -> np.ndarray:
    """Sensor-frame velocity of a level robot driving at ``v`` along its heading over the terrain."""
    yaw = pose.yaw
    vw = np.array([v * math.cos(yaw), v * math.sin(yaw), 0.0])
    if world is not None:
        vw[2] = v * math.cos(yaw) * world.ground_slope(pose.t[0])
    return pose.R.T @ vw


# ------------------------------------------------------------ closed loop

@dataclass(eq=False)
class RepeatResult:
    graph: RepeatGraph
    log: list
    trajectory: Trajectory
    success: bool
    cause: str | None
    last_node: int
    frame: int
    distance: float
    switches: list

    def log_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for row in self.log:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _passed(T: Pose, delta: float) -> bool:
    # the node is reached, or already behind the robot
    return should_switch(T, delta) or T.t[0] < 0


def _advance(graph: TeachGraph, T: Pose, target: int, delta: float) -> tuple[Pose, int]:
    """Walk the edges past every node that is already reached; returns the new target pose and id."""
    last = len(graph.nodes) - 1
    while target < last and _passed(T, delta):
        T = T @ graph.edge_to(target + 1).T
        target += 1
    return T, target


def path_ahead(graph: TeachGraph, T: Pose, target: int, v_i: float, reach: float,
               spacing: float = 0.05) -> np.ndarray:
    """Hermite interpolant of the teach graph in the robot frame, from the previous node onward.

    ``T`` is the pose of node ``target`` in the robot frame; nodes are appended
    until one lies farther than ``reach`` from the robot.
    """
    last = len(graph.nodes) - 1
    ids, chain = [target], [T]
    if target > 0:
        ids.insert(0, target - 1)
        chain.insert(0, T @ graph.edge_to(target).T.inverse())
    j, cur = target, T
    while j < last and cur.translation_norm() < reach:
        j += 1
        cur = cur @ graph.edge_to(j).T
        ids.append(j)
        chain.append(cur)
    if len(chain) == 1:
        return chain[0].t[None, :].copy()
    pts = [chain[0].t[None, :]]
    for (ia, Pa), (ib, Pb) in zip(zip(ids[:-1], chain[:-1]), zip(ids[1:], chain[1:])):
        seg = HermiteSegment(graph.node(ia).t, graph.node(ib).t, Pa.t, Pb.t, Pa.direction, Pb.direction, v_i)
        n = max(2, int(math.ceil(np.linalg.norm(Pb.t - Pa.t) / spacing)))
        ts = np.linspace(seg.t0, seg.t1, n + 1)[1:]
        pts.append(hermite_eval(seg, ts))
    return np.vstack(pts)


def lookahead_point(path: np.ndarray, lookahead: float) -> np.ndarray:
    """First point of the polyline, past its closest approach to the robot, at distance ``lookahead``."""
    xy = path[:, :2]
    r = np.linalg.norm(xy, axis=1)
    c = int(np.argmin(r))
    for i in range(c + 1, len(path)):
        if r[i] >= lookahead:
            a, b = xy[i - 1], xy[i]
            if r[i - 1] >= lookahead:
                return path[i]
            # |a + u (b - a)| = lookahead on the segment
            d = b - a
            A, B, C = d @ d, 2 * a @ d, a @ a - lookahead ** 2
            u = (-B + math.sqrt(max(B * B - 4 * A * C, 0.0))) / (2 * A)
            return path[i - 1] + u * (path[i] - path[i - 1])
    return path[-1]


def _steer_target(graph: TeachGraph, T: Pose, target: int, p: "RepeatParams") -> Pose:
    """Steering point on the interpolated teach path, ``lookahead`` metres ahead."""
    T, target = _advance(graph, T, target, p.delta)
    if p.lookahead <= 0:
        return T
    path = path_ahead(graph, T, target, p.v_i, p.lookahead)
    return Pose.from_translation(lookahead_point(path, p.lookahead))


def _reference(node, variant: str):
    return node.radar if variant == "radar_only" else node.lidar


def run_repeat(graph: TeachGraph, world: World, start: Pose, backend, params: RepeatParams = RepeatParams(),
               seed: int = 0, correction: CorrectionModel | None = None,
               radar_spec: SensorSpec = DESK_RADAR_SPEC, lidar_spec: SensorSpec = DESK_LIDAR_SPEC,
               render: RenderConfig = RenderConfig(), keep_frames: bool = False,
               raise_on_failure: bool = False) -> RepeatResult:
    """Drive the robot from ``start`` along the teach graph until the final node is reached.

    Raises ``InitializationError`` when no node registers at the start pose.
    Mid-run failures are reported in the result (or raised as
    ``NavigationFailure`` when ``raise_on_failure``).
    """
    p = params
    dt = 1.0 / p.rate
    variant = p.variant
    truth = graph.truth if graph.truth is not None else graph.odometry
    tree = cKDTree(truth.xyz[:, :2])
    height = float(start.t[2] - world.ground_height(start.t[0]))
    horizon = int(math.ceil(p.max_time_factor * truth.path_length() / p.v_i * p.rate)) + int(5 * p.rate)

    def live_frame(pose: Pose, v: float, k: int, t: float):
        radar = world.render_radar(pose, body_velocity(pose, v, world), radar_spec, p.epoch, seed, t, render,
                                   key=k)
        if variant == "lidar":
            return radar, world.render_lidar(pose, lidar_spec, p.epoch, seed, t, render, key=k)
        return radar, radar

    state = RobotState(start, 0.0, 0.0)
    radar, live = live_frame(state.pose, 0.0, 0, 0.0)
    target, res = initial_node_search(live, graph, backend, correction, variant == "radar_only", key=0)
    T_prev = res.T
    rgraph = RepeatGraph(meta={"variant": variant, "seed": seed, "backend": getattr(backend, "name", "?")})
    rgraph.nodes.append(RepeatNode(0, 0.0, radar if keep_frames else None, target, T_prev, 0,
                                   T_raw=res.T_raw))
    rows = [[0, 0.0, *state.pose.t.tolist(), *state.pose.q.tolist(), target, 0, 1, float(res.residual_rms)]]
    poses = [state.pose]
    times = [0.0]
    switches = []
    fails = 0
    distance = 0.0
    theta_prev = 0.0
    last = len(graph.nodes) - 1
    success, cause = False, None
    state.v, state.omega = pursuit_command(_steer_target(graph, T_prev, target, p), p.v_i,
                                           p.omega_max)
    k = 0
    while True:
        # a node just reached at the end of the route finishes the run
        if target == last and _passed(T_prev, p.delta):
            success = True
            break
        if k >= horizon:
            cause = "timeout"
            break
        k += 1
        t = k * dt
        new_pose = integrate_unicycle(state.pose, state.v, state.omega, dt, world, height)
        distance += float(np.linalg.norm(new_pose.t - state.pose.t))
        state.pose = new_pose
        poses.append(state.pose)
        times.append(t)
        radar, live = live_frame(state.pose, state.v, k, t)

        # inter-frame motion prior, sensor frame
        if variant == "lidar":
            D_s = Pose.from_translation([state.v * dt, 0.0, 0.0])
        else:
            try:
                ev = ego_velocity(radar.xyz, radar.doppler, p.ransac, seed=k)
                D_s = motion_prior(ev.v, p.rate).D
            except (DegenerateGeometryError, InsufficientDataError):
                D_s = Pose.from_translation([state.v * dt, 0.0, 0.0])
        # the same translation re-expressed in the target node frame
        D_node = MotionPrior(Pose.from_translation(T_prev.R.T @ D_s.t))

        T_base, new_target = _advance(graph, T_prev, target, p.delta)
        switched = new_target - target
        target = new_target
        if switched:
            # the stored edge, re-expressed in the current radar frame
            E_all = T_prev.inverse() @ T_base
            U0 = coarse_prior_no_switch(T_prev, D_node)
            prior = coarse_prior_on_switch(U0 @ E_all @ U0.inverse(), T_prev, D_node)
            switches.append((k, target))
        else:
            prior = coarse_prior_no_switch(T_prev, D_node)

        node = graph.node(target)
        try:
            res = backend.register(prior, _reference(node, variant), live, target, correction, key=k)
            converged = bool(res.converged)
        except NoOverlapError:
            res, converged = None, False
        if converged:
            T_prev = res.T
            fails = 0
            rgraph.nodes.append(RepeatNode(len(rgraph.nodes), t, radar if keep_frames else None, target, T_prev, k,
                                           T_raw=res.T_raw))
        else:
            T_prev = prior
            fails += 1
        rms = float(res.residual_rms) if res is not None else float("inf")
        rows.append([k, t, *state.pose.t.tolist(), *state.pose.q.tolist(), target, switched, int(converged), rms])

        if fails >= p.max_failures:
            cause = f"registration failed for {fails} consecutive frames"
            break
        dev, _ = tree.query(state.pose.t[:2])
        if dev > p.abort_radius:
            cause = f"lateral deviation {dev:.2f} m exceeds abort radius"
            break

        # steer toward the node that will be targeted next frame
        T_cmd = _steer_target(graph, T_prev, target, p)
        v, omega = pursuit_command(T_cmd, p.v_i, p.omega_max)
        if p.kp or p.kd:
            theta = math.atan2(T_cmd.t[1], T_cmd.t[0])
            omega = float(np.clip(omega + p.kp * theta + p.kd * (theta - theta_prev) / dt, -p.omega_max,
                                  p.omega_max))
            theta_prev = theta
        state.v, state.omega = v, omega

    rgraph.meta.update({"success": success, "cause": cause, "frames": k, "last_node": target})
    result = RepeatResult(rgraph, rows, Trajectory.from_poses(times, poses), success, cause, target, k, distance,
                          switches)
    if not success:
        log.warning("repeat failed: %s (node %d, frame %d)", cause, target, k)
        if raise_on_failure:
            raise NavigationFailure(cause, target, k)
    return result
