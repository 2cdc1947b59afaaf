"""Teach phase: synchronized sensor streams, two-stage node selection and the teach graph."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (HermiteSegment, Pose, Trajectory, curvature_series, hermite_eval, pointwise_error, slerp)
from .registration import NoOverlapError, RegistrationResult
from .world import (DESK_LIDAR_SPEC, DESK_RADAR_SPEC, LidarFrame, RadarFrame, RenderConfig, SensorSpec, World,
                    frame_rng, load_lidar_csv, load_radar_csv, save_lidar_csv, save_radar_csv)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeachParams:
    v_i: float = 1.2
    w_pos: float = 1.0
    w_rot: float = 1.15
    tau: float = 0.25
    eps: float = 0.16
    eps_seg: float = 0.04
    rate: float = 10.0
    drift_sigma_t: float = 0.0  # per-step odometry drift (m)
    drift_sigma_yaw: float = 0.0


class TeachStream:
    """Lazily rendered, synchronized LiDAR and radar frames along the teach trajectory.

    Rendering is keyed by frame index, so a frame re-rendered after eviction is
    bit-identical to the first copy.
    """

    def __init__(self, world: World, truth: Trajectory, odometry: Trajectory | None = None, seed: int = 0,
                 lidar_spec: SensorSpec = DESK_LIDAR_SPEC, radar_spec: SensorSpec = DESK_RADAR_SPEC,
                 render: RenderConfig = RenderConfig(), epoch: int = 0, speed: float = 1.2, cache: int = 64):
        self.world = world
        self.truth = truth
        self.odometry = odometry if odometry is not None else truth
        self.seed = seed
        self.lidar_spec = lidar_spec
        self.radar_spec = radar_spec
        self.render = render
        self.epoch = epoch
        self.speed = speed
        self._cache: dict = {}
        self._cache_size = cache

    def __len__(self) -> int:
        return len(self.truth)

    def _get(self, kind, i, make):
        k = (kind, i)
        if k not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[k] = make()
        return self._cache[k]

    def lidar(self, i: int) -> LidarFrame:
        return self._get("l", i, lambda: self.world.render_lidar(
            self.truth.pose(i), self.lidar_spec, self.epoch, self.seed, float(self.truth.t[i]), self.render, key=i))

    def radar(self, i: int) -> RadarFrame:
        return self._get("r", i, lambda: self.world.render_radar(
            self.truth.pose(i), [self.speed, 0.0, 0.0], self.radar_spec, self.epoch, self.seed,
            float(self.truth.t[i]), self.render, key=i))


def drifted_odometry(truth: Trajectory, sigma_t: float, sigma_yaw: float, seed: int) -> Trajectory:
    """Chain per-step relative motions with Gaussian perturbations."""
    if sigma_t == 0 and sigma_yaw == 0:
        return truth
    from .registration import planar_pose
    rng = frame_rng(seed, 5)
    poses = [truth.pose(0)]
    for i in range(1, len(truth)):
        rel = truth.pose(i - 1).inverse() @ truth.pose(i)
        e = rng.standard_normal(3)
        poses.append(poses[-1] @ rel @ planar_pose(e[0] * sigma_t, e[1] * sigma_t, e[2] * sigma_yaw))
    return Trajectory.from_poses(truth.t, poses)


# ------------------------------------------------------------ stage 1

def select_nodes_stage1(n_frames: int, register_fn, tau: float = 0.25) -> tuple[list[int], list[str]]:
    """Forward walk: extend from the reference radar frame until LiDAR registration loss exceeds ``tau``.

    ``register_fn(ref, j)`` registers LiDAR frame ``j`` against radar frame ``ref``
    and returns a result with a ``loss``.  On the first failure the last passing
    frame becomes a node and the new reference.  If the frame right after the
    reference already fails, frames are added one by one until registration
    recovers.
    """
    if n_frames < 1:
        raise ValueError("empty stream")
    warnings: list[str] = []
    nodes = [0]
    ref, last_pass, j = 0, 0, 1
    while j < n_frames:
        ok = register_fn(ref, j).loss <= tau
        if ok:
            last_pass = j
            j += 1
            continue
        if last_pass == ref:
            warnings.append(f"registration failed right after reference {ref}; adding frame {j} as a node")
            nodes.append(j)
            ref = last_pass = j
            j += 1
        else:
            nodes.append(last_pass)
            ref = last_pass
            j = last_pass + 1
    if nodes[-1] != n_frames - 1:
        nodes.append(n_frames - 1)
    for w in warnings:
        log.warning(w)
    return nodes, warnings


# ------------------------------------------------------------ stage 2

def interpolate_segment(odom: Trajectory, a: int, b: int, v: float) -> Trajectory:
    """Hermite positions and slerp orientations at the odometry samples ``a..b``."""
    pa, pb = odom.pose(a), odom.pose(b)
    seg = HermiteSegment(odom.t[a], odom.t[b], pa.t, pb.t, pa.direction, pb.direction, v)
    ts = odom.t[a:b + 1]
    xyz = hermite_eval(seg, ts)
    s = (ts - ts[0]) / (ts[-1] - ts[0])
    quat = np.array([slerp(pa.q, pb.q, si) for si in s])
    return Trajectory(ts, xyz, quat)


def segment_errors(odom: Trajectory, a: int, b: int, v: float, w_pos: float, w_rot: float) -> np.ndarray:
    interp = interpolate_segment(odom, a, b, v)
    return pointwise_error(interp, odom.subset(slice(a, b + 1)), w_pos, w_rot)


@dataclass
class Stage2Result:
    nodes: list
    history: list
    warnings: list = field(default_factory=list)

    @property
    def global_error(self) -> float:
        return self.history[-1]


def refine_nodes_stage2(nodes, odom: Trajectory, v: float = 1.2, w_pos: float = 1.0, w_rot: float = 1.15,
                        eps: float = 0.16, eps_seg: float = 0.04) -> Stage2Result:
    """Insert maximum-curvature odometry samples into poorly fitted segments.

    The global error is the sum of per-sample errors over every segment; sample
    errors are counted once (segment end points interpolate exactly).
    """
    nodes = sorted(set(int(n) for n in nodes))
    if len(nodes) < 2:
        raise ValueError("stage 2 needs at least two nodes")
    if np.any(np.diff(odom.t) <= 0):
        raise ValueError("odometry timestamps must be strictly increasing")
    curv = curvature_series(odom.xyz)
    errs = {}

    def seg_err(a, b):
        if (a, b) not in errs:
            errs[(a, b)] = float(np.sum(segment_errors(odom, a, b, v, w_pos, w_rot)[1:-1])) if b - a > 1 else 0.0
        return errs[(a, b)]

    warnings = []
    E = sum(seg_err(a, b) for a, b in zip(nodes[:-1], nodes[1:]))
    history = [E]
    while E > eps:
        segs = list(zip(nodes[:-1], nodes[1:]))
        bad = [(a, b) for a, b in segs if b - a > 1 and seg_err(a, b) > eps_seg]
        if not bad:
            splittable = [(a, b) for a, b in segs if b - a > 1]
            if not splittable:
                break
            worst = max(splittable, key=lambda s: seg_err(*s))
            if not any(w.startswith("no segment") for w in warnings):
                warnings.append("no segment above eps_seg while global error exceeds eps; splitting the worst one")
            bad = [worst]
        new = []
        for a, b in bad:
            inner = curv[a + 1:b]
            new.append(a + 1 + int(np.argmax(inner)))  # argmax keeps the earliest tie
        nodes = sorted(set(nodes) | set(new))
        E_new = sum(seg_err(a, b) for a, b in zip(nodes[:-1], nodes[1:]))
        history.append(E_new)
        if not E_new < E:
            warnings.append(f"global error did not decrease ({E:.6g} -> {E_new:.6g}); stopping")
            E = E_new
            break
        E = E_new
    for w in warnings:
        log.warning(w)
    return Stage2Result(nodes, history, warnings)


# ------------------------------------------------------------ graph

@dataclass(eq=False)
class TeachNode:
    id: int
    t: float
    pose: Pose
    frame_index: int
    lidar: LidarFrame | None = None
    radar: RadarFrame | None = None
    gt_pose: Pose | None = None
    lidar_path: str | None = None
    radar_path: str | None = None


@dataclass(frozen=True, eq=False)
class TeachEdge:
    src: int
    dst: int
    T: Pose


@dataclass(eq=False)
class TeachGraph:
    nodes: list
    edges: list
    odometry: Trajectory
    truth: Trajectory | None = None
    meta: dict = field(default_factory=dict)

    def node(self, i: int) -> TeachNode:
        return self.nodes[i]

    def edge_to(self, i: int) -> TeachEdge:
        return self.edges[i - 1]

    def node_poses(self) -> list[Pose]:
        return [n.pose for n in self.nodes]

    def node_indices(self) -> list[int]:
        return [n.frame_index for n in self.nodes]

    def storage_bytes(self) -> int:
        """Approximate size of the node frames in the CSV format (bytes per value times values)."""
        total = 0
        for n in self.nodes:
            if n.lidar is not None:
                total += len(n.lidar) * 5 * 24
        return total

    # ---- I/O
    def to_dict(self, frame_dir: str = "frames") -> dict:
        return {
            "nodes": [{"id": n.id, "t": float(n.t), "pose": n.pose.to_list(), "frame_index": n.frame_index,
                       "lidar": n.lidar_path or f"{frame_dir}/lidar_{n.id:05d}.csv",
                       "radar": n.radar_path or f"{frame_dir}/radar_{n.id:05d}.csv",
                       "gt_pose": None if n.gt_pose is None else n.gt_pose.to_list()} for n in self.nodes],
            "edges": [{"from": e.src, "to": e.dst, "T": e.T.to_list()} for e in self.edges],
            "odometry": {"t": self.odometry.t.tolist(), "xyz": self.odometry.xyz.tolist(),
                         "quat": self.odometry.quat.tolist()},
            "truth": None if self.truth is None else {"t": self.truth.t.tolist(), "xyz": self.truth.xyz.tolist(),
                                                      "quat": self.truth.quat.tolist()},
            "meta": self.meta,
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "frames").mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        for n, nd in zip(self.nodes, d["nodes"]):
            if n.lidar is not None:
                save_lidar_csv(n.lidar, out / nd["lidar"])
            if n.radar is not None:
                save_radar_csv(n.radar, out / nd["radar"])
        path = out / "graph.json"
        path.write_text(json.dumps(d, indent=1))
        return path

    @classmethod
    def load(cls, path, load_frames: bool = True) -> "TeachGraph":
        path = Path(path)
        if path.is_dir():
            path = path / "graph.json"
        d = json.loads(path.read_text())
        base = path.parent
        nodes = []
        for nd in d["nodes"]:
            lid = rad = None
            if load_frames:
                if (base / nd["lidar"]).exists():
                    lid = load_lidar_csv(base / nd["lidar"])
                if (base / nd["radar"]).exists():
                    rad = load_radar_csv(base / nd["radar"])
            nodes.append(TeachNode(nd["id"], nd["t"], Pose.from_list(nd["pose"]), nd["frame_index"], lid, rad,
                                   None if nd["gt_pose"] is None else Pose.from_list(nd["gt_pose"]),
                                   nd["lidar"], nd["radar"]))
        edges = [TeachEdge(e["from"], e["to"], Pose.from_list(e["T"])) for e in d["edges"]]
        o = d["odometry"]
        odom = Trajectory(o["t"], o["xyz"], o["quat"])
        tr = d.get("truth")
        truth = None if tr is None else Trajectory(tr["t"], tr["xyz"], tr["quat"])
        return cls(nodes, edges, odom, truth, d.get("meta", {}))


def build_graph(node_idx, odom: Trajectory, stream: TeachStream | None = None, truth: Trajectory | None = None,
                meta: dict | None = None) -> TeachGraph:
    """Nodes at the selected odometry samples; edges hold odometry-relative transforms."""
    node_idx = sorted(set(int(i) for i in node_idx))
    nodes = []
    for k, i in enumerate(node_idx):
        nodes.append(TeachNode(k, float(odom.t[i]), odom.pose(i), i,
                               stream.lidar(i) if stream is not None else None,
                               stream.radar(i) if stream is not None else None,
                               (truth or odom).pose(i)))
    edges = [TeachEdge(a.id, b.id, a.pose.inverse() @ b.pose) for a, b in zip(nodes[:-1], nodes[1:])]
    return TeachGraph(nodes, edges, odom, truth, dict(meta or {}))


@dataclass
class TeachResult:
    graph: TeachGraph
    stage1: list
    stage2: Stage2Result
    stream: TeachStream
    warnings: list


def run_teach(world: World, truth: Trajectory, backend, params: TeachParams = TeachParams(), seed: int = 0,
              lidar_spec: SensorSpec = DESK_LIDAR_SPEC, radar_spec: SensorSpec = DESK_RADAR_SPEC,
              render: RenderConfig = RenderConfig()) -> TeachResult:
    """Record the teach streams and run both node-selection stages."""
    odom = drifted_odometry(truth, params.drift_sigma_t, params.drift_sigma_yaw, seed)
    stream = TeachStream(world, truth, odom, seed, lidar_spec, radar_spec, render, 0, params.v_i)

    def reg(ref, j):
        prior = odom.pose(ref).inverse() @ odom.pose(j)
        try:
            return backend.register(prior, stream.lidar(j), stream.radar(ref), None, None, key=ref * 100003 + j)
        except NoOverlapError:
            return RegistrationResult(prior, float("inf"), 0, False)

    stage1, warn1 = select_nodes_stage1(len(truth), reg, params.tau)
    s2 = refine_nodes_stage2(stage1, odom, params.v_i, params.w_pos, params.w_rot, params.eps, params.eps_seg)
    graph = build_graph(s2.nodes, odom, stream, truth, {"stage1": stage1, "global_error": s2.global_error})
    return TeachResult(graph, stage1, s2, stream, warn1 + s2.warnings)
