"""Trajectory evaluation: ATE/YAE under nearest-point association, the storage-weighted accuracy
score, the fixed-threshold node baseline and report writers."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DomainError, Trajectory, wrap_angle

# (threshold, ATE m, YAE deg, storage, nodes, EWA_ATE, EWA_YAE); None where the run failed
NODE_SELECTION_TABLE = (
    ("0.5m/5deg", 0.065, 1.163, 5068.5, 2816, 1.937, 0.108),
    ("1m/10deg", 0.076, 1.410, 2586.9, 1436, 1.810, 0.098),
    ("2m/15deg", 0.078, 1.723, 1302.8, 724, 1.974, 0.088),
    ("3m/30deg", 0.102, 2.833, 876.1, 487, 1.584, 0.057),
    ("5m/45deg", 0.158, 4.261, 538.1, 299, 1.110, 0.041),
    ("8m/60deg", None, None, 428.4, 238, None, None),
    ("adaptive", 0.073, 1.481, 888.3, 492, 2.210, 0.109),
)
BASELINE_GRID = ((0.5, 5.0), (1.0, 10.0), (2.0, 15.0), (3.0, 30.0), (5.0, 45.0), (8.0, 60.0))


@dataclass(frozen=True)
class AteYae:
    ate: float
    yae: float  # degrees
    ate_std: float
    yae_std: float


def pointwise_errors(repeat: Trajectory, teach: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per repeat sample: distance to the nearest teach point and absolute yaw difference (deg)."""
    if len(repeat) == 0 or len(teach) == 0:
        raise ValueError("empty trajectory")
    d, i = cKDTree(teach.xyz).query(repeat.xyz)
    dyaw = np.abs(np.rad2deg(wrap_angle(repeat.yaw() - teach.yaw()[i])))
    return d, dyaw


def ate_yae(repeat: Trajectory, teach: Trajectory) -> AteYae:
    d, dyaw = pointwise_errors(repeat, teach)
    return AteYae(float(d.mean()), float(dyaw.mean()), float(d.std()), float(dyaw.std()))


def ewa(error: float, e0: float, n_nodes: int) -> float:
    """``1 / ((error / e0) * ln N)``; higher is better."""
    if not error > 0 or not e0 > 0:
        raise DomainError("error and e0 must be positive")
    if n_nodes < 2:
        raise DomainError("need at least two nodes")
    return 1.0 / ((error / e0) * math.log(n_nodes))


def fixed_threshold_nodes(odometry: Trajectory, d_thresh: float, yaw_thresh_deg: float,
                          include_end: bool = True) -> list[int]:
    """Emit a node once travelled distance or accumulated |yaw change| since the last node reaches a threshold."""
    if d_thresh <= 0 or yaw_thresh_deg <= 0:
        raise ValueError("thresholds must be positive")
    n = len(odometry)
    if n == 0:
        return []
    steps = np.linalg.norm(np.diff(odometry.xyz, axis=0), axis=1)
    dyaw = np.abs(np.rad2deg(wrap_angle(np.diff(odometry.yaw()))))
    tol = 1e-9
    nodes = [0]
    dist = rot = 0.0
    for i in range(1, n):
        dist += steps[i - 1]
        rot += dyaw[i - 1]
        if dist >= d_thresh - tol or rot >= yaw_thresh_deg - tol:
            nodes.append(i)
            dist = rot = 0.0
    if include_end and nodes[-1] != n - 1:
        nodes.append(n - 1)
    return nodes


@dataclass
class RunReport:
    ate: float
    yae: float
    ate_std: float
    yae_std: float
    success: bool
    max_run_distance: float
    node_count: int
    storage_bytes: int
    label: str = ""

    def ewa_ate(self) -> float | None:
        return ewa(self.ate, 1.0, self.node_count) if self.ate > 0 and self.node_count >= 2 else None

    def ewa_yae(self) -> float | None:
        return ewa(self.yae, 1.0, self.node_count) if self.yae > 0 and self.node_count >= 2 else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ewa_ate"] = self.ewa_ate()
        d["ewa_yae"] = self.ewa_yae()
        return d


def make_report(repeat: Trajectory, teach: Trajectory, success: bool, distance: float, node_count: int,
                storage_bytes: int, label: str = "") -> RunReport:
    e = ate_yae(repeat, teach)
    return RunReport(e.ate, e.yae, e.ate_std, e.yae_std, bool(success), float(distance), int(node_count),
                     int(storage_bytes), label)


def write_reports_json(reports, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=1))


def write_reports_csv(reports, path) -> None:
    rows = [r.to_dict() for r in reports]
    if not rows:
        raise ValueError("no reports to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def table_comparison() -> list[dict]:
    """Recompute the accuracy scores of the published node-selection table from its ATE/YAE and node columns."""
    out = []
    for name, ate, yae, _storage, n, pub_ate, pub_yae in NODE_SELECTION_TABLE:
        row = {"threshold": name, "nodes": n, "ewa_ate": None, "ewa_ate_published": pub_ate,
               "ewa_yae": None, "ewa_yae_published": pub_yae}
        if ate is not None:
            row["ewa_ate"] = ewa(ate, 1.0, n)
            row["ewa_yae"] = ewa(yae, 1.0, n)
        out.append(row)
    return out


def error_map_svg(repeat: Trajectory, teach: Trajectory, path, width: int = 800, vmax: float | None = None) -> None:
    """Teach path in grey and the repeat path coloured by per-sample position error (blue to red)."""
    d, _ = pointwise_errors(repeat, teach)
    xy = np.vstack([teach.xyz[:, :2], repeat.xyz[:, :2]])
    lo, hi = xy.min(axis=0) - 2.0, xy.max(axis=0) + 2.0
    scale = width / max(hi[0] - lo[0], 1e-9)
    height = int(math.ceil((hi[1] - lo[1]) * scale))

    def px(p):
        return (p[0] - lo[0]) * scale, (hi[1] - p[1]) * scale

    vmax = float(vmax if vmax is not None else max(d.max(), 1e-9))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             '<rect width="100%" height="100%" fill="white"/>']
    pts = " ".join("%.2f,%.2f" % px(p) for p in teach.xyz[:, :2])
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#999" stroke-width="3"/>')
    for a, b, e in zip(repeat.xyz[:-1, :2], repeat.xyz[1:, :2], d[1:]):
        f = min(e / vmax, 1.0)
        color = "#%02x%02x%02x" % (int(255 * f), 40, int(255 * (1 - f)))
        (x0, y0), (x1, y1) = px(a), px(b)
        parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="{color}" '
                     'stroke-width="2"/>')
    parts.append(f'<text x="10" y="20" font-size="14">max error {vmax:.3f} m</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
