"""Drift evaluation after a repeat, window classification, the sample library, the trigger rule
and the self-supervised correction update.

The learned matcher is replaced by a ``CorrectionModel``: one planar pose bias
per teach node (applied on the left of the raw registration) plus the
intensity weight.  Fine-tuning searches those parameters to minimise the
combined structural/geometric consistency loss over sampled radar pairs.
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

from .geometry import Pose
from .preprocess import ImageSpec, PseudoImage
from .registration import CorrectionModel, planar_pose
from .world import RadarFrame, frame_rng, load_radar_csv, save_radar_csv

log = logging.getLogger(__name__)


class NoCorrespondenceError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneParams:
    window: int = 50
    stride: int = 25
    a: float = 0.3
    b: float = 0.245
    classifier_orientation: str = "as_written"  # or "flipped": mu - a*sigma - b > 0
    r_a: float = 3.0
    tau_mu: float = 0.25
    L_min: float = 400.0
    lam: float = 0.5
    epochs: int = 30
    pairs_per_node: int = 24
    match_gate: float = 0.3  # m, nearest-neighbour gate for geometric pairs
    search_t: float = 0.4  # m, bias search half-range per coordinate
    search_yaw: float = np.deg2rad(3.0)
    golden_iters: int = 12
    min_frames: int = 8  # distinct repeat frames a node needs before its bias is fitted
    min_gain: float = 2e-5  # a node stops once an epoch lowers its loss by less than this
    node_image: ImageSpec = ImageSpec(10, 192, 2 * np.pi, np.deg2rad(40.0))  # structural term, around the node

    def __post_init__(self):
        if self.window < 2 or self.stride < 1:
            raise ValueError("window must be >= 2 and stride >= 1")
        if self.classifier_orientation not in ("as_written", "flipped"):
            raise ValueError("classifier_orientation must be 'as_written' or 'flipped'")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


# ------------------------------------------------------------ drift and windows

def drift_series(repeat, teach) -> tuple[np.ndarray, np.ndarray]:
    """Per repeat node: estimated pose ``X_node T^-1`` and its distance to the nearest teach odometry point.

    Returns ``(drifts, positions)``.
    """
    poses = repeat.estimated_poses(teach)
    if not poses:
        return np.zeros(0), np.zeros((0, 3))
    pos = np.array([p.t for p in poses])
    d, _ = cKDTree(teach.odometry.xyz).query(pos)
    return d, pos


@dataclass(frozen=True)
class WindowStats:
    index: int
    start: int
    stop: int  # exclusive
    mu: float
    sigma: float
    length: float
    negative: bool = False


def is_negative(mu: float, sigma: float, a: float = 0.3, b: float = 0.245, orientation: str = "as_written") -> bool:
    if orientation == "as_written":
        return a * sigma - mu - b > 0
    if orientation == "flipped":
        return mu - a * sigma - b > 0
    raise ValueError(f"unknown classifier orientation {orientation!r}")


def window_starts(n: int, window: int, stride: int) -> list[int]:
    """Window start indices; the last window is aligned to the end so the tail is covered."""
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def classify_windows(drifts, positions=None, window: int = 50, stride: int = 25, a: float = 0.3, b: float = 0.245,
                     orientation: str = "as_written") -> tuple[list[WindowStats], list[int]]:
    """Sliding-window mean / population std of the drift and the linear-classifier flag per window."""
    if window < 2:
        raise ValueError("window must be at least 2")
    d = np.asarray(drifts, float)
    n = len(d)
    if n == 0:
        return [], []
    if positions is None:
        steps = np.zeros(max(n - 1, 0))
    else:
        steps = np.linalg.norm(np.diff(np.asarray(positions, float), axis=0), axis=1)
    out, neg = [], []
    for k, s in enumerate(window_starts(n, window, stride)):
        e = min(n, s + window)
        mu = float(d[s:e].mean())
        sigma = float(d[s:e].std())
        length = float(steps[s:e - 1].sum())
        flag = is_negative(mu, sigma, a, b, orientation)
        out.append(WindowStats(k, s, e, mu, sigma, length, flag))
        if flag:
            neg.append(k)
    return out, neg


# ------------------------------------------------------------ sample library

@dataclass(eq=False)
class Sample:
    node: int  # teach node id (the LiDAR reference)
    radar: RadarFrame | None
    T_raw: Pose  # registration before correction: node pose in the radar frame
    run: int
    window: int
    radar_path: str | None = None


def _raw(node) -> Pose:
    return node.T_raw if node.T_raw is not None else node.T


@dataclass(eq=False)
class SampleLibrary:
    negatives: list = field(default_factory=list)
    positives: list = field(default_factory=list)
    neg_windows: list = field(default_factory=list)  # (run, WindowStats)
    r_a: float = 3.0

    def ratio_ok(self) -> bool:
        return len(self.positives) >= self.r_a * max(1, len(self.negatives))

    def update(self, run: int, windows: list, negative_ids, repeat, seed: int = 0) -> None:
        """Add the frames of negative windows and resample positives from the other windows of this run."""
        negative_ids = set(int(i) for i in negative_ids)
        by_frame = list(repeat.nodes)
        neg_frames = {i: w.index for w in windows if w.index in negative_ids for i in range(w.start, w.stop)}
        pos_frames = {i: w.index for w in windows if w.index not in negative_ids for i in range(w.start, w.stop)
                      if i not in neg_frames}
        self.neg_windows.extend((run, w) for w in windows if w.index in negative_ids)
        for i in sorted(neg_frames):
            n = by_frame[i]
            self.negatives.append(Sample(n.target, n.radar, _raw(n), run, neg_frames[i]))
        need = int(math.ceil(self.r_a * max(1, len(self.negatives)))) - len(self.positives)
        pool = sorted(pos_frames)
        if need > 0 and pool:
            rng = frame_rng(seed, 17, run)
            pick = rng.choice(len(pool), size=need, replace=need > len(pool))
            for j in np.sort(pick):
                n = by_frame[pool[j]]
                self.positives.append(Sample(n.target, n.radar, _raw(n), run, pos_frames[pool[j]]))

    def nodes(self) -> list[int]:
        return sorted({s.node for s in self.negatives} | {s.node for s in self.positives})

    def samples_for(self, node: int) -> list:
        return [s for s in self.negatives + self.positives if s.node == node]

    # ---- persistence: JSON index plus one radar CSV per distinct frame
    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "frames").mkdir(parents=True, exist_ok=True)
        paths: dict = {}
        recs = {"negatives": [], "positives": []}
        for kind in recs:
            for s in getattr(self, kind):
                key = id(s.radar)
                if s.radar is not None and key not in paths:
                    paths[key] = f"frames/radar_{len(paths):06d}.csv"
                    save_radar_csv(s.radar, out / paths[key])
                recs[kind].append({"node": s.node, "run": s.run, "window": s.window, "T_raw": s.T_raw.to_list(),
                                   "radar": paths.get(key, s.radar_path)})
        index = {"r_a": self.r_a, **recs,
                 "neg_windows": [{"run": r, "index": w.index, "start": w.start, "stop": w.stop, "mu": w.mu,
                                  "sigma": w.sigma, "length": w.length} for r, w in self.neg_windows]}
        path = out / "library.json"
        path.write_text(json.dumps(index, indent=1))
        return path

    @classmethod
    def load(cls, path, load_frames: bool = True) -> "SampleLibrary":
        path = Path(path)
        if path.is_dir():
            path = path / "library.json"
        d = json.loads(path.read_text())
        cache: dict = {}

        def frame(p):
            if not load_frames or p is None:
                return None
            if p not in cache:
                cache[p] = load_radar_csv(path.parent / p)
            return cache[p]

        lib = cls(r_a=d["r_a"])
        for kind in ("negatives", "positives"):
            for r in d[kind]:
                getattr(lib, kind).append(Sample(r["node"], frame(r["radar"]), Pose.from_list(r["T_raw"]), r["run"],
                                                 r["window"], r["radar"]))
        lib.neg_windows = [(w["run"], WindowStats(w["index"], w["start"], w["stop"], w["mu"], w["sigma"],
                                                  w["length"], True)) for w in d["neg_windows"]]
        return lib


def should_finetune(lib: SampleLibrary, tau_mu: float = 0.25, L_min: float = 400.0) -> bool:
    """Trigger when the largest negative-window drift exceeds ``tau_mu`` or their total length exceeds ``L_min``."""
    if not lib.neg_windows:
        return False
    mus = [w.mu for _, w in lib.neg_windows]
    total = sum(w.length for _, w in lib.neg_windows)
    return max(mus) > tau_mu or total > L_min


# ------------------------------------------------------------ losses

def geo_loss(r1, r2, T1, T2) -> float:
    """Mean squared distance between matched radar points after mapping both into the LiDAR frame.

    ``T1``/``T2`` map radar coordinates to the LiDAR frame: a single ``Pose`` or one per pair.
    """
    r1 = np.asarray(r1, float).reshape(-1, 3)
    r2 = np.asarray(r2, float).reshape(-1, 3)
    if len(r1) == 0:
        raise NoCorrespondenceError("no matched pairs")
    if len(r1) != len(r2):
        raise ValueError("pair arrays differ in length")
    p1 = _map(T1, r1)
    p2 = _map(T2, r2)
    return float(np.mean(np.sum((p1 - p2) ** 2, axis=1)))


def _map(T, r):
    if isinstance(T, Pose):
        return T.apply(r)
    return np.array([Ti.apply(ri) for Ti, ri in zip(T, r)])


def match_pairs(p1: np.ndarray, p2: np.ndarray, gate: float, tree: cKDTree | None = None):
    """Nearest neighbour in ``p1`` for each point of ``p2`` within ``gate``; returns index arrays ``(i1, i2)``."""
    if len(p1) == 0 or len(p2) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    tree = tree or cKDTree(p1)
    d, i = tree.query(p2, distance_upper_bound=gate)
    ok = np.isfinite(d)
    return i[ok], np.flatnonzero(ok)


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    """Sums over every fully contained ``k x k`` window (valid convolution)."""
    c = np.cumsum(np.cumsum(np.pad(a, ((1, 0), (1, 0))), axis=0), axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def masked_ssim(x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None, win: int = 7,
                data_range: float | None = None) -> float:
    """Mean local SSIM over ``win x win`` windows using only cells where ``mask`` holds.

    Local statistics use the sample covariance over the valid cells of each
    window; windows with fewer than two valid cells are skipped.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < win or x.shape[1] < win:
        raise ValueError("image smaller than the SSIM window")
    m = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask, bool)
    if data_range is None:
        if not m.any():
            raise ValueError("no valid cells")
        vals = np.concatenate([x[m], y[m]])
        data_range = float(vals.max() - vals.min()) or 1.0
    C1 = (0.01 * data_range) ** 2
    C2 = (0.03 * data_range) ** 2
    mf = m.astype(float)
    xm, ym = x * mf, y * mf
    n = _box_sum(mf, win)
    sx, sy = _box_sum(xm, win), _box_sum(ym, win)
    sxx, syy, sxy = _box_sum(xm * x, win), _box_sum(ym * y, win), _box_sum(xm * y, win)
    ok = n >= 2
    if not ok.any():
        raise ValueError("no window holds two valid cells")
    n, sx, sy, sxx, syy, sxy = (v[ok] for v in (n, sx, sy, sxx, syy, sxy))
    mx, my = sx / n, sy / n
    cov = n / (n - 1)
    vx = (sxx / n - mx * mx) * cov
    vy = (syy / n - my * my) * cov
    vxy = (sxy / n - mx * my) * cov
    s = ((2 * mx * my + C1) * (2 * vxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(s.mean())


def ssim_loss(img1: PseudoImage, img2: PseudoImage, channel: int = 0, win: int = 7) -> float:
    """``1 - mean local SSIM`` over cells valid in both images, clipped to ``[0, 1]``.

    Identical images give 0; anti-correlated structure saturates at 1.
    """
    if img1.pixels.shape != img2.pixels.shape:
        raise ValueError("pseudo images differ in shape")
    mask = img1.valid & img2.valid
    if mask.sum() < 2:
        return 1.0
    try:
        s = masked_ssim(img1.pixels[..., channel], img2.pixels[..., channel], mask, win)
    except ValueError:
        return 1.0
    return float(min(1.0, max(0.0, 1.0 - s)))


def in_fov(points: np.ndarray, spec: ImageSpec) -> np.ndarray:
    """Mask of points inside the image's azimuth/elevation field of view."""
    r = np.linalg.norm(points, axis=1)
    az = np.arctan2(points[:, 1], points[:, 0])
    el = np.arcsin(np.clip(points[:, 2] / np.maximum(r, 1e-12), -1, 1))
    return (r > 1e-9) & (np.abs(az) < spec.az_fov / 2) & (np.abs(el) < spec.el_fov / 2)


def splat_range_image(points: np.ndarray, spec: ImageSpec) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear splat of point ranges onto the pixel grid: ``(weighted mean range, total weight)``.

    Both outputs vary continuously with the points, unlike a nearest-point
    z-buffer, which keeps the structural term smooth in the pose.
    """
    H, W = spec.height, spec.width
    p = points[in_fov(points, spec)]
    rng = np.linalg.norm(p, axis=1)
    u = np.arctan2(p[:, 1], p[:, 0]) / spec.d_az + W / 2 - 0.5
    v = np.arcsin(np.clip(p[:, 2] / np.maximum(rng, 1e-12), -1, 1)) / spec.d_el + H / 2 - 0.5
    u0, v0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = u - u0, v - v0
    wsum = np.zeros(H * W)
    rsum = np.zeros(H * W)
    for du, dv, wt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        cell = vv[ok] * W + uu[ok]
        wsum += np.bincount(cell, wt[ok], H * W)
        rsum += np.bincount(cell, wt[ok] * rng[ok], H * W)
    mean = np.divide(rsum, wsum, out=np.zeros_like(rsum), where=wsum > 0)
    return mean.reshape(H, W), wsum.reshape(H, W)


# ------------------------------------------------------------ update

def anchor_maps(graph, stream=None, max_frames: int = 40) -> dict:
    """Teach radar points of each node's approach span, expressed in that node's LiDAR frame.

    Frames from the previous to the next node are positioned by teach
    odometry.  Without a stream only the stored radar frames of those three
    nodes are used.
    """
    odom = graph.odometry
    out = {}
    for k, node in enumerate(graph.nodes):
        inv = node.pose.inverse()
        if stream is None:
            frames = [(m.pose, m.radar) for m in graph.nodes[max(0, k - 1):k + 2] if m.radar is not None]
        else:
            lo = graph.nodes[max(k - 1, 0)].frame_index
            hi = graph.nodes[min(k + 1, len(graph.nodes) - 1)].frame_index
            idx = np.unique(np.linspace(lo, hi, max_frames).round().astype(int))
            frames = [(odom.pose(j), stream.radar(j)) for j in idx]
        pts = [(inv @ X).apply(f.xyz) for X, f in frames if len(f)]
        out[node.id] = np.vstack(pts) if pts else np.zeros((0, 3))
    return out


class _NodeProblem:
    """Loss of one teach node as a function of its correction bias.

    ``R1`` is the teach radar map of the node, already in its LiDAR frame;
    each ``R2`` is a repeat radar frame mapped in by the corrected registration.
    The structural term compares range images of both, rendered around the node.
    """

    def __init__(self, anchor: np.ndarray, samples: list, params: FinetuneParams, rng, min_weight: float = 0.5):
        self.params = params
        self.anchor = np.asarray(anchor, float)
        self.tree = cKDTree(self.anchor)
        self.min_weight = min_weight
        k = min(params.pairs_per_node, len(samples))
        pick = np.sort(rng.choice(len(samples), size=k, replace=False))
        self.samples = [samples[i] for i in pick]
        if params.lam > 0:
            self.map_img, wmap = splat_range_image(self.anchor, params.node_image)
            self.map_ok = wmap >= min_weight
        # correspondences and compared cells are held fixed between refreshes so the objective is smooth
        self.pairs = None
        self.cells = None

    def _to_node(self, bias: Pose, s: Sample) -> Pose:
        return (bias @ s.T_raw).inverse()  # radar -> node LiDAR frame

    def fix_matches(self, bias: Pose) -> None:
        """Refresh point correspondences and the set of compared image cells at ``bias``."""
        self.pairs, self.cells = [], []
        for s in self.samples:
            p = self._to_node(bias, s).apply(s.radar.xyz)
            self.pairs.append(match_pairs(self.anchor, p, self.params.match_gate, self.tree))
            if self.params.lam > 0:
                _, w = splat_range_image(p, self.params.node_image)
                self.cells.append(self.map_ok & (w >= self.min_weight))

    def _ssim(self, k: int, T2: Pose) -> float:
        mask = self.cells[k]
        if mask.sum() < 2:
            return 1.0
        img, _ = splat_range_image(T2.apply(self.samples[k].radar.xyz), self.params.node_image)
        try:
            return 1.0 - masked_ssim(img, self.map_img, mask)
        except ValueError:
            return 1.0

    def loss(self, bias: Pose) -> float:
        """Mean over samples of ``lam * L_SSIM + (1 - lam) * L_geo`` at the held correspondences.

        The geometric term is the pair mean weighted by the matched fraction,
        with every unmatched point charged the squared gate, so gaining or
        losing a match never makes the loss jump.
        """
        lam = self.params.lam
        gate2 = self.params.match_gate ** 2
        total = 0.0
        for k, (s, (i1, i2)) in enumerate(zip(self.samples, self.pairs)):
            T2 = self._to_node(bias, s)
            n = len(s.radar)
            geo = geo_loss(self.anchor[i1], s.radar.xyz[i2], Pose.identity(), T2) if len(i1) else 0.0
            geo = (geo * len(i1) + gate2 * (n - len(i1))) / n
            ssim = self._ssim(k, T2) if lam > 0 else 0.0
            total += lam * ssim + (1.0 - lam) * geo
        return total / max(1, len(self.samples))

    def true_loss(self, bias: Pose) -> float:
        """Loss with correspondences refreshed at ``bias`` (leaves them refreshed)."""
        self.fix_matches(bias)
        return self.loss(bias)


def _golden(f, lo: float, hi: float, iters: int = 20) -> tuple[float, float]:
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def _bias_params(b: Pose) -> np.ndarray:
    return np.array([b.t[0], b.t[1], b.yaw])


@dataclass
class FinetuneResult:
    correction: CorrectionModel
    loss_before: float
    loss_after: float
    history: list
    skipped: list
    per_node: dict


def finetune_step(lib: SampleLibrary, correction: CorrectionModel, anchors: dict,
                  params: FinetuneParams = FinetuneParams(), seed: int = 0) -> FinetuneResult:
    """Coordinate descent with golden-section line searches on each library node's (x, y, yaw) bias.

    ``anchors`` maps teach node id to its teach radar map (see ``anchor_maps``).
    A coordinate step is kept only if it lowers the node loss, so the library
    total never increases.
    """
    rng = frame_rng(seed, 23)
    problems, skipped = {}, []
    for node in lib.nodes():
        samples = [s for s in lib.samples_for(node) if s.radar is not None and len(s.radar) > 0]
        anchor = anchors.get(node)
        distinct = len({id(s.radar) for s in samples})
        if anchor is None or len(anchor) == 0 or distinct < max(1, params.min_frames):
            skipped.append(node)
            log.warning("library node %d has %d distinct repeat radar frames (need %d); skipped", node, distinct,
                        params.min_frames)
            continue
        problems[node] = _NodeProblem(anchor, samples, params, rng)
    current = {n: _bias_params(correction.bias(n)) for n in problems}
    scales = np.array([params.search_t, params.search_t, params.search_yaw])
    per_node = {}

    def pose_of(x):
        return planar_pose(x[0], x[1], x[2])

    before = {n: problems[n].true_loss(pose_of(current[n])) for n in problems}
    best = dict(before)
    history = [sum(before.values())]
    active = set(problems)
    for epoch in range(params.epochs):
        for n in sorted(active):
            prob = problems[n]
            x = current[n].copy()
            # correspondences fixed at the current bias: coordinate descent on the resulting smooth surrogate
            for c in range(3):
                def f(v, c=c):
                    y = x.copy()
                    y[c] = v
                    return prob.loss(pose_of(y))
                grid = x[c] + scales[c] * np.linspace(-1, 1, 5)
                vals = [f(v) for v in grid]
                k = int(np.argmin(vals))
                v, fv = _golden(f, grid[max(k - 1, 0)], grid[min(k + 1, 4)], params.golden_iters)
                x[c] = v if fv < vals[k] else grid[k]
            new = prob.true_loss(pose_of(x))
            if new < best[n] - params.min_gain:
                current[n], best[n] = x, new
            else:
                prob.fix_matches(pose_of(current[n]))
                active.discard(n)
        history.append(sum(best.values()))
        if not active:
            break
    updates = {n: pose_of(current[n]) for n in problems}
    for n in problems:
        per_node[n] = {"before": _bias_params(correction.bias(n)).tolist(), "after": current[n].tolist(),
                       "loss_before": before[n], "loss_after": best[n]}
    new = correction.with_biases(updates)
    return FinetuneResult(new, history[0], history[-1], history, skipped, per_node)


def write_report_csv(path, windows: list, per_node: dict, run: int = 0) -> None:
    cols = ["record", "run", "index", "mu", "sigma", "length", "negative", "node", "bx_before", "by_before",
            "byaw_before", "bx_after", "by_after", "byaw_after"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for ws in windows:
            w.writerow(["window", run, ws.index, repr(ws.mu), repr(ws.sigma), repr(ws.length), int(ws.negative),
                        "", "", "", "", "", "", ""])
        for n in sorted(per_node):
            b, a = per_node[n]["before"], per_node[n]["after"]
            w.writerow(["node", run, "", "", "", "", "", n, *map(repr, b), *map(repr, a)])
