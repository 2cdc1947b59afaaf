"""End-to-end experiment drivers shared by the acceptance tests, the scripts and the CLI."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .finetune import FinetuneParams, SampleLibrary, anchor_maps, classify_windows, drift_series, finetune_step, \
    should_finetune
from .metrics import ate_yae, ewa, fixed_threshold_nodes, pointwise_errors
from .registration import CorrectionModel, OracleBackend, OracleConfig
from .repeat import RepeatParams, run_repeat
from .scenarios import change_world, loop_world, sample_path, smoke_world
from .teach import TeachParams, TeachStream, build_graph, run_teach


def quiet_oracle(world, seed: int, sigma_t: float = 0.01, sigma_yaw_deg: float = 0.2) -> OracleBackend:
    return OracleBackend(world, OracleConfig(noise_sigma_t=sigma_t, noise_sigma_yaw=np.deg2rad(sigma_yaw_deg)), seed)


def noisy_oracle(world, seed: int) -> OracleBackend:
    """Registration noise of the closed-loop checks: 2 cm and 0.5 deg."""
    return quiet_oracle(world, seed, 0.02, 0.5)


# ------------------------------------------------------------ node selection on the loop

@dataclass
class NodeSelection:
    label: str
    nodes: int
    global_error: float | None
    ate: list
    success: list

    @property
    def ewa_ate(self) -> float:
        return ewa(float(np.mean(self.ate)), 1.0, self.nodes)


def node_selection_experiment(seed: int = 0, repeat_seeds=(0,), baseline=(0.5, 5.0)) -> tuple[NodeSelection, NodeSelection]:
    """Adaptive teach graph against a fixed distance/yaw threshold graph on the same teach run."""
    world, spec = loop_world(seed)
    truth = sample_path(spec, world)
    res = run_teach(world, truth, OracleBackend(world), TeachParams(), seed)
    base = build_graph(fixed_threshold_nodes(truth, *baseline), truth, res.stream, truth)
    out = []
    for label, g, err in (("adaptive", res.graph, res.stage2.global_error),
                          (f"fixed {baseline[0]} m/{baseline[1]} deg", base, None)):
        ates, ok = [], []
        for s in repeat_seeds:
            r = run_repeat(g, world, truth.pose(0), noisy_oracle(world, s), RepeatParams(), s)
            ates.append(ate_yae(r.trajectory, truth).ate)
            ok.append(r.success)
        out.append(NodeSelection(label, len(g.nodes), err, ates, ok))
    return out[0], out[1]


# ------------------------------------------------------------ closed-loop repeat and smoke

@dataclass
class RepeatOutcome:
    seed: int
    variant: str
    success: bool
    cause: str | None
    ate: float
    distance: float


def loop_repeat_experiment(seeds=(0, 1, 2), world_seed: int = 0) -> list[RepeatOutcome]:
    """Adaptive teach on the loop, then noisy-oracle repeats at the default switching threshold."""
    world, spec = loop_world(world_seed)
    truth = sample_path(spec, world)
    graph = run_teach(world, truth, OracleBackend(world), TeachParams(), world_seed).graph
    out = []
    for s in seeds:
        r = run_repeat(graph, world, truth.pose(0), noisy_oracle(world, s), RepeatParams(), s)
        out.append(RepeatOutcome(s, "cross_modal", r.success, r.cause, ate_yae(r.trajectory, truth).ate, r.distance))
    return out


def smoke_experiment(seeds=(0, 1, 2), world_seed: int = 0,
                     variants=("cross_modal", "lidar")) -> list[RepeatOutcome]:
    """Teach in clear air, repeat after smoke fills the middle of the corridor."""
    world, spec = smoke_world(world_seed)
    truth = sample_path(spec, world)
    graph = run_teach(world, truth, OracleBackend(world), TeachParams(), world_seed).graph
    out = []
    for variant in variants:
        for s in seeds:
            r = run_repeat(graph, world, truth.pose(0), noisy_oracle(world, s), RepeatParams(variant=variant, epoch=1),
                           s)
            ate = ate_yae(r.trajectory, truth).ate if len(r.trajectory) > 1 else float("nan")
            out.append(RepeatOutcome(s, variant, r.success, r.cause, ate, r.distance))
    return out


# ------------------------------------------------------------ scene-change fine-tuning

@dataclass
class ChangeExperiment:
    runs: int
    negatives_as_written: int
    negatives_flipped: int
    labelled_length: float
    triggered: bool
    segment_ate_before: float
    segment_ate_after: float
    control_ate_before: float
    control_ate_after: float
    changed_nodes: list
    unchanged_nodes: list
    bias_after: dict  # node -> (x, y, yaw)
    loss_history: list
    success_before: bool
    success_after: bool
    seconds: float
    notes: list = field(default_factory=list)

    @property
    def ate_reduction(self) -> float:
        return 1.0 - self.segment_ate_after / self.segment_ate_before

    def max_unchanged_shift(self) -> float:
        return max((float(np.hypot(*self.bias_after[n][:2])) for n in self.unchanged_nodes), default=0.0)

    def changed_bias_y(self) -> dict:
        return {n: self.bias_after[n][1] for n in self.changed_nodes}


def change_windows(windows, positions, span, min_inside: float = 0.5) -> list[int]:
    """Windows with most of their estimated positions inside the simulator's changed stretch."""
    out = []
    for w in windows:
        x = positions[w.start:w.stop, 0]
        if np.mean((x > span[0]) & (x < span[1])) > min_inside:
            out.append(w.index)
    return out


def _segment_ate(result, truth, span) -> tuple[float, float]:
    d, _ = pointwise_errors(result.trajectory, truth)
    x = result.trajectory.xyz[:, 0]
    inside = (x > span[0]) & (x < span[1])
    return float(d[inside].mean()), float(d[~inside].mean())


def change_experiment(seed: int = 0, spacing: float = 10.0, max_runs: int = 8,
                      params: FinetuneParams = FinetuneParams(lam=0.0), eval_seed: int = 1000) -> ChangeExperiment:
    """Teach before a static scene change, repeat after it until the trigger fires, fine-tune, repeat again.

    Negative windows for the library are the windows inside the changed
    stretch recorded in the world metadata; the drift classifier's own
    output is reported alongside in both orientations.
    """
    t0 = time.time()
    world, spec = change_world(seed)
    span = world.meta["change_span"]
    epoch = world.meta["change_epoch"]
    truth = sample_path(spec, world)
    stream = TeachStream(world, truth, seed=seed)
    graph = build_graph(fixed_threshold_nodes(truth, spacing, 90.0), truth, stream, truth)
    rp = RepeatParams(epoch=epoch)
    lib = SampleLibrary(r_a=params.r_a)
    n_written = n_flipped = 0
    runs = 0
    notes = []
    for run in range(max_runs):
        res = run_repeat(graph, world, truth.pose(0), quiet_oracle(world, seed * 100 + run), rp, seed * 100 + run,
                         keep_frames=True)
        runs += 1
        if not res.success:
            notes.append(f"run {run} failed: {res.cause}")
        drifts, pos = drift_series(res.graph, graph)
        windows, neg = classify_windows(drifts, pos, params.window, params.stride, params.a, params.b, "as_written")
        _, neg_f = classify_windows(drifts, pos, params.window, params.stride, params.a, params.b, "flipped")
        n_written += len(neg)
        n_flipped += len(neg_f)
        lib.update(run, windows, change_windows(windows, pos, span), res.graph, seed=seed)
        if should_finetune(lib, params.tau_mu, params.L_min):
            break
    triggered = should_finetune(lib, params.tau_mu, params.L_min)
    labelled = sum(w.length for _, w in lib.neg_windows)

    # nodes whose library samples all registered against an unchanged view
    probe = OracleBackend(world)
    changed = set()
    for s in lib.negatives + lib.positives:
        if s.node not in changed and probe.change_fraction(graph.node(s.node).lidar, s.radar) >= \
                probe.cfg.change_bias_min:
            changed.add(s.node)
    lib_nodes = lib.nodes()

    ft = finetune_step(lib, CorrectionModel(), anchor_maps(graph, stream), params, seed)
    before = run_repeat(graph, world, truth.pose(0), quiet_oracle(world, eval_seed), rp, eval_seed)
    after = run_repeat(graph, world, truth.pose(0), quiet_oracle(world, eval_seed), rp, eval_seed,
                       correction=ft.correction)
    sb, cb = _segment_ate(before, truth, span)
    sa, ca = _segment_ate(after, truth, span)
    bias = {n: (float(b.t[0]), float(b.t[1]), float(b.yaw)) for n, b in
            ((n, ft.correction.bias(n)) for n in lib_nodes)}
    return ChangeExperiment(runs, n_written, n_flipped, labelled, triggered, sb, sa, cb, ca,
                            sorted(changed), sorted(set(lib_nodes) - changed), bias, ft.history,
                            before.success, after.success, time.time() - t0, notes)
