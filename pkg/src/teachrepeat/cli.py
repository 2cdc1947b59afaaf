"""Command-line front end: world generation, teach, repeat, evaluate, fine-tune and report.

Exit codes: 0 success, 1 configuration or input error, 2 initialization
failure, 3 navigation failure, 4 evaluation error.  Every output is a
deterministic function of the config, the seed and the inputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig, load_config
from .experiments import change_windows
from .finetune import SampleLibrary, anchor_maps, classify_windows, drift_series, finetune_step, should_finetune, \
    write_report_csv
from .geometry import Trajectory
from .metrics import error_map_svg, make_report, table_comparison, write_reports_csv, write_reports_json
from .registration import CorrectionModel, InitializationError, make_backend
from .repeat import RepeatGraph, run_repeat
from .scenarios import PRESETS, make_preset, sample_path, spec_from_world
from .teach import TeachGraph, TeachStream, run_teach
from .world import World

log = logging.getLogger("teachrepeat")

EXIT_OK, EXIT_CONFIG, EXIT_INIT, EXIT_NAV, EXIT_EVAL = 0, 1, 2, 3, 4


class EvaluationError(RuntimeError):
    pass


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")


# ------------------------------------------------------------ shared setup

def resolve_config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.backend is not None:
        over["backend"] = args.backend
    if args.preset is not None:
        over["preset"] = args.preset
    cfg = cfg.with_overrides(**over) if over else cfg
    if cfg.scenario.preset not in PRESETS and not cfg.scenario.world_file:
        raise ConfigError(f"unknown preset {cfg.scenario.preset!r}; choose from {sorted(PRESETS)}")
    return cfg


def build_world(cfg: ScenarioConfig) -> World:
    if cfg.scenario.world_file:
        world = World.load(cfg.scenario.world_file)
    else:
        world, _ = make_preset(cfg.scenario.preset, cfg.scenario.seed)
    regions = cfg.smoke_regions()
    if regions:
        world = world.with_smoke(tuple(world.smoke) + tuple(regions))
    return world


def load_world(args, cfg: ScenarioConfig) -> World:
    if getattr(args, "world", None):
        return World.load(args.world)
    return build_world(cfg)


def teach_truth(world: World, cfg: ScenarioConfig) -> Trajectory:
    if "path" not in world.meta:
        raise ConfigError("world file carries no path; regenerate it with 'world gen'")
    return sample_path(spec_from_world(world), world, cfg.params.v_i, cfg.lidar.rate)


def _backend(cfg: ScenarioConfig, world: World, seed: int):
    return make_backend(cfg.scenario.backend, world, cfg.oracle_config(), cfg.icp_config(), seed)


def read_trajectory(path) -> Trajectory:
    """Robot trajectory from a repeat log CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EvaluationError(f"{path}: empty trajectory")
    a = np.array([[float(r[k]) for k in ("t", "x", "y", "z", "qw", "qx", "qy", "qz")] for r in rows])
    return Trajectory(a[:, 0], a[:, 1:4], a[:, 4:8])


def _run_dirs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "repeat_graph.json").exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(q.parent for q in p.glob("run_*/repeat_graph.json")))
    return out


# ------------------------------------------------------------ commands

def cmd_world_gen(args, cfg: ScenarioConfig) -> int:
    world = build_world(cfg)
    out = Path(args.out_dir) / "world.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    world.save(out)
    log.info("world %s: %d surfels -> %s", world.meta.get("preset", world.name), len(world.centers), out)
    return EXIT_OK


def cmd_teach(args, cfg: ScenarioConfig) -> int:
    world = load_world(args, cfg)
    truth = teach_truth(world, cfg)
    seed = cfg.scenario.seed
    res = run_teach(world, truth, _backend(cfg, world, seed), cfg.teach_params(), seed, cfg.lidar_spec(),
                    cfg.radar_spec(), cfg.render_config())
    for w in res.warnings:
        log.warning("teach: %s", w)
    res.graph.meta.update({"seed": seed, "preset": world.meta.get("preset"), "warnings": list(res.warnings)})
    path = res.graph.save(Path(args.out_dir) / "teach")
    log.info("teach graph: %d nodes, global error %.4f m -> %s", len(res.graph.nodes), res.stage2.global_error,
             path)
    return EXIT_OK


def _load_correction(path) -> CorrectionModel | None:
    if not path:
        return None
    return CorrectionModel.from_dict(json.loads(Path(path).read_text()))


def cmd_repeat(args, cfg: ScenarioConfig) -> int:
    world = load_world(args, cfg)
    graph = TeachGraph.load(args.graph)
    correction = _load_correction(args.correction)
    truth = graph.truth if graph.truth is not None else graph.odometry
    epochs = cfg.scenario.repeat_epochs or (0,)
    status = EXIT_OK
    for k in range(cfg.scenario.runs):
        seed = cfg.scenario.seed + k
        params = cfg.repeat_params(epochs[k % len(epochs)])
        out = Path(args.out_dir) / f"run_{k:02d}"
        try:
            res = run_repeat(graph, world, truth.pose(0), _backend(cfg, world, seed), params, seed, correction,
                             cfg.radar_spec(), cfg.lidar_spec(), cfg.render_config(),
                             keep_frames=args.keep_frames or cfg.repeat.keep_frames)
        except InitializationError as e:
            log.error("run %d: initialization failed: %s", k, e)
            _dump(out / "status.json", {"success": False, "cause": "initialization", "message": str(e)})
            return EXIT_INIT
        res.graph.meta.update({"run": k, "epoch": params.epoch})
        res.graph.save(out, frames=args.keep_frames or cfg.repeat.keep_frames)
        res.log_csv(out / "trajectory.csv")
        rep = make_report(res.trajectory, truth, res.success, res.distance, len(graph.nodes), graph.storage_bytes(),
                          f"run_{k:02d}")
        _dump(out / "report.json", rep.to_dict())
        _dump(out / "status.json", {"success": res.success, "cause": res.cause, "last_node": res.last_node,
                                    "frames": res.frame, "distance": res.distance})
        if res.success:
            log.info("run %d: success, ATE %.4f m, YAE %.3f deg", k, rep.ate, rep.yae)
        else:
            log.error("run %d: navigation failed (%s) at node %d after %.1f m", k, res.cause, res.last_node,
                      res.distance)
            status = EXIT_NAV
    return status


def _evaluate(graph: TeachGraph, run_dir: Path):
    truth = graph.truth if graph.truth is not None else graph.odometry
    traj = read_trajectory(run_dir / "trajectory.csv")
    status = json.loads((run_dir / "status.json").read_text())
    return make_report(traj, truth, status["success"], status["distance"], len(graph.nodes), graph.storage_bytes(),
                       run_dir.name), traj, truth


def cmd_evaluate(args, cfg: ScenarioConfig) -> int:
    graph = TeachGraph.load(args.graph)
    runs = _run_dirs(args.runs)
    if not runs:
        raise EvaluationError("no repeat runs found")
    reports = [_evaluate(graph, r)[0] for r in runs]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_json(reports, out / "evaluation.json")
    write_reports_csv(reports, out / "evaluation.csv")
    for r in reports:
        log.info("%s: success=%s ATE %.4f m YAE %.3f deg", r.label, r.success, r.ate, r.yae)
    return EXIT_OK


def cmd_finetune(args, cfg: ScenarioConfig) -> int:
    graph = TeachGraph.load(args.graph)
    world = load_world(args, cfg)
    runs = _run_dirs(args.runs)
    if not runs:
        raise ConfigError("finetune needs at least one completed repeat run")
    p = cfg.finetune_params()
    seed = cfg.scenario.seed
    lib = SampleLibrary(r_a=p.r_a)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_windows = []
    span = world.meta.get("change_span") if cfg.finetune.use_change_labels else None
    for k, rd in enumerate(runs):
        rg = RepeatGraph.load(rd, load_frames=True)
        if any(n.radar is None for n in rg.nodes):
            raise ConfigError(f"{rd}: repeat frames missing; rerun repeat with --keep-frames")
        drifts, pos = drift_series(rg, graph)
        windows, neg = classify_windows(drifts, pos, p.window, p.stride, p.a, p.b, p.classifier_orientation)
        if span is not None:
            neg = sorted(set(neg) | set(change_windows(windows, pos, span)))
        lib.update(k, windows, neg, rg, seed)
        all_windows.extend((k, w) for w in windows)
    triggered = should_finetune(lib, p.tau_mu, p.L_min)
    base = _load_correction(args.correction) or CorrectionModel()
    summary = {"runs": [r.name for r in runs], "negatives": len(lib.negatives), "positives": len(lib.positives),
               "negative_length": float(sum(w.length for _, w in lib.neg_windows)), "triggered": triggered}
    per_node = {}
    if triggered:
        stream = TeachStream(world, graph.truth or graph.odometry, graph.odometry, int(graph.meta.get("seed", seed)),
                             cfg.lidar_spec(), cfg.radar_spec(), cfg.render_config(), 0, cfg.params.v_i)
        ft = finetune_step(lib, base, anchor_maps(graph, stream), p, seed)
        base = ft.correction
        per_node = ft.per_node
        summary.update({"loss_before": ft.loss_before, "loss_after": ft.loss_after, "skipped": ft.skipped,
                        "history": ft.history})
        log.info("fine-tune triggered: loss %.6f -> %.6f over %d nodes", ft.loss_before, ft.loss_after,
                 len(per_node))
    else:
        log.info("fine-tune not triggered (negative length %.1f m)", summary["negative_length"])
    _dump(out / "correction.json", base.to_dict())
    _dump(out / "finetune.json", summary)
    write_report_csv(out / "finetune.csv", [w for _, w in all_windows], per_node)
    return EXIT_OK


def cmd_report(args, cfg: ScenarioConfig) -> int:
    runs = _run_dirs(args.runs)
    if not runs:
        raise EvaluationError("empty run list")
    graph = TeachGraph.load(args.graph)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for r in runs:
        rep, traj, truth = _evaluate(graph, r)
        reports.append(rep)
        error_map_svg(traj, truth, out / f"{r.parent.name}_{r.name}_error_map.svg")
    write_reports_json(reports, out / "runs.json")
    write_reports_csv(reports, out / "runs.csv")
    table = table_comparison()
    _dump(out / "node_selection_table.json", table)
    with open(out / "node_selection_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config (INI with JSON values, or JSON)")
    common.add_argument("--seed", type=int, help="overrides scenario.seed")
    common.add_argument("--backend", choices=("oracle", "icp"), help="overrides scenario.backend")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--preset", help=f"overrides scenario.preset ({', '.join(sorted(PRESETS))})")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="teachrepeat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    world = sub.add_parser("world", help="world files")
    wsub = world.add_subparsers(dest="world_command", required=True)
    wsub.add_parser("gen", parents=[common], help="generate a world file").set_defaults(func=cmd_world_gen)

    t = sub.add_parser("teach", parents=[common], help="record a teach run and build the graph")
    t.add_argument("--world", help="world file (default: generate from the preset)")
    t.set_defaults(func=cmd_teach)

    r = sub.add_parser("repeat", parents=[common], help="closed-loop repeat runs along a teach graph")
    r.add_argument("--graph", required=True, help="teach graph directory or graph.json")
    r.add_argument("--world", help="world file (default: generate from the preset)")
    r.add_argument("--correction", help="correction model JSON from 'finetune'")
    r.add_argument("--keep-frames", action="store_true", help="store repeat radar frames (needed by finetune)")
    r.set_defaults(func=cmd_repeat)

    e = sub.add_parser("evaluate", parents=[common], help="ATE/YAE reports for repeat runs")
    e.add_argument("--graph", required=True)
    e.add_argument("runs", nargs="*", help="run directories, or directories holding run_* subdirectories")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("finetune", parents=[common], help="drift-triggered correction update")
    f.add_argument("--graph", required=True)
    f.add_argument("--world", help="world file (default: generate from the preset)")
    f.add_argument("--correction", help="starting correction model JSON")
    f.add_argument("runs", nargs="*")
    f.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", parents=[common], help="run tables, node-selection comparison, error maps")
    p.add_argument("--graph", required=True)
    p.add_argument("runs", nargs="*")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        if args.func in (cmd_evaluate, cmd_report):
            log.error("evaluation error: %s", e)
            return EXIT_EVAL
        log.error("input error: %s", e)
        return EXIT_CONFIG
    except InitializationError as e:
        log.error("initialization failed: %s", e)
        return EXIT_INIT
    except EvaluationError as e:
        log.error("evaluation error: %s", e)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
