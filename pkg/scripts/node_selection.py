"""Adaptive teach graph against every fixed distance/yaw baseline on the 200 m loop."""
import argparse

from teachrepeat.experiments import node_selection_experiment
from teachrepeat.metrics import BASELINE_GRID


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=1, help="noisy-oracle repeat runs per graph")
    args = ap.parse_args()
    seeds = tuple(range(args.repeats))
    print(f"{'graph':<21} {'nodes':>5} {'ATE m':>7} {'success':>8} {'EWA_ATE':>8}")
    adaptive_printed = False
    for d, a in BASELINE_GRID:
        adaptive, fixed = node_selection_experiment(args.seed, seeds, (d, a))
        rows = [fixed] if adaptive_printed else [adaptive, fixed]
        adaptive_printed = True
        for r in rows:
            ok = sum(r.success)
            ewa_ate = f"{r.ewa_ate:8.3f}" if ok == len(r.success) else "       -"
            print(f"{r.label:<21} {r.nodes:>5} {sum(r.ate) / len(r.ate):7.4f} {ok:>4}/{len(r.success):<3} {ewa_ate}")
        if rows[0] is adaptive:
            print(f"  adaptive global interpolation error {adaptive.global_error:.4f} m")


if __name__ == "__main__":
    main()
