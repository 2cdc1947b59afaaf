"""Scene change, drift-triggered library collection and the correction update, for several loss weights."""
import argparse
from dataclasses import replace

from teachrepeat.experiments import change_experiment
from teachrepeat.finetune import FinetuneParams


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lam", type=float, nargs="+", default=[0.0, 0.5],
                    help="weights of the structural term")
    args = ap.parse_args()
    for lam in args.lam:
        e = change_experiment(args.seed, params=replace(FinetuneParams(), lam=lam))
        print(f"lambda {lam}: {e.runs} runs, classifier negatives {e.negatives_as_written} as written / "
              f"{e.negatives_flipped} flipped, labelled length {e.labelled_length:.0f} m, triggered {e.triggered}")
        print(f"  changed segment ATE {e.segment_ate_before:.4f} -> {e.segment_ate_after:.4f} m "
              f"({100 * e.ate_reduction:.0f}% lower); elsewhere {e.control_ate_before:.4f} -> "
              f"{e.control_ate_after:.4f} m")
        print(f"  unchanged-node max bias shift {e.max_unchanged_shift():.4f} m; changed-node y biases "
              + ", ".join(f"{n}: {y:+.3f}" for n, y in e.changed_bias_y().items()))
        print(f"  loss {e.loss_history[0]:.5f} -> {e.loss_history[-1]:.5f} in {len(e.loss_history) - 1} epochs, "
              f"{e.seconds:.0f} s")
        for note in e.notes:
            print(f"  note: {note}")


if __name__ == "__main__":
    main()
