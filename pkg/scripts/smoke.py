"""Teach in clear air, repeat through smoke with the cross-modal, radar-only and LiDAR variants."""
import argparse

from teachrepeat.experiments import smoke_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--variants", nargs="+", default=["cross_modal", "radar_only", "lidar"])
    args = ap.parse_args()
    print(f"{'variant':<12} {'seed':>4} {'success':>8} {'distance m':>10} {'ATE m':>7}  cause")
    for r in smoke_experiment(tuple(range(args.seeds)), variants=tuple(args.variants)):
        print(f"{r.variant:<12} {r.seed:>4} {str(r.success):>8} {r.distance:10.1f} {r.ate:7.4f}  {r.cause or ''}")


if __name__ == "__main__":
    main()
