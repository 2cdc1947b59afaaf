"""Recompute the storage-weighted accuracy columns of the published node-selection table."""
from teachrepeat.metrics import table_comparison


def fmt(v, spec):
    return "   -  " if v is None else format(v, spec)


def main():
    print(f"{'threshold':<10} {'nodes':>5}  {'EWA_ATE':>7} {'pub':>6}  {'EWA_YAE':>7} {'pub':>6}")
    for r in table_comparison():
        flag = ""
        if r["ewa_ate"] is not None and abs(r["ewa_ate"] - r["ewa_ate_published"]) > 0.01:
            flag = "  <- differs from the published value"
        print(f"{r['threshold']:<10} {r['nodes']:>5}  {fmt(r['ewa_ate'], '7.3f')} {fmt(r['ewa_ate_published'], '6.3f')}"
              f"  {fmt(r['ewa_yae'], '7.4f')} {fmt(r['ewa_yae_published'], '6.3f')}{flag}")


if __name__ == "__main__":
    main()
