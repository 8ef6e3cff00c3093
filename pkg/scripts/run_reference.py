"""Run the reference experiment (baseline + alpha grid, 5 seeds) and print a table.

    python scripts/run_reference.py --cache runs/cache --out runs/reference_summary.csv
"""

import argparse
import csv
import time

from near_ortho.reference import run_reference, summarize_reference


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--cache", default="runs/cache")
    parser.add_argument("--out", default="runs/reference_summary.csv")
    args = parser.parse_args()

    start = time.perf_counter()

    def progress(arm, seed, report):
        print(f"[{time.perf_counter() - start:7.1f}s] {arm[0]:13s} alpha={arm[1]:.2f} seed={seed} "
              f"auroc={report.test_metric:.4f} |cos|={report.geometry_best['mean_abs_cos']:.4f} "
              f"best_epoch={report.best_epoch}", flush=True)

    rows = summarize_reference(run_reference(cache_dir=args.cache, progress=progress))
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"{'method':13s} {'alpha':>5s} {'auroc':>15s} {'|cos|':>7s} {'cos':>7s} {'near90':>6s}")
    for r in rows:
        print(f"{r['method']:13s} {r['alpha']:5.2f} {r['auroc_mean']:.4f} +/- {r['auroc_std']:.4f} "
              f"{r['mean_abs_cos_mean']:7.4f} {r['mean_signed_cos_mean']:7.4f} {r['frac_near_orthogonal_mean']:6.3f}")


if __name__ == "__main__":
    main()
