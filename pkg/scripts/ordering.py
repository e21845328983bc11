"""Median score-truth correlations and median population validation curves per method.

    python3 scripts/ordering.py setting1_contrast setting2_poisson setting4_large --replicates 50
"""

import argparse
import time

from ratiocate.sim.study import METHODS, StudyConfig, run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("settings", nargs="+")
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/ordering")
    args = ap.parse_args()

    for setting in args.settings:
        cfg = StudyConfig(n=args.n, replicates=args.replicates, seed=args.seed, jobs=args.jobs)
        t0 = time.perf_counter()
        res = run_study(setting, cfg)
        print(f"{setting}: {time.perf_counter() - t0:.0f}s, failures {res.failure_counts()}")
        for m in METHODS:
            print(f"  {m:>15}  pearson {res.median_correlation(m):.3f}  spearman {res.median_correlation(m, 'spearman'):.3f}")
        curves = res.median_curves()
        print("  q      " + " ".join(f"{k:>14}" for k in curves))
        for i, q in enumerate(cfg.q_grid):
            print(f"  {q:<6.1f} " + " ".join(f"{v[i]:>14.3f}" for v in curves.values()))
        res.write_csvs(args.out)


if __name__ == "__main__":
    main()
