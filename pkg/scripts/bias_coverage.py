"""Bias and Wald coverage of the contrast estimator on settings 1 and 2.

    python3 scripts/bias_coverage.py --replicates 400 --out results/bias_coverage
"""

import argparse
import time

from ratiocate.sim.study import StudyConfig, run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--replicates", type=int, default=400)
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--learner", default="boosted", choices=["boosted", "glm"])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/bias_coverage")
    args = ap.parse_args()

    for setting in ("setting1_contrast", "setting2_poisson"):
        cfg = StudyConfig(
            n=args.n,
            replicates=args.replicates,
            seed=args.seed,
            methods=("contrast",),
            learner=args.learner,
            curves=False,
            jobs=args.jobs,
        )
        t0 = time.perf_counter()
        res = run_study(setting, cfg)
        print(f"{setting}: {args.replicates} replicates in {time.perf_counter() - t0:.0f}s, failures {res.failure_counts()}")
        print(f"{'term':>10} {'delta0':>8} {'bias':>8} {'emp.sd':>8} {'mean.se':>8} {'cover':>6}")
        for row in res.bias_coverage_table():
            print(
                f"{row['term']:>10} {row['delta0']:>8.3f} {row['bias']:>+8.4f} {row['empirical_sd']:>8.4f}"
                f" {row['mean_se']:>8.4f} {row['coverage']:>6.3f}"
            )
        res.write_csvs(args.out)


if __name__ == "__main__":
    main()
