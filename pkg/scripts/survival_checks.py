"""Survival checks: spurious hazard ratios, censoring rates and the RMTL method ordering.

    python3 scripts/survival_checks.py --replicates 50
"""

import argparse

from ratiocate.sim.dgp import censoring_rate, generate, get_setting
from ratiocate.sim.study import METHODS, StudyConfig, run_study
from ratiocate.survival import check_spurious_hr


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/survival")
    args = ap.parse_args()

    for scale in (1.0, 2.0):
        hr = check_spurious_hr(100_000, args.seed, baseline_scale=scale)
        print(f"spurious HR, baseline scale {scale:g}: beta1 {hr['beta1']:.3f}  beta0 {hr['beta0']:.3f}")
    for name in ("surv1", "surv2"):
        rate = censoring_rate(generate(get_setting(name), 100_000, args.seed))
        print(f"{name}: censoring rate {rate:.3f}")
    for name in ("surv1", "surv2"):
        res = run_study(name, StudyConfig(n=args.n, replicates=args.replicates, seed=args.seed))
        meds = {m: res.median_correlation(m) for m in METHODS}
        print(f"{name}: " + "  ".join(f"{m} {v:.3f}" for m, v in meds.items()) + f"  failures {res.failure_counts()}")
        res.write_csvs(args.out)


if __name__ == "__main__":
    main()
