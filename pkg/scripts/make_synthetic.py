"""Write the bundled synthetic count dataset (train and held-out halves)."""

import argparse
from pathlib import Path

import numpy as np

from ratiocate.data import write_csv
from ratiocate.sim.dgp import generate, get_setting


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--setting", default="setting2_poisson")
    ap.add_argument("--n", type=int, default=1200)
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data"))
    args = ap.parse_args()

    sim = generate(get_setting(args.setting), args.n, args.seed)
    ds = sim.dataset
    half = np.arange(ds.n) < ds.n // 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds.subset(np.flatnonzero(half)), out / "synthetic_train.csv", precision=10)
    write_csv(ds.subset(np.flatnonzero(~half)), out / "synthetic_test.csv", precision=10)
    print(f"wrote {out}/synthetic_train.csv and synthetic_test.csv ({args.setting}, n={ds.n})")


if __name__ == "__main__":
    main()
