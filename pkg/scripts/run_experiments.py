"""Run Exp.1 and/or Exp.2 on phantoms over several seeds and print Dice tables.

    python scripts/run_experiments.py --exp exp1 exp2 --seeds 0 1 2
"""

import argparse
import time

import numpy as np

from styleinv.pipeline import ExperimentConfig, make_splits, run_exp1, run_exp2, summary_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--exp", nargs="+", default=["exp1", "exp2"], choices=["exp1", "exp2"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = ap.parse_args()

    cfg = ExperimentConfig()
    means = {}
    for seed in args.seeds:
        splits = make_splits(cfg, seed)
        st_params = None
        for exp in args.exp:
            t0 = time.perf_counter()
            runner = run_exp1 if exp == "exp1" else run_exp2
            res = runner(cfg, seed, splits, st_params=st_params)
            st_params = res.st_params  # same data and seed, so reuse across experiments
            print(f"== {exp} seed {seed} ({time.perf_counter() - t0:.0f} s)")
            print(summary_table(res.reports))
            for variant, by_vendor in res.reports.items():
                for v, rep in by_vendor.items():
                    means.setdefault((variant, v), []).append(rep.get("Dice"))
    print("== mean Dice over seeds")
    for (variant, v), vals in sorted(means.items()):
        print(f"{variant:<12} {v}  {np.mean(vals):6.2f}  ({', '.join(f'{x:.2f}' for x in vals)})")


if __name__ == "__main__":
    main()
