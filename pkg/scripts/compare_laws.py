"""Law comparison between the true averaged dynamics and a fitted drift, for several path counts.

Needs an artifact directory that already holds ``reports/drift_table.csv``
(written by the evaluate stage). Prints W1 and KS at each comparison time.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from avgflow import pipeline  # noqa: E402
from avgflow.config import load_config  # noqa: E402
from avgflow.evaluate import TabulatedDrift, law_comparison_report  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("run_dir")
    p.add_argument("--paths", type=int, nargs="+", default=[100, 1000, 10000])
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    cfg = load_config(os.path.join(args.run_dir, "config.snapshot"))
    if cfg.d != 1:
        sys.exit("compare_laws.py handles one-dimensional runs; use the compare-laws CLI stage otherwise")
    _, rows = pipeline.read_csv(os.path.join(args.run_dir, "reports", "drift_table.csv"))
    table = np.array(rows, float)
    true_drift = TabulatedDrift(table[:, 0], table[:, 1])
    est_drift = TabulatedDrift(table[:, 0], table[:, 2])
    law = cfg.eval.law
    x0 = law.x0 if law.x0 is not None else cfg.data.x0
    print("L,t,median_w1,median_ks")
    for L in args.paths:
        reps = [law_comparison_report(true_drift, est_drift, cfg.model.sigma, x0, law.times, L, law.dt, s)
                for s in range(args.seeds)]
        for i, t in enumerate(law.times):
            print(f"{L},{t:g},{np.median([r.w1[i] for r in reps]):.5f},{np.median([r.ks[i] for r in reps]):.5f}")


if __name__ == "__main__":
    main()
