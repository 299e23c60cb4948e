"""Run the full pipeline on a config (default: configs/default.yaml) and print the headline numbers."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from avgflow import pipeline  # noqa: E402

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=os.path.join(HERE, "..", "configs", "default.yaml"))
    p.add_argument("--out", default="runs")
    args = p.parse_args()
    root = pipeline.run_experiment(args.config, args.out)
    print(f"artifacts: {root}")
    for name in ("mse_summary.csv", "mse_baseline.csv", "path_discrepancy.csv", "law_report.csv"):
        path = os.path.join(root, "reports", name)
        if os.path.exists(path):
            with open(path) as fh:
                print(f"-- {name}\n{fh.read().strip()}")


if __name__ == "__main__":
    main()
