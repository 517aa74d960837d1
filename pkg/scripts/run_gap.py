"""Per-step exact surrogate gap between intermediate and stage-start occupancy."""
import argparse

import numpy as np

from teamtr.config import load_config
from teamtr.diagnostics import gap_by_step
from teamtr.experiments import run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="gap-stale")
    ap.add_argument("--mode", default="stale")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    cfg = load_config(args.config)
    logs = []
    for s in args.seeds:
        logs += run_training(cfg, s, args.mode).logs
    for step, gaps in sorted(gap_by_step(logs).items()):
        print(f"step {step}: median gap {np.median(gaps):.3e}  p90 {np.quantile(gaps, 0.9):.3e}  n={gaps.size}")


if __name__ == "__main__":
    main()
