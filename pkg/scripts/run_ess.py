"""Importance-weight ESS on stage-start rollouts by number of already-updated agents."""
import argparse

from teamtr.config import load_config
from teamtr.experiments import ess_table, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="ess-stale-is")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    cfg = load_config(args.config)
    logs = []
    for s in args.seeds:
        logs += run_training(cfg, s, "stale-is").logs
    for row in ess_table(logs):
        print(f"updated={row['n_updated']}  median ESS/B {row['median_ess']:.4f}  p10 {row['p10_ess']:.4f}")


if __name__ == "__main__":
    main()
