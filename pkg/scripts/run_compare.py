"""Final exact return and stage-variance per schedule under common random numbers."""
import argparse

from teamtr.config import load_config
from teamtr.experiments import compare_cell, compare_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="compare-handoff")
    ap.add_argument("--seeds", type=int, default=None, help="use only the first N seeds")
    args = ap.parse_args()
    cfg = load_config(args.config)
    seeds = [cfg.seed + s for s in cfg.compare.seeds][: args.seeds]
    modes = cfg.compare.modes
    cells = [compare_cell(cfg, m, s) for m in modes for s in seeds]
    summ = compare_summary(cells, modes, cfg.compare.chain)
    for m, v in summ["modes"].items():
        print(f"{m:16s} final J {v['final_j_mean']:.4f}  stage dJ var {v['stage_dj_var']:.2e}  "
              f"sound={v['certificates_sound']}")
    for k, v in summ["ordering"].items():
        print(f"P[{k}] = {v:.2f}")
    print("largest stage variance:", summ["largest_stage_variance"])


if __name__ == "__main__":
    main()
