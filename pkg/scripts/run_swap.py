"""Swap one agent mid-training: direct install, probe-aligned install, or retrain from scratch."""
import argparse

from teamtr.config import load_config
from teamtr.experiments import swap_cell, swap_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="swap-handoff")
    args = ap.parse_args()
    cfg = load_config(args.config)
    cells = [swap_cell(cfg, cfg.seed + s) for s in cfg.swap.seeds]
    for strat, v in swap_summary(cells, cfg.swap.strategies).items():
        extra = f"  converged {v['align_success']}/{len(cells)}" if strat == "aligned" else ""
        print(f"{strat:8s} median shock {v['median_shock']:.5f}  median final J {v['median_final_j']:.4f}  "
              f"sound={v['post_certificates_sound']}{extra}")


if __name__ == "__main__":
    main()
