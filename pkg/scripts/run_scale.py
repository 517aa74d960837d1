"""Team-size sweep: drift exponents for stale vs fresh rollouts, plus the closed-form fits."""
import argparse

from teamtr.config import load_config
from teamtr.diagnostics import analytic_scaling
from teamtr.experiments import scale_mode


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="scale-stop-chain")
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    args = ap.parse_args()
    cfg = load_config(args.config)
    seeds = args.seeds if args.seeds is not None else [cfg.seed + s for s in cfg.scale.seeds]
    closed = analytic_scaling(range(2, 9))
    print(f"closed form over n=2..8: fresh {closed['fresh'].alpha:.4f}  stale {closed['stale'].alpha:.4f}")
    for mode in cfg.scale.modes:
        res = scale_mode(cfg, mode, seeds)
        s = res.summary()
        print(f"{mode:8s} alpha_delta {s['alpha_delta']:.3f} +- {s['alpha_delta_se']:.3f}  "
              f"alpha_drift {s['alpha_drift']:.3f} +- {s['alpha_drift_se']:.3f}")
        for n, d, t in zip(res.n_values, res.delta_sum.mean(axis=0), res.drift_sum.mean(axis=0)):
            print(f"    n={n}  delta_sum {d:.3e}  drift_sum {t:.3e}")


if __name__ == "__main__":
    main()
