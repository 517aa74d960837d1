"""Command-line runner: train, compare, scale, swap, report.

Exit codes: 0 success, 2 config/usage error, 3 numerical or estimation
failure, 4 state-space capacity exceeded.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import load_config, preset_names
from .diagnostics import analytic_scaling, calibration, logit_shift_table, median_by_step
from .env import StateSpace
from .errors import TeamTRError, ValidationError
from .exact import exact_occupancy
from .experiments import (build_team, compare_cell, compare_summary, ess_table, run_training, scale_mode,
                          swap_cell, swap_summary)
from .io import export_states, read_csv, read_json, write_csv, write_json
from .policy import load_team, save_team

STAGE_COLUMNS = ["stage", "j_start", "j_end", "delta_j", "lb_exact", "lb_exact_cap", "lb_sampled",
                 "violation_exact", "violation_cap", "violation_sampled"]


def _versions() -> dict:
    return {"teamtr": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _mapper(threads: int):
    if threads <= 1:
        return map, None
    pool = ProcessPoolExecutor(max_workers=threads)
    return pool.map, pool


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=True))
    return cfg, out


def _seeds(cfg, listed):
    return [cfg.seed + int(s) for s in listed]


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    space = StateSpace(cfg.env_config())
    res = run_training(cfg, cfg.seed)
    rows = [l.as_dict() for l in res.logs]
    write_csv(out / "updates.csv", "updates", rows)
    write_csv(out / "stages.csv", "stages", res.stages, STAGE_COLUMNS)
    write_csv(out / "calibration.csv", "calibration",
              [{"stage": s["stage"], "delta_j": s["delta_j"], "lower_bound": s["lb_exact"],
                "violation": s["violation_exact"]} for s in res.stages],
              ["stage", "delta_j", "lower_bound", "violation"])
    write_json(out / "certificates.json", "certificates", {"stages": res.stages})
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    save_team(res.team, ck / f"stage_{cfg.run.n_stages:03d}.policy")
    export_states(space, out / "states.csv")
    cal = calibration([s["lb_exact"] for s in res.stages], [s["delta_j"] for s in res.stages])
    summary = {
        "config_hash": cfg.digest(), "seed": cfg.seed, "mode": cfg.plan.mode, "n_states": space.n_states,
        "j_trace": [res.j0] + list(res.returns), "calibration": cal,
        "certificate_violations": {k: int(sum(bool(s[k]) for s in res.stages))
                                   for k in ("violation_exact", "violation_cap", "violation_sampled")},
        "gap_median_by_step": {"sampled": median_by_step(res.logs, "gap_hat"),
                               "exact": median_by_step(res.logs, "gap_exact")},
        "ess_by_updated": ess_table(res.logs),
        "truncation_error_bound": space.truncation_error_bound(),
        "versions": _versions(),
    }
    write_json(out / "summary.json", "summary", summary)
    print(f"J {res.j0:.6f} -> {res.returns[-1]:.6f} over {cfg.run.n_stages} stages; artifacts in {out}")
    return 0


def cmd_compare(args) -> int:
    cfg, out = _prepare(args)
    modes = list(cfg.compare.modes)
    if len(modes) < 2:
        raise ValidationError("compare needs at least two modes")
    seeds = _seeds(cfg, cfg.compare.seeds)
    jobs = [(m, s) for m in modes for s in seeds]
    mapper, pool = _mapper(args.threads)
    try:
        cells = list(mapper(_compare_job, [(cfg, m, s) for m, s in jobs]))
    finally:
        if pool:
            pool.shutdown()
    rows = [{"mode": c["mode"], "seed": c["seed"], "stage": k, "j": j}
            for c in cells for k, j in enumerate([c["j0"]] + c["returns"])]
    write_csv(out / "compare.csv", "compare", rows, ["mode", "seed", "stage", "j"])
    summary = compare_summary(cells, modes, list(cfg.compare.chain))
    summary.update(config_hash=cfg.digest(), seeds=seeds, versions=_versions())
    write_json(out / "compare.json", "compare", summary)
    for m, v in summary["modes"].items():
        print(f"{m:18s} final J median {v['final_j_median']:.6f}  sound={v['certificates_sound']}")
    return 0


def _compare_job(args):
    return compare_cell(*args)


def cmd_scale(args) -> int:
    cfg, out = _prepare(args)
    seeds = _seeds(cfg, cfg.scale.seeds)
    mapper, pool = _mapper(args.threads)
    rows, fits = [], {}
    try:
        for mode in cfg.scale.modes:
            res = scale_mode(cfg, mode, seeds, mapper)
            fits[mode] = res.summary()
            for si, s in enumerate(seeds):
                for ni, n in enumerate(res.n_values):
                    for metric, arr in (("delta", res.delta_sum), ("drift", res.drift_sum),
                                        ("delta_literal", res.literal_delta), ("drift_literal", res.literal_drift)):
                        rows.append({"mode": mode, "n": n, "seed": s, "metric": metric, "value": float(arr[si, ni])})
    finally:
        if pool:
            pool.shutdown()
    write_csv(out / "scale.csv", "scale", rows, ["mode", "n", "seed", "metric", "value"])
    closed = analytic_scaling(list(range(2, 9)))
    summary = {"fits": fits, "closed_form": {k: v.alpha for k, v in closed.items()},
               "config_hash": cfg.digest(), "seeds": seeds, "versions": _versions()}
    write_json(out / "scale.json", "scale", summary)
    for mode, f in fits.items():
        print(f"{mode:10s} alpha_delta {f['alpha_delta']:.3f}  alpha_drift {f['alpha_drift']:.3f}")
    return 0


def cmd_swap(args) -> int:
    cfg, out = _prepare(args)
    seeds = _seeds(cfg, cfg.swap.seeds)
    mapper, pool = _mapper(args.threads)
    try:
        cells = list(mapper(partial(swap_cell, cfg), seeds))
    finally:
        if pool:
            pool.shutdown()
    rows = []
    for c in cells:
        for strat, v in c["strategies"].items():
            trace = c["pre"] + v["post"]
            for k, j in enumerate(trace):
                rows.append({"strategy": strat, "seed": c["seed"], "point": k, "j": j})
    write_csv(out / "swap.csv", "swap", rows, ["strategy", "seed", "point", "j"])
    summary = {"strategies": swap_summary(cells, cfg.swap.strategies),
               "reports": [{"seed": c["seed"], **{s: v["report"] for s, v in c["strategies"].items()}} for c in cells],
               "config_hash": cfg.digest(), "versions": _versions()}
    write_json(out / "swap.json", "swap", summary)
    for s, v in summary["strategies"].items():
        print(f"{s:8s} median shock {v['median_shock']:.6f}  post-swap certificates sound={v['post_certificates_sound']}")
    return 0


REPORT_INPUTS = ("summary.json", "updates.csv", "stages.csv", "config.yaml")


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    missing = [f for f in REPORT_INPUTS if not (run / f).exists()]
    if missing:
        raise ValidationError(f"{run}: missing required files: {', '.join(missing)}")
    summary = read_json(run / "summary.json", "summary")
    updates = read_csv(run / "updates.csv", "updates")
    stages = read_csv(run / "stages.csv", "stages")
    cfg = load_config(run / "config.yaml")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)

    lb = [float(s["lb_exact"]) for s in stages]
    dj = [float(s["delta_j"]) for s in stages]
    cal = calibration(lb, dj)
    cal["violation_rate_all"] = float(np.mean(np.array(dj) < np.array(lb) - 1e-10)) if lb else None
    steps = sorted({int(u["step"]) for u in updates})
    gap = {str(i): {"sampled": float(np.median([float(u["gap_hat"]) for u in updates if int(u["step"]) == i])),
                    "exact": float(np.median([float(u["gap_exact"]) for u in updates if int(u["step"]) == i]))}
           for i in steps}
    kl_mon = np.array([float(u["kl_monitor"]) for u in updates])
    kl_ex = np.array([float(u["kl_exact"]) for u in updates])
    hi = float(max(kl_mon.max(initial=0), kl_ex.max(initial=0), 1e-12))
    edges = np.linspace(0.0, hi, 11)
    hist = {"edges": edges, "monitor": np.histogram(np.clip(kl_mon, 0, hi), edges)[0],
            "exact": np.histogram(np.clip(kl_ex, 0, hi), edges)[0]}

    shifts = []
    ck = sorted((run / "checkpoints").glob("*.policy")) if (run / "checkpoints").exists() else []
    if ck:
        space = StateSpace(cfg.env_config())
        before = build_team(cfg, space, int(summary["seed"]))
        after = load_team(ck[-1], space)
        d = exact_occupancy(before).dist
        for j in range(space.env.n_agents):
            idx = np.flatnonzero(space.active == j)
            if idx.size == 0:
                continue
            s = int(idx[np.argmax(d[idx])])
            p0 = before.agents[j].token_probs()[space.row(s, ())]
            p1 = after.agents[j].token_probs()[space.row(s, ())]
            shifts.append({"agent": j, "state": s, **logit_shift_table(p0, p1)})

    report = {"run": summary.get("config_hash"), "calibration": cal, "gap_by_step": gap,
              "kl_histogram": hist, "logit_shift": shifts, "j_trace": summary.get("j_trace")}
    write_json(out / "report.json", "report", report)
    write_csv(out / "report.csv", "calibration",
              [{"stage": s["stage"], "delta_j": s["delta_j"], "lower_bound": s["lb_exact"],
                "violation": s["violation_exact"]} for s in stages],
              ["stage", "delta_j", "lower_bound", "violation"])
    vr = cal["violation_rate_all"]
    print(f"report for {run}: {len(stages)} stages, violation rate {vr}, spearman {cal['spearman']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="teamtr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("compare", cmd_compare), ("scale", cmd_scale), ("swap", cmd_swap)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help=f"YAML file or preset ({', '.join(preset_names())})")
        sp.add_argument("--seed", type=int, default=None, help="override the root seed")
        sp.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
        sp.set_defaults(fn=fn)
    rp = sub.add_parser("report")
    rp.add_argument("run_dir")
    rp.add_argument("--out", default=None)
    rp.add_argument("--threads", type=int, default=1)
    rp.set_defaults(fn=cmd_report)
    sub.add_parser("presets").set_defaults(fn=lambda a: print("\n".join(preset_names())) or 0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.fn(args))
    except TeamTRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except yaml.YAMLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
