"""Experiment cells shared by the CLI, the scripts and the acceptance tests.

Each cell is a pure function of (config, seed, ...) returning plain data, so
cells can run in worker processes and be aggregated in a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial

import numpy as np

from . import rng as rngmod
from .certificate import CertificateConfig, sampled_stage_certificate, single_step_bound, stage_certificate
from .config import RunConfig
from .diagnostics import ess_summary, scaling_sweep
from .env import StateSpace
from .errors import ConfigError, NumericalError
from .exact import exact_return
from .plugswap import SwapConfig, apply_swap
from .policy import init_agent, init_team
from .trainer import MODES, train


def parse_mode(name: str) -> tuple[str, int]:
    """'resample-3' -> ('resample-k', 3); other names pass through with k = 1."""
    if name.startswith("resample-") and name != "resample-k":
        try:
            k = int(name.split("-", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad resample mode {name!r}") from exc
        if k < 1:
            raise ConfigError("resample interval must be >= 1")
        return "resample-k", k
    if name not in MODES:
        raise ConfigError(f"unknown mode {name!r}")
    return name, 1


def build_team(cfg: RunConfig, space: StateSpace, seed: int):
    bias = np.asarray(cfg.team.init_bias, float) if cfg.team.init_bias else None
    r = rngmod.stream(seed, "init") if cfg.team.init_scale > 0 else None
    return init_team(space, cfg.team.init_scale, r, bias)


def plan_for(cfg: RunConfig, mode_name: str | None = None):
    if mode_name is None:
        return cfg.plan.to_plan()
    mode, k = parse_mode(mode_name)
    plan = cfg.plan.to_plan(mode)
    return replace(plan, resample_every=k) if mode == "resample-k" else plan


def cert_config(cfg: RunConfig, space: StateSpace, a_max: float) -> CertificateConfig:
    return CertificateConfig(space.gamma, a_max, cfg.advantage.a_clip, cfg.ppo.ppo_eps,
                             cfg.cert.confidence_delta, cfg.cert.zeta_mode)


def stage_records(logs, cfg: RunConfig, space: StateSpace, mode: str) -> list[dict]:
    """Per-stage certificates: exact inputs with realized A_max, exact inputs with the 2R/(1-g) cap, sampled inputs."""
    cap = 2 * space.env.r_max / (1 - space.gamma)
    out = []
    for k in sorted({l.stage for l in logs}):
        st = [l for l in logs if l.stage == k]
        if mode == "joint":
            out.append(_joint_record(st, space, cap))
            continue
        exact = stage_certificate(st, cert_config(cfg, space, max(l.a_max for l in st)), mode)
        capped = stage_certificate([replace(l, a_max=cap) for l in st], cert_config(cfg, space, cap), mode)
        sampled = sampled_stage_certificate(st, cert_config(cfg, space, cap))
        out.append({
            "stage": k, "j_start": st[0].j_before, "j_end": st[-1].j_after, "delta_j": exact.realized,
            "lb_exact": exact.lower_bound, "lb_exact_cap": capped.lower_bound, "lb_sampled": sampled.lower_bound,
            "violation_exact": exact.violation, "violation_cap": capped.violation,
            "violation_sampled": sampled.violation,
            "terms_exact": exact.terms, "terms_cap": capped.terms, "terms_sampled": sampled.terms,
            "per_step_exact": exact.per_step,
        })
    return out


def _joint_record(st, space, cap) -> dict:
    """Simultaneous update: one single-step bound on the summed per-agent surrogates and the team KL."""
    L = sum(l.l_seq_exact for l in st)
    kl = max(st[0].kl_exact, 0.0)
    dj = st[0].j_after - st[0].j_before
    exact = single_step_bound(L, kl, max(l.a_max for l in st), space.gamma)
    capped = single_step_bound(L, kl, cap, space.gamma)
    return {"stage": st[0].stage, "j_start": st[0].j_before, "j_end": st[0].j_after, "delta_j": dj,
            "lb_exact": exact["lower_bound"], "lb_exact_cap": capped["lower_bound"], "lb_sampled": None,
            "violation_exact": bool(dj < exact["lower_bound"] - 1e-10),
            "violation_cap": bool(dj < capped["lower_bound"] - 1e-10), "violation_sampled": None,
            "terms_exact": exact, "terms_cap": capped, "terms_sampled": {}, "per_step_exact": []}


@dataclass
class RunOutput:
    team: object
    logs: list
    returns: list
    j0: float
    stages: list


def run_training(cfg: RunConfig, seed: int, mode_name: str | None = None, n_stages: int | None = None,
                 records=None) -> RunOutput:
    space = StateSpace(cfg.env_config())
    team = build_team(cfg, space, seed)
    plan = plan_for(cfg, mode_name)
    j0 = exact_return(team)
    n_stages = cfg.run.n_stages if n_stages is None else n_stages
    current = {"stage": 0}

    def mark(k, _res):
        current["stage"] = k

    try:
        team, logs, returns = train(team, plan, cfg.advantage, cfg.ppo, seed, n_stages, cfg.run.exact_logging,
                                    callback=mark, records=records)
    except NumericalError as exc:
        raise NumericalError(f"stage {current['stage'] + 1}: {exc}") from exc
    stages = stage_records(logs, cfg, space, plan.mode) if cfg.run.exact_logging else []
    return RunOutput(team, logs, returns, j0, stages)


def compare_cell(cfg: RunConfig, mode_name: str, seed: int) -> dict:
    out = run_training(cfg, seed, mode_name)
    return {
        "mode": mode_name, "seed": seed, "j0": out.j0, "returns": list(out.returns),
        "sound": all(not s["violation_exact"] for s in out.stages),
        "gap_hat": [l.gap_hat for l in out.logs], "gap_exact": [l.gap_exact for l in out.logs],
        "step": [l.step for l in out.logs], "ess": [l.ess for l in out.logs],
    }


def compare_summary(cells, modes, chain=()) -> dict:
    by = {m: [c for c in cells if c["mode"] == m] for m in modes}
    final = {m: np.array([c["returns"][-1] for c in v]) for m, v in by.items()}
    out = {"modes": {}, "ordering": {}}
    for m, v in by.items():
        traces = np.array([[c["j0"]] + c["returns"] for c in v])
        dj = np.diff(traces, axis=1)
        out["modes"][m] = {
            "final_j_mean": float(final[m].mean()),
            "final_j_median": float(np.median(final[m])),
            # within-run spread of per-stage improvements, averaged over runs
            "stage_dj_var": float(dj.var(axis=1, ddof=1).mean()) if dj.shape[1] > 1 else 0.0,
            "stage_dj_std": float(dj.std(axis=1, ddof=1).mean()) if dj.shape[1] > 1 else 0.0,
            "certificates_sound": all(c["sound"] for c in v),
            "n_runs": len(v),
        }
    for a, b in zip(modes, modes[1:]):
        out["ordering"][f"{a}>={b}"] = float(np.mean(final[a] >= final[b] - 1e-12))
    if len(chain) >= 2:
        ok = np.ones(len(final[chain[0]]), bool)
        for a, b in zip(chain, chain[1:]):
            ok &= final[a] >= final[b] - 1e-12
        out["ordering"][" >= ".join(chain)] = float(ok.mean())
    var = {m: v["stage_dj_var"] for m, v in out["modes"].items()}
    out["largest_stage_variance"] = max(var, key=var.get)
    return out


def _family(cfg: RunConfig, n: int):
    return cfg.env_config(n)


def _build(cfg: RunConfig, seed: int, space, mode: str):
    return build_team(cfg, space, seed), plan_for(cfg, mode), cfg.advantage, cfg.ppo


def scale_mode(cfg: RunConfig, mode: str, seeds, map_fn=map):
    if len(set(cfg.scale.n_values)) < 4:
        raise ConfigError("scale.n_values needs at least 4 distinct team sizes")
    return scaling_sweep(cfg.scale.n_values, partial(_family, cfg), mode, cfg.scale.stages, list(seeds),
                         partial(_build, cfg, 0), map_fn)


def swap_cell(cfg: RunConfig, seed: int) -> dict:
    """Train to the swap point, then install one incoming agent under every strategy and keep training."""
    sw = cfg.swap
    total = cfg.run.n_stages
    if not 0 <= sw.at_stage < total:
        raise ConfigError("swap.at_stage must be below run.n_stages")
    space = StateSpace(cfg.env_config())
    if not 0 <= sw.agent < space.env.n_agents:
        raise ConfigError("swap.agent outside the team")
    plan = plan_for(cfg, "teamtr")
    team = build_team(cfg, space, seed)
    pre_returns = [exact_return(team)]
    if sw.at_stage:
        team, _, rets = train(team, plan, cfg.advantage, cfg.ppo, seed, sw.at_stage)
        pre_returns += rets
    incoming = init_agent(space, sw.agent, sw.incoming_scale, rngmod.stream(seed, "swap"))
    result = {"seed": seed, "pre": pre_returns, "strategies": {}}
    for strat in sw.strategies:
        scfg = SwapConfig(strat, sw.probe_size, sw.delta_align, sw.align_lr, sw.align_max_steps)
        swapped, rep = apply_swap(team, sw.agent, incoming, scfg, rngmod.stream(seed, "probe"))
        _, logs, rets = train(swapped, plan, cfg.advantage, cfg.ppo, seed, total - sw.at_stage,
                              first_stage=sw.at_stage + 1)
        stages = stage_records(logs, cfg, space, "teamtr")
        result["strategies"][strat] = {
            "report": rep.as_dict(), "post": [rep.j_after] + rets,
            "sound": all(not s["violation_exact"] for s in stages),
        }
    return result


def swap_summary(cells, strategies) -> dict:
    out = {}
    for s in strategies:
        reps = [c["strategies"][s]["report"] for c in cells]
        ok = [r for r in reps if r["converged"]]
        out[s] = {
            "median_shock": float(np.median([r["shock"] for r in reps])),
            "median_final_j": float(np.median([c["strategies"][s]["post"][-1] for c in cells])),
            "post_certificates_sound": all(c["strategies"][s]["sound"] for c in cells),
            "align_success": len(ok), "max_probe_kl_success": max((r["probe_kl_after"] for r in ok), default=None),
        }
    return out


def ess_table(logs) -> list[dict]:
    """ESS summary per number of already-updated agents (rows only for weighted updates)."""
    rows = []
    for u in sorted({l.n_updated_before for l in logs}):
        vals = np.array([l.ess for l in logs if l.n_updated_before == u])
        rows.append({"n_updated": u, "median_ess": float(np.median(vals)),
                     "p10_ess": float(np.quantile(vals, 0.1)), "n": int(vals.size)})
    return rows


__all__ = ["parse_mode", "build_team", "plan_for", "run_training", "compare_cell", "compare_summary",
           "scale_mode", "swap_cell", "swap_summary", "stage_records", "ess_table", "ess_summary"]
