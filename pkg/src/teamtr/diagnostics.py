"""Post-hoc diagnostics over update logs: drift, scaling fits, weights, calibration."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import EstimationError, ValidationError


@dataclass(frozen=True)
class ScalingFit:
    n_values: tuple
    values: tuple
    alpha: float
    stderr: float
    method: str = "log-log OLS"


def fit_exponent(n_values, values, method: str = "log-log OLS") -> ScalingFit:
    """Least-squares slope of log(value) against log(n).

    ``values`` may be one value per n or a (seeds, len(n)) array; with seeds
    every (n, seed) point enters the regression.
    """
    n = np.asarray(n_values, float)
    y = np.asarray(values, float)
    if len(set(n.tolist())) < 4:
        raise EstimationError("exponent fit needs at least 4 distinct team sizes")
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[1] != n.size:
        raise ValidationError("one value per team size")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise EstimationError("exponent fit needs strictly positive finite values")
    x = np.tile(np.log(n), y.shape[0])
    fit = stats.linregress(x, np.log(y).ravel())
    return ScalingFit(tuple(n.tolist()), tuple(y.mean(axis=0).tolist()), float(fit.slope), float(fit.stderr), method)


def gap_by_step(logs, field: str = "gap_exact") -> dict:
    """Values of ``field`` grouped by within-stage step index."""
    out = defaultdict(list)
    for l in logs:
        out[l.step].append(getattr(l, field))
    return {k: np.array(v) for k, v in sorted(out.items())}


def stage_sums(logs, field: str) -> np.ndarray:
    """Per-stage sum of ``field`` over its updates."""
    out = defaultdict(float)
    for l in logs:
        out[l.stage] += getattr(l, field)
    return np.array([out[k] for k in sorted(out)])


def ess_summary(weights) -> dict:
    """Effective-sample fraction and tail statistics of mean-normalized weights."""
    w = np.asarray(weights, float)
    if w.size == 0 or np.any(w < 0):
        raise ValidationError("weights must be a non-empty non-negative array")
    if w.sum() <= 0:
        raise EstimationError("all weights are zero")
    wn = w / w.mean()
    return {
        "ess_frac": float(w.sum() ** 2 / (w.size * np.sum(w**2))),
        "p95": float(np.quantile(wn, 0.95)),
        "p99": float(np.quantile(wn, 0.99)),
        "max": float(wn.max()),
        "frac_gt10": float(np.mean(wn > 10)),
    }


def calibration(bounds, realized, min_stages: int = 5) -> dict:
    """Rank agreement between predicted lower bounds and realized improvements."""
    b = np.asarray(bounds, float)
    r = np.asarray(realized, float)
    if b.shape != r.shape:
        raise ValidationError("one realized value per bound")
    if b.size < min_stages:
        return {"spearman": None, "violation_rate": None, "n": int(b.size)}
    rho = stats.spearmanr(b, r).statistic
    return {"spearman": float(rho), "violation_rate": float(np.mean(r < b)), "n": int(b.size)}


def logit_shift_table(p_old, p_new, top_k: int = 5) -> dict:
    """Tokens ranked by pre-update probability, with an 'other' bucket for the rest."""
    p_old = np.asarray(p_old, float)
    p_new = np.asarray(p_new, float)
    order = np.argsort(-p_old, kind="stable")
    head = order[:top_k]
    rows = [{"token": int(t), "p_old": float(p_old[t]), "p_new": float(p_new[t]),
             "shift": float(p_new[t] - p_old[t])} for t in head]
    rest = order[top_k:]
    if rest.size:
        rows.append({"token": "other", "p_old": float(p_old[rest].sum()), "p_new": float(p_new[rest].sum()),
                     "shift": float(p_new[rest].sum() - p_old[rest].sum())})
    return {"rows": rows, "argmax_flip": bool(np.argmax(p_old) != np.argmax(p_new))}


def is_monotone_in_surrogate(bound_fn, surrogates, radii, bump: float = 1e-3) -> bool:
    """bound_fn(L, r) must not decrease when any surrogate increases."""
    base = bound_fn(np.asarray(surrogates, float), np.asarray(radii, float))
    for i in range(len(surrogates)):
        L = np.array(surrogates, float)
        L[i] += bump
        if bound_fn(L, np.asarray(radii, float)) < base - 1e-12:
            return False
    return True


def is_monotone_in_radius(bound_fn, surrogates, radii, factor: float = 0.9) -> bool:
    """bound_fn(L, r) must not decrease when any radius shrinks."""
    base = bound_fn(np.asarray(surrogates, float), np.asarray(radii, float))
    for i in range(len(radii)):
        r = np.array(radii, float)
        r[i] *= factor
        if bound_fn(np.asarray(surrogates, float), r) < base - 1e-12:
            return False
    return True


def median_by_step(logs, field: str) -> dict:
    return {k: float(np.median(v)) for k, v in gap_by_step(logs, field).items()}


@dataclass
class GapTrace:
    stage: np.ndarray
    step: np.ndarray
    gap_hat: np.ndarray
    gap_exact: np.ndarray
    tv_stale: np.ndarray
    radius: np.ndarray


def stale_gap(logs) -> GapTrace:
    """Per-update surrogate disagreement between intermediate and stage-start data."""
    if not logs:
        raise ValidationError("no update logs")
    if any(not hasattr(l, "l_hat_stale") for l in logs):
        raise ValidationError("logs lack dual surrogate estimates")
    col = lambda f: np.array([getattr(l, f) for l in logs])
    return GapTrace(col("stage"), col("step"), col("gap_hat"), col("gap_exact"), col("tv_stale"), col("kl_exact"))


def occupancy_tv_proxy(team_a, team_b) -> float:
    """Total variation between the exact occupancies of two teams on the same state space."""
    from .exact import exact_occupancy, tv_distance

    if team_a.space is not team_b.space:
        raise ValidationError("teams live on different state spaces")
    return tv_distance(exact_occupancy(team_a).dist, exact_occupancy(team_b).dist)


def ess(weights) -> dict:
    return ess_summary(weights)


def analytic_scaling(n_values, delta_bar: float = 1.0) -> dict:
    """Exponent fits of the closed-form fresh and stale penalty sums."""
    from .certificate import penalty_sums

    fresh, stale = zip(*(penalty_sums(int(n), delta_bar) for n in n_values))
    return {"fresh": fit_exponent(n_values, fresh, "closed-form"),
            "stale": fit_exponent(n_values, stale, "closed-form")}


@dataclass
class ScalingResult:
    mode: str
    n_values: tuple
    delta_sum: np.ndarray  # (seeds, n)
    drift_sum: np.ndarray
    alpha_delta: ScalingFit
    alpha_drift: ScalingFit
    literal_delta: np.ndarray | None = None
    literal_drift: np.ndarray | None = None

    def summary(self) -> dict:
        out = {"mode": self.mode, "n_values": list(self.n_values),
               "alpha_delta": self.alpha_delta.alpha, "alpha_delta_se": self.alpha_delta.stderr,
               "alpha_drift": self.alpha_drift.alpha, "alpha_drift_se": self.alpha_drift.stderr}
        if self.literal_delta is not None and np.all(self.literal_delta > 0):
            out["alpha_delta_literal"] = fit_exponent(self.n_values, self.literal_delta).alpha
        if self.literal_drift is not None and np.all(self.literal_drift > 0):
            out["alpha_drift_literal"] = fit_exponent(self.n_values, self.literal_drift).alpha
        return out


def scaling_cell(n: int, seed: int, family, mode: str, stages: int, build):
    """Final-stage drift sums for one (n, seed) cell.

    ``family(n)`` returns an EnvConfig; ``build(space, mode)`` returns
    (team, plan, adv_cfg, ppo). Returns (delta, drift, literal_delta, literal_drift).
    """
    from .env import StateSpace
    from .trainer import train

    space = StateSpace(family(n))
    team, plan, adv_cfg, ppo = build(space, mode)
    _, logs, _ = train(team, plan, adv_cfg, ppo, seed, stages)
    last = [l for l in logs if l.stage == stages]
    return (sum(l.gap_data_exact for l in last), sum(l.tv_data for l in last),
            sum(l.gap_exact for l in last), sum(l.tv_stale for l in last))


def scaling_sweep(n_values, family, mode: str, stages: int, seeds, build, map_fn=map) -> ScalingResult:
    """Team-size sweep: per-n final-stage surrogate disagreement and occupancy drift, then log-log fits.

    The fitted metrics compare each update's post-update occupancy with the
    occupancy the update's data came from. Literal stage-start variants are
    kept alongside.
    """
    n_values = tuple(int(n) for n in n_values)
    if len(set(n_values)) < 4:
        raise EstimationError("scaling sweep needs at least 4 distinct team sizes")
    cells = [(n, s) for s in seeds for n in n_values]
    res = list(map_fn(_cell_star, [(n, s, family, mode, stages, build) for n, s in cells]))
    arr = np.array(res).reshape(len(seeds), len(n_values), 4)
    return ScalingResult(mode, n_values, arr[..., 0], arr[..., 1],
                         fit_exponent(n_values, arr[..., 0]), fit_exponent(n_values, arr[..., 1]),
                         arr[..., 2], arr[..., 3])


def _cell_star(args):
    return scaling_cell(*args)
