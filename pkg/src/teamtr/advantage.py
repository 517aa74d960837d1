"""Rollout collection, group-normalized advantages and their bias diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, EstimationError, ValidationError
from .exact import exact_occupancy, exact_values, expected_under
from .policy import AgentPolicy, TeamPolicy


@dataclass(frozen=True)
class AdvantageConfig:
    group_size: int = 8
    a_clip: float = 3.0
    eps_norm: float = 1e-6
    baseline_mode: str = "group-norm"  # group-norm | group-mean | oracle

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2")
        if self.a_clip <= 0:
            raise ConfigError("a_clip must be positive")
        if self.eps_norm <= 0:
            raise ConfigError("eps_norm must be positive")
        if self.baseline_mode not in ("group-norm", "group-mean", "oracle"):
            raise ConfigError(f"unknown baseline mode {self.baseline_mode!r}")


@dataclass
class RolloutBatch:
    """Flat arrays over trajectories (traj_*) and over steps (step_*)."""

    group_size: int
    gamma: float
    traj_group: np.ndarray
    traj_prompt: np.ndarray
    traj_return: np.ndarray
    traj_len: np.ndarray
    step_traj: np.ndarray
    step_t: np.ndarray
    step_state: np.ndarray
    step_msg: np.ndarray
    step_agent: np.ndarray
    step_reward: np.ndarray
    step_logp: np.ndarray  # behavior log-prob of the whole message

    @property
    def n_traj(self) -> int:
        return self.traj_return.size

    @property
    def n_groups(self) -> int:
        return self.n_traj // self.group_size


def _gumbel_pick(logp_rows: np.ndarray, rng) -> np.ndarray:
    g = rng.gumbel(size=logp_rows.shape)
    return np.argmax(logp_rows + g, axis=1)


def collect_rollouts(team: TeamPolicy, prompts, group_size: int, rng) -> RolloutBatch:
    """G trajectories from every prompt state, run to termination."""
    sp = team.space
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.size == 0:
        raise ValidationError("need at least one prompt")
    if group_size < 1:
        raise ValidationError("group size must be positive")
    logp = team.message_logprobs()
    N = prompts.size * group_size
    state = np.repeat(prompts, group_size)
    ret = np.zeros(N)
    length = np.zeros(N, dtype=np.int64)
    steps = {k: [] for k in ("traj", "t", "state", "msg", "agent", "reward", "logp")}
    alive = ~sp.terminal[state]
    t = 0
    g = sp.gamma
    while alive.any():
        idx = np.flatnonzero(alive)
        s = state[idx]
        m = _gumbel_pick(logp[s], rng)
        r = sp.reward[s, m]
        steps["traj"].append(idx)
        steps["t"].append(np.full(idx.size, t))
        steps["state"].append(s)
        steps["msg"].append(m)
        steps["agent"].append(sp.active[s])
        steps["reward"].append(r)
        steps["logp"].append(logp[s, m])
        ret[idx] += g ** (t + 1) * r
        length[idx] += 1
        state[idx] = sp.next_state[s, m]
        alive[idx] = ~sp.terminal[state[idx]]
        t += 1
    cat = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in steps.items()}
    order = np.lexsort((cat["t"], cat["traj"])) if cat["traj"].size else np.zeros(0, dtype=np.int64)
    return RolloutBatch(
        group_size=group_size,
        gamma=g,
        traj_group=np.repeat(np.arange(prompts.size), group_size),
        traj_prompt=np.repeat(prompts, group_size),
        traj_return=ret,
        traj_len=length,
        step_traj=cat["traj"][order].astype(np.int64),
        step_t=cat["t"][order].astype(np.int64),
        step_state=cat["state"][order].astype(np.int64),
        step_msg=cat["msg"][order].astype(np.int64),
        step_agent=cat["agent"][order].astype(np.int64),
        step_reward=cat["reward"][order].astype(float),
        step_logp=cat["logp"][order].astype(float),
    )


def sample_prompts(team: TeamPolicy, n: int, rng) -> np.ndarray:
    mu = team.space.mu
    return rng.choice(mu.size, size=n, p=mu / mu.sum())


def group_advantage(returns, cfg: AdvantageConfig) -> tuple[np.ndarray, np.ndarray]:
    """Standardize within each group and clip; returns (clipped, unclipped).

    ``returns`` has shape (n_groups, G) or is flat with length a multiple of G.
    """
    R = np.asarray(returns, dtype=float)
    flat = R.ndim == 1
    if flat:
        if R.size % cfg.group_size:
            raise ValidationError("return count is not a multiple of the group size")
        R = R.reshape(-1, cfg.group_size)
    if R.shape[1] < 2:
        raise ValidationError("groups need at least two members")
    centered = R - R.mean(axis=1, keepdims=True)
    if cfg.baseline_mode == "group-mean":
        raw = centered
    else:
        sigma = np.sqrt(np.mean(centered**2, axis=1, keepdims=True) + cfg.eps_norm)
        raw = centered / sigma
    clipped = np.clip(raw, -cfg.a_clip, cfg.a_clip)
    if flat:
        return clipped.ravel(), raw.ravel()
    return clipped, raw


def batch_advantages(batch: RolloutBatch, cfg: AdvantageConfig, values=None):
    """Per-step advantage weights for a batch, plus trajectory-level arrays.

    Group modes broadcast the trajectory's advantage to each of its steps. The
    oracle mode injects the exact advantage of the behavior team instead.
    """
    if cfg.baseline_mode == "oracle":
        if values is None:
            raise ValidationError("oracle advantages need the behavior team's value table")
        step = np.clip(values.adv[batch.step_state, batch.step_msg], -cfg.a_clip, cfg.a_clip)
        return step, None, None
    clipped, raw = group_advantage(batch.traj_return, cfg)
    return clipped[batch.step_traj], clipped, raw


def zeta_proxy(batch: RolloutBatch, traj_adv, traj_raw, ratios, cfg: AdvantageConfig, ppo_eps: float,
               agent: int):
    """Three batch-level proxies for advantage-estimation error.

    clip term: mean |unclipped - clipped| advantage.
    ratio term: mean |A| times the mean |w - clip(w)| over the trajectory's agent messages.
    norm term: mean disagreement between full-group and half-group standardization.
    """
    clip_term = float(np.mean(np.abs(traj_raw - traj_adv)))
    sel = np.flatnonzero(batch.step_agent == agent)
    gap = np.abs(ratios - np.clip(ratios, 1 - ppo_eps, 1 + ppo_eps))
    per_traj = np.zeros(batch.n_traj)
    counts = np.zeros(batch.n_traj)
    np.add.at(per_traj, batch.step_traj[sel], gap)
    np.add.at(counts, batch.step_traj[sel], 1)
    per_traj = np.divide(per_traj, counts, out=np.zeros_like(per_traj), where=counts > 0)
    ratio_term = float(np.mean(np.abs(traj_adv) * per_traj))
    norm_term = half_split_disagreement(batch.traj_return, cfg)
    return {"clip": clip_term, "ratio": ratio_term, "norm": norm_term,
            "total": clip_term + ratio_term + norm_term}


def half_split_disagreement(returns, cfg: AdvantageConfig) -> float:
    G = cfg.group_size
    if G < 4:
        raise EstimationError("half-split estimate needs group size >= 4")
    R = np.asarray(returns, float).reshape(-1, G)
    full, _ = group_advantage(R, cfg)
    h = G // 2
    halves = []
    for part in (R[:, :h], R[:, h:]):
        sub = AdvantageConfig(part.shape[1], cfg.a_clip, cfg.eps_norm, cfg.baseline_mode)
        halves.append(group_advantage(part, sub)[0])
    return float(np.mean(np.abs(full - np.concatenate(halves, axis=1))))


def zeta_exact_mc(behavior: TeamPolicy, new_agent: AgentPolicy, cfg: AdvantageConfig, n_prompts: int,
                  trials: int, rng):
    """Monte Carlo estimate of |E_{d_old, m ~ new}[E[A_hat] - A]| and its standard error.

    Each trial draws a fresh batch, forms the per-step estimator, and evaluates
    the discounted importance-weighted error sum; the exact advantage comes
    from the behavior team.
    """
    sp = behavior.space
    g = sp.gamma
    j = new_agent.agent_id
    vt = exact_values(behavior)
    lp_new = new_agent.message_logprobs()
    xs = np.empty(trials)
    for k in range(trials):
        prompts = sample_prompts(behavior, n_prompts, rng)
        batch = collect_rollouts(behavior, prompts, cfg.group_size, rng)
        step_adv, _, _ = batch_advantages(batch, cfg, vt)
        if cfg.baseline_mode == "oracle":
            step_adv = vt.adv[batch.step_state, batch.step_msg]
        sel = batch.step_agent == j
        s, m = batch.step_state[sel], batch.step_msg[sel]
        w = np.exp(lp_new[s, m] - batch.step_logp[sel])
        err = w * (step_adv[sel] - vt.adv[s, m]) * g ** batch.step_t[sel]
        xs[k] = err.sum() / batch.n_traj
    mean = xs.mean()
    se = xs.std(ddof=1) / np.sqrt(trials)
    return abs((1 - g) * mean), (1 - g) * se


def zeta_exact(behavior: TeamPolicy, new_agent: AgentPolicy, estimate_table) -> float:
    """Exact zeta for an explicit per-decision estimator table (S, M)."""
    from .policy import replace_factor

    sp = behavior.space
    d = exact_occupancy(behavior).dist
    adv = exact_values(behavior).adv
    new = replace_factor(behavior, new_agent.agent_id, new_agent)
    mask = (sp.active == new_agent.agent_id)[:, None]
    diff = np.where(mask, estimate_table - adv, 0.0)
    return abs(float(d @ expected_under(new, diff)))


def shrinkage_check(team: TeamPolicy, group_size: int, trials: int, rng, prompt=None):
    """Regress (R - group mean) on (R - exact prompt mean) for the first group member.

    Returns (slope, conf_int, expected) with expected = 1 - 1/G.
    """
    sp = team.space
    vt = exact_values(team)
    if prompt is None:
        prompt = int(np.flatnonzero(sp.mu > 0)[0])
    batch = collect_rollouts(team, np.full(trials, prompt), group_size, rng)
    R = batch.traj_return.reshape(trials, group_size)
    y = R[:, 0] - R.mean(axis=1)
    x = R[:, 0] - vt.v[prompt]
    if np.var(x) == 0:
        raise EstimationError("returns are deterministic; shrinkage slope undefined")
    fit = stats.linregress(x, y)
    half = stats.t.ppf(0.975, trials - 2) * fit.stderr
    return fit.slope, (fit.slope - half, fit.slope + half), 1.0 - 1.0 / group_size


def clip_bias_bound(values, c: float, probs=None):
    """Exact |E clip(Z) - E Z| for a discrete Z with the sup-norm and Cauchy-Schwarz tail bounds.

    Returns (bias, bound_inf, bound_l2); uniform weights when ``probs`` is None.
    """
    z = np.asarray(values, float)
    p = np.full(z.size, 1.0 / z.size) if probs is None else np.asarray(probs, float)
    if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
        raise ValidationError("probabilities must sum to one")
    if c <= 0:
        raise ValidationError("clip level must be positive")
    bias = abs(float(p @ np.clip(z, -c, c)) - float(p @ z))
    ptail = float(p[np.abs(z) > c].sum())
    bound_inf = float(np.max(np.abs(z))) * ptail
    bound_l2 = float(np.sqrt((p @ z**2) * ptail))
    return bias, bound_inf, bound_l2
