"""Occupancy-weighted token KL: exact and sampled forms."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import EstimationError, ValidationError
from .exact import exact_occupancy, visit_counts
from .policy import AgentPolicy, TeamPolicy


@dataclass(frozen=True)
class KlEstimate:
    value: float
    stderr: float
    n_samples: int
    mode: str  # "exact" or "sampled"
    monitored_agent: int | None = None


def kl_categorical(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _kl_logits(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    """Row-wise KL between softmax(lp) and softmax(lq)."""
    a, b = log_softmax(lp, axis=-1), log_softmax(lq, axis=-1)
    return np.sum(np.exp(a) * (a - b), axis=-1)


def row_token_kl(p: AgentPolicy, q: AgentPolicy) -> np.ndarray:
    """Token-level KL at every (state, prefix) row."""
    return _kl_logits(p.logits, q.logits)


def agent_state_kl(p: AgentPolicy, q: AgentPolicy, states=None) -> np.ndarray:
    """Message-level KL(p(.|s) || q(.|s)) by enumerating messages."""
    lp = p.message_logprobs(states)
    lq = q.message_logprobs(states)
    return np.sum(np.exp(lp) * (lp - lq), axis=1)


def team_state_kl(p: TeamPolicy, q: TeamPolicy) -> np.ndarray:
    """Per-state KL between team message distributions; zero at terminals."""
    sp = p.space
    live = ~sp.terminal
    out = np.zeros(sp.n_states)
    lp, lq = p.message_logprobs()[live], q.message_logprobs()[live]
    out[live] = np.sum(np.exp(lp) * (lp - lq), axis=1)
    return out


def joint_action_distribution(team: TeamPolicy, s: int) -> tuple[list, np.ndarray]:
    """Explicit product distribution over every agent's action at state s.

    Each agent's action set is its messages plus a no-op; inactive agents play
    the no-op with probability one. Used as an independent oracle.
    """
    sp = team.space
    M = sp.n_messages
    factors = []
    for j, agent in enumerate(team.agents):
        f = np.zeros(M + 1)
        if sp.active[s] == j:
            f[:M] = np.exp(agent.message_logprobs([s])[0])
        else:
            f[M] = 1.0
        factors.append(f)
    support, probs = [], []
    for combo in itertools.product(*[np.flatnonzero(f > 0) for f in factors]):
        support.append(combo)
        probs.append(np.prod([factors[j][a] for j, a in enumerate(combo)]))
    return support, np.array(probs)


def joint_team_kl(p: TeamPolicy, q: TeamPolicy, s: int) -> float:
    sup_p, pp = joint_action_distribution(p, s)
    sup_q, pq = joint_action_distribution(q, s)
    lookup = dict(zip(sup_q, pq))
    qq = np.array([lookup.get(a, 0.0) for a in sup_p])
    return kl_categorical(pp, qq)


def chain_rule_kl(p: AgentPolicy, q: AgentPolicy, s: int) -> float:
    """E_{m ~ p}[sum_u KL(p_u || q_u)] over the prefixes m visits."""
    sp = p.space
    row_kl = row_token_kl(p, q)
    lp = p.message_logprobs([s])[0]
    rows = s * sp.n_prefix + sp.msg_prefix
    per_msg = np.where(sp.msg_mask, row_kl[rows], 0.0).sum(axis=1)
    return float(np.exp(lp) @ per_msg)


def token_avg_vs_sum(p: AgentPolicy, q: AgentPolicy, s: int) -> tuple[float, float, int]:
    """(E_m[mean_u KL_u], E_m[sum_u KL_u], T_max) for one state."""
    sp = p.space
    row_kl = row_token_kl(p, q)
    lp = p.message_logprobs([s])[0]
    rows = s * sp.n_prefix + sp.msg_prefix
    per_sum = np.where(sp.msg_mask, row_kl[rows], 0.0).sum(axis=1)
    w = np.exp(lp)
    return float(w @ (per_sum / sp.msg_len)), float(w @ per_sum), int(sp.env.msg_len_max)


def token_kl_tok(ref: TeamPolicy, p: TeamPolicy, q: TeamPolicy, d=None) -> KlEstimate:
    """E_{s ~ d^ref} KL(p(.|s) || q(.|s)), computed exactly."""
    d = exact_occupancy(ref).dist if d is None else d
    return KlEstimate(float(d @ team_state_kl(p, q)), 0.0, 0, "exact")


def factor_kl_tok(ref: TeamPolicy, p: AgentPolicy, q: AgentPolicy, d=None) -> float:
    """Factor-level token KL: agent j's divergence on the states it controls."""
    sp = ref.space
    d = exact_occupancy(ref).dist if d is None else d
    idx = np.flatnonzero(sp.active == p.agent_id)
    if idx.size == 0:
        return 0.0
    return float(d[idx] @ agent_state_kl(p, q, idx))


def trajectory_kl_tok(ref: TeamPolicy, p: TeamPolicy, q: TeamPolicy, max_paths: int = 200_000) -> float:
    """E_tau[(1-g) sum_t g^t KL(s_t)] by explicit path enumeration."""
    sp = ref.space
    g = sp.gamma
    kl = team_state_kl(p, q)
    probs = ref.message_probs()
    total = 0.0
    stack = [(int(s), float(w), 0) for s, w in enumerate(sp.mu) if w > 0]
    visited = 0
    while stack:
        s, w, t = stack.pop()
        visited += 1
        if visited > max_paths:
            raise EstimationError("too many paths to enumerate")
        if sp.terminal[s]:
            continue
        total += w * (1.0 - g) * g**t * kl[s]
        for m in np.flatnonzero(probs[s] > 0):
            stack.append((int(sp.next_state[s, m]), w * probs[s, m], t + 1))
    return total


def monitor_expectation(ref: TeamPolicy, p: AgentPolicy, q: AgentPolicy) -> float:
    """Population value of the sampled monitor: visit-weighted message KL over agent j's states."""
    sp = ref.space
    idx = np.flatnonzero(sp.active == p.agent_id)
    w = visit_counts(ref)[idx]
    if w.sum() <= 0:
        raise EstimationError(f"agent {p.agent_id} is never visited")
    return float(w @ agent_state_kl(p, q, idx) / w.sum())


def message_log_ratios(batch, p: AgentPolicy, q: AgentPolicy, token_level: bool = False):
    """log p - log q for agent-j messages in a batch (message sums, or per token)."""
    sp = p.space
    sel = np.flatnonzero(batch.step_agent == p.agent_id)
    s = batch.step_state[sel]
    m = batch.step_msg[sel]
    rows = s[:, None] * sp.n_prefix + sp.msg_prefix[m]
    toks = sp.msg_tokens[m]
    mask = sp.msg_mask[m]
    lp = log_softmax(p.logits[rows], axis=-1)
    lq = log_softmax(q.logits[rows], axis=-1)
    tok_lr = np.take_along_axis(lp - lq, toks[..., None], axis=-1)[..., 0]
    tok_lr = np.where(mask, tok_lr, 0.0)
    if token_level:
        return tok_lr, mask, sel
    return tok_lr.sum(axis=1), sel


def sampled_kl_monitor(batch, p: AgentPolicy, q: AgentPolicy, weights=None) -> KlEstimate:
    """Mean over agent-j messages of sum_u log(p_u / q_u), sampled under p."""
    lr, sel = message_log_ratios(batch, p, q)
    if lr.size == 0:
        raise EstimationError(f"no messages from agent {p.agent_id} in batch")
    if weights is None:
        value = float(lr.mean())
        se = float(lr.std(ddof=1) / np.sqrt(lr.size)) if lr.size > 1 else float("inf")
    else:
        w = np.asarray(weights, float)[batch.step_traj[sel]]
        value = float(np.sum(w * lr) / np.sum(w))
        n_eff = w.sum() ** 2 / np.sum(w**2)
        se = float(np.sqrt(np.sum(w * (lr - value) ** 2) / w.sum() / max(n_eff - 1, 1)))
    return KlEstimate(value, se, int(lr.size), "sampled", p.agent_id)


def kl_bound_ok(avg: float, total: float, t_max: int, tol: float = 1e-12) -> bool:
    return avg <= total + tol and total <= t_max * avg + tol


def monitor_record(batch, p: AgentPolicy, q: AgentPolicy):
    """(flattened per-token log-ratios, message count) for subsampling studies."""
    tok_lr, mask, sel = message_log_ratios(batch, p, q, token_level=True)
    return tok_lr[mask], int(sel.size)


def subsample_flip_rate(records, delta: float, q_frac: float, trials: int, rng, near=(0.8, 1.2)):
    """Threshold flips of the monitor under token-position subsampling.

    ``records`` is a sequence of (token_log_ratio, n_messages) pairs, one per
    update, with the log-ratio flattened over kept tokens. A subsample keeps
    round(q * N) positions without replacement and rescales to the full count.
    ``flip_rate`` counts every record; ``flip_rate_near`` only those whose full
    estimate lies in [near[0] * delta, near[1] * delta] and is None if none do.
    """
    if not 0 < q_frac <= 1:
        raise ValidationError("subsample fraction must lie in (0, 1]")
    devs, flips, flips_all = [], [], []
    for lr, n_msg in records:
        lr = np.asarray(lr, float)
        N = lr.size
        full = float(lr.sum() / n_msg)
        k = max(1, int(round(q_frac * N)))
        in_band = near[0] * delta <= full <= near[1] * delta
        for _ in range(trials):
            idx = np.sort(rng.choice(N, size=k, replace=False))
            sub = float(lr[idx].sum() / n_msg * (N / k)) if k < N else float(lr[idx].sum() / n_msg)
            devs.append(abs(sub - full) / delta)
            f = (sub <= delta) != (full <= delta)
            flips_all.append(f)
            if in_band:
                flips.append(f)
    devs = np.array(devs)
    return {
        "q": q_frac,
        "median_dev": float(np.median(devs)) if devs.size else float("nan"),
        "p90_dev": float(np.quantile(devs, 0.9)) if devs.size else float("nan"),
        "flip_rate": float(np.mean(flips_all)) if flips_all else None,
        "flip_rate_near": float(np.mean(flips)) if flips else None,
        "n_near": len(flips) // max(trials, 1),
    }

