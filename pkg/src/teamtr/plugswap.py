"""Replacing one agent mid-training, with optional probe-set alignment first."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .divergence import agent_state_kl
from .errors import ConfigError, EstimationError, ValidationError
from .exact import conditional_occupancy, exact_occupancy, exact_return
from .policy import AgentPolicy, TeamPolicy, init_team, replace_factor

STRATEGIES = ("direct", "aligned", "retrain")


@dataclass(frozen=True)
class SwapConfig:
    strategy: str = "aligned"
    probe_size: int = 50
    delta_align: float = 0.01
    align_lr: float = 1.0
    align_max_steps: int = 5000

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown swap strategy {self.strategy!r}")
        if self.probe_size < 1:
            raise ConfigError("probe set must be non-empty")
        if self.delta_align <= 0:
            raise ConfigError("alignment tolerance must be positive")


@dataclass
class SwapReport:
    strategy: str
    agent: int
    j_before: float
    j_after: float
    shock: float
    probe_kl_before: float
    probe_kl_after: float
    occupancy_kl_after: float
    align_steps: int
    converged: bool

    def as_dict(self):
        return dict(self.__dict__)


def probe_set(team: TeamPolicy, j: int, size: int, rng) -> np.ndarray:
    """States drawn with replacement from the occupancy conditioned on agent j being active."""
    if size < 1:
        raise ValidationError("probe set must be non-empty")
    w = conditional_occupancy(team, j)
    return rng.choice(w.size, size=size, p=w)


def probe_kl(old: AgentPolicy, new: AgentPolicy, probes) -> float:
    """Mean over probe states of the message-level KL(old || new)."""
    probes = np.asarray(probes)
    if probes.size == 0:
        raise EstimationError("empty probe set")
    return float(agent_state_kl(old, new, probes).mean())


def _prefix_reach(agent: AgentPolicy, s: int) -> np.ndarray:
    """Probability that agent's message at state s passes through each prefix."""
    sp = agent.space
    reach = np.zeros(sp.n_prefix)
    probs = softmax(agent.logits[s * sp.n_prefix:(s + 1) * sp.n_prefix], axis=1)
    for p, prefix in enumerate(sp.prefixes):
        if not prefix:
            reach[p] = 1.0
            continue
        parent = sp.prefix_id[prefix[:-1]]
        reach[p] = reach[parent] * probs[parent, prefix[-1]]
    return reach


def stage0_align(old: AgentPolicy, incoming: AgentPolicy, probes, cfg: SwapConfig):
    """Gradient descent on the exact probe-set KL(old || incoming) until it is <= delta_align.

    Returns (aligned_policy, steps, converged).
    """
    if old.agent_id != incoming.agent_id:
        raise ValidationError("alignment compares two policies for the same slot")
    sp = old.space
    probes = np.asarray(probes)
    states, counts = np.unique(probes, return_counts=True)
    weights = counts / probes.size
    rows = (states[:, None] * sp.n_prefix + np.arange(sp.n_prefix)[None, :]).ravel()
    reach = np.concatenate([_prefix_reach(old, s) for s in states])
    w_rows = np.repeat(weights, sp.n_prefix) * reach
    p_old = softmax(old.logits[rows], axis=1)
    theta = incoming.logits.copy()
    kl = probe_kl(old, incoming, probes)
    steps = 0
    while kl > cfg.delta_align and steps < cfg.align_max_steps:
        q = softmax(theta[rows], axis=1)
        theta[rows] -= cfg.align_lr * w_rows[:, None] * (q - p_old)
        steps += 1
        if steps % 10 == 0 or steps == cfg.align_max_steps:
            kl = probe_kl(old, incoming.with_logits(theta), probes)
    aligned = incoming.with_logits(theta)
    kl = probe_kl(old, aligned, probes)
    return aligned, steps, kl <= cfg.delta_align


def swap_shock(j_before: float, j_after: float) -> float:
    return max(0.0, j_before - j_after)


def swap_shock_metric(j_trace, swap_index: int | None) -> float:
    """Drop from trace[swap_index - 1] to trace[swap_index]; 0 without a swap."""
    if swap_index is None:
        return 0.0
    if not 1 <= swap_index < len(j_trace):
        raise ValidationError("swap index outside the trace")
    return swap_shock(j_trace[swap_index - 1], j_trace[swap_index])


def apply_swap(team: TeamPolicy, j: int, incoming: AgentPolicy, cfg: SwapConfig, rng):
    """Install ``incoming`` in slot j using the configured strategy; returns (team, report)."""
    if incoming.agent_id != j:
        raise ValidationError("incoming policy carries a different agent id")
    old = team.agents[j]
    j_before = exact_return(team)
    probes = probe_set(team, j, cfg.probe_size, rng)
    kl_before = probe_kl(old, incoming, probes)
    steps, converged = 0, True
    if cfg.strategy == "aligned":
        incoming, steps, converged = stage0_align(old, incoming, probes, cfg)
    if cfg.strategy == "retrain":
        new_team = replace_factor(init_team(team.space), j, incoming)
    else:
        new_team = replace_factor(team, j, incoming)
    j_after = exact_return(new_team)
    d = exact_occupancy(team).dist
    idx = np.flatnonzero(team.space.active == j)
    occ_kl = float(d[idx] @ agent_state_kl(old, incoming, idx))
    report = SwapReport(cfg.strategy, j, j_before, j_after, swap_shock(j_before, j_after), kl_before,
                        probe_kl(old, incoming, probes), occ_kl, steps, converged)
    return new_team, report
