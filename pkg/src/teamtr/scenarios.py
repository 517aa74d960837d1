"""Named toy environments used by the presets and experiment scripts."""
from __future__ import annotations

import numpy as np

from .env import EnvConfig, RewardSpec, StateSpace, per_step_table, with_reward
from .errors import ConfigError


def stop_chain(n_agents: int, rounds: int = 2, safe: float = 0.3, gamma: float = 0.99) -> EnvConfig:
    """Binary relay: token 0 stops the episode and pays ``safe``; token 1 passes.

    Agents act round-robin for ``rounds`` rounds; passing on the very last
    turn pays 1. Alive states form a single chain, so occupancy drift from
    different agents' updates adds up coherently.
    """
    L = rounds * n_agents
    env = EnvConfig(vocab_size=2, ctx_len_max=L, n_agents=n_agents, gamma=gamma, stop_tokens=(0,))

    def reward(ctx, msg):
        if msg[0] == 0:
            return safe
        return 1.0 if len(ctx) == L - 1 else 0.0

    return with_reward(env, per_step_table(env, reward))


def handoff(n_agents: int, vocab_size: int = 3, safe: float = 0.3, gamma: float = 0.9) -> EnvConfig:
    """One round of play where stopping (token 0) pays ``safe`` and passing (token 1) hands on.

    Only the last agent's pass pays 1, and only if nobody stopped earlier.
    Other tokens are inert. The value of passing depends on every later
    teammate, so stale advantages lag behind fresh ones.
    """
    if vocab_size < 2:
        raise ConfigError("handoff needs at least two tokens")
    env = EnvConfig(vocab_size=vocab_size, ctx_len_max=n_agents, n_agents=n_agents, gamma=gamma)

    def reward(ctx, msg):
        if 0 in ctx:
            return 0.0
        if msg[0] == 0:
            return safe
        return 1.0 if (msg[0] == 1 and len(ctx) == n_agents - 1) else 0.0

    return with_reward(env, per_step_table(env, reward))


def random_env(rng, n_agents: int = 2, vocab_size: int = 3, ctx_len_max: int = 3, msg_len_max: int = 1,
               gamma: float | None = None, n_prompts: int = 2) -> EnvConfig:
    """Small environment with random per-step rewards and a random prompt distribution."""
    gamma = float(rng.uniform(0.5, 0.95)) if gamma is None else gamma
    eos = vocab_size - 1 if msg_len_max > 1 else None
    prompts = {(): 1.0} if n_prompts == 1 else None
    if prompts is None:
        ctxs = [()] + [(int(t),) for t in range(min(vocab_size, n_prompts - 1))]
        p = rng.dirichlet(np.ones(len(ctxs)))
        prompts = {c: float(x) for c, x in zip(ctxs, p)}
        prompts[ctxs[0]] += 1.0 - sum(prompts.values())
    base = EnvConfig(vocab_size=vocab_size, msg_len_max=msg_len_max, ctx_len_max=ctx_len_max,
                     n_agents=n_agents, gamma=gamma, initial_dist=prompts, eos_id=eos)
    table = {}

    def reward(ctx, msg):
        key = (ctx, msg)
        if key not in table:
            table[key] = float(rng.uniform(-1, 1)) if rng.random() < 0.5 else 0.0
        return table[key]

    return with_reward(base, per_step_table(base, reward))


def bandit(probs_reward, gamma: float = 0.5) -> EnvConfig:
    """Single-decision environment: token k pays reward r_k."""
    r = list(probs_reward)
    env = EnvConfig(vocab_size=len(r), ctx_len_max=1, n_agents=1, gamma=gamma, r_max=max(1.0, max(abs(x) for x in r)))
    return with_reward(env, RewardSpec("per-step-table", {((), (k,)): float(v) for k, v in enumerate(r) if v}))


SCENARIOS = {"stop-chain": stop_chain, "handoff": handoff}


def build_scenario(name: str, params: dict) -> EnvConfig:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    try:
        return SCENARIOS[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for scenario {name!r}: {exc}") from exc


def build_space(env: EnvConfig) -> StateSpace:
    return StateSpace(env)
