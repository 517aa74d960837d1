"""Finite message-action environment over token contexts.

A state is a token context plus a turn counter. Agents take turns emitting
messages (token sequences ending in EOS or at the length cap); a message is
appended to the context, truncated at the context cap. Terminal states absorb
with zero reward and have no active agent.

Rewards follow an arrival convention: the reward of the transition emitted at
step t is credited at step t + 1, so its weight in the return is gamma**(t+1).
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import CapacityError, ConfigError, ValidationError

Tokens = tuple


@dataclass(frozen=True)
class RewardSpec:
    """Bounded reward table.

    terminal-pattern: ``entries`` maps a final context to its reward, paid on
    entering a terminal state. With ``stop_on_match`` any context listed in
    ``entries`` is itself terminal.
    per-step-table: ``entries`` maps (context, message) to the reward of that
    transition; missing pairs pay 0.
    """

    mode: str = "terminal-pattern"
    entries: Mapping = field(default_factory=dict)
    stop_on_match: bool = False

    def __post_init__(self):
        if self.mode not in ("terminal-pattern", "per-step-table"):
            raise ConfigError(f"unknown reward mode {self.mode!r}")


@dataclass(frozen=True)
class EnvConfig:
    vocab_size: int
    msg_len_max: int = 1
    ctx_len_max: int = 2
    n_agents: int = 1
    gamma: float = 0.9
    r_max: float = 1.0
    initial_dist: Mapping = field(default_factory=lambda: {(): 1.0})
    reward_spec: RewardSpec = field(default_factory=RewardSpec)
    eos_id: int | None = None
    stop_tokens: tuple = ()  # tokens that end the episode when emitted
    state_cap: int = 50_000

    def __post_init__(self):
        for name in ("vocab_size", "msg_len_max", "n_agents"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.ctx_len_max < 0:
            raise ConfigError("ctx_len_max must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.r_max <= 0:
            raise ConfigError("r_max must be positive")
        if self.eos_id is not None and not 0 <= self.eos_id < self.vocab_size:
            raise ConfigError("eos_id outside the vocabulary")
        if any(not 0 <= t < self.vocab_size for t in self.stop_tokens):
            raise ConfigError("stop token outside the vocabulary")
        probs = np.array(list(self.initial_dist.values()), dtype=float)
        if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError("initial_dist must be a probability vector")
        for ctx in self.initial_dist:
            if any(not 0 <= t < self.vocab_size for t in ctx):
                raise ConfigError(f"initial context {ctx} uses tokens outside the vocabulary")
        for key, r in self.reward_spec.entries.items():
            if abs(r) > self.r_max + 1e-12:
                raise ConfigError(f"reward {r} for {key} exceeds r_max={self.r_max}")


@dataclass(frozen=True, order=True)
class ContextState:
    tokens: Tokens
    turn: int
    terminal: bool = False

    @property
    def key(self):
        return (self.tokens, self.turn)


@dataclass(frozen=True)
class Router:
    """Maps a non-terminal state to its active agent."""

    kind: str = "round-robin"
    n_agents: int = 1
    table: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("round-robin", "fixed-table"):
            raise ConfigError(f"unknown router {self.kind!r}")

    def __call__(self, state: ContextState) -> int:
        if state.terminal:
            raise ValidationError("terminal states have no active agent")
        if self.kind == "fixed-table" and state.tokens in self.table:
            agent = int(self.table[state.tokens])
        else:
            agent = state.turn % self.n_agents
        if not 0 <= agent < self.n_agents:
            raise ValidationError(f"router returned agent {agent} outside the team")
        return agent


def active_agent(state: ContextState, router: Router) -> int:
    return router(state)


def enumerate_messages(env: EnvConfig) -> list[Tokens]:
    """All valid messages in lexicographic order."""
    out = []
    T, eos = env.msg_len_max, env.eos_id
    for length in range(1, T + 1):
        for msg in itertools.product(range(env.vocab_size), repeat=length):
            body = msg[:-1]
            if eos is not None and eos in body:
                continue
            if length < T and (eos is None or msg[-1] != eos):
                continue
            out.append(msg)
    out.sort()
    return out


def enumerate_prefixes(env: EnvConfig) -> list[Tokens]:
    """Proper prefixes of valid messages, i.e. the token-decision points of one message."""
    usable = [t for t in range(env.vocab_size) if t != env.eos_id]
    out = []
    for length in range(env.msg_len_max):
        out.extend(itertools.product(usable, repeat=length))
    out.sort()
    return out


def is_valid_message(message, env: EnvConfig) -> bool:
    msg = tuple(message)
    if not 1 <= len(msg) <= env.msg_len_max:
        return False
    if any(not 0 <= t < env.vocab_size for t in msg):
        return False
    if env.eos_id is not None and env.eos_id in msg[:-1]:
        return False
    if len(msg) < env.msg_len_max and (env.eos_id is None or msg[-1] != env.eos_id):
        return False
    return True


def _is_terminal(tokens: Tokens, env: EnvConfig, message: Tokens = ()) -> bool:
    if len(tokens) >= env.ctx_len_max:
        return True
    if env.stop_tokens and any(t in env.stop_tokens for t in message):
        return True
    spec = env.reward_spec
    return spec.mode == "terminal-pattern" and spec.stop_on_match and tokens in spec.entries


def initial_states(env: EnvConfig) -> list[tuple[ContextState, float]]:
    return [
        (ContextState(tuple(ctx), 0, _is_terminal(tuple(ctx), env)), float(p))
        for ctx, p in env.initial_dist.items()
        if p > 0
    ]


def step(state: ContextState, message, env: EnvConfig) -> tuple[ContextState, float]:
    """Apply one message. Returns the next state and the transition reward."""
    if state.terminal:
        raise ValidationError("cannot step from a terminal state")
    msg = tuple(message)
    if not is_valid_message(msg, env):
        raise ValidationError(f"invalid message {msg}")
    tokens = (state.tokens + msg)[: env.ctx_len_max]
    nxt = ContextState(tokens, state.turn + 1, _is_terminal(tokens, env, msg))
    spec = env.reward_spec
    if spec.mode == "terminal-pattern":
        reward = float(spec.entries.get(tokens, 0.0)) if nxt.terminal else 0.0
    else:
        reward = float(spec.entries.get((state.tokens, msg), 0.0))
    if abs(reward) > env.r_max + 1e-12:
        raise ValidationError(f"reward {reward} exceeds r_max")
    return nxt, reward


class StateSpace:
    """Reachable states with dense transition tables.

    Attributes are plain arrays indexed by state s and message m:
    ``next_state[s, m]`` (-1 at terminal rows), ``reward[s, m]``,
    ``active[s]`` (-1 at terminals) and the initial distribution ``mu``.
    Token decisions are addressed by rows ``s * n_prefix + prefix_id``;
    ``msg_prefix[m, u]`` and ``msg_tokens[m, u]`` give the prefix id and the
    emitted token at position u of message m, masked by ``msg_mask``.
    """

    def __init__(self, env: EnvConfig, router: Router | None = None):
        self.env = env
        self.router = router or Router("round-robin", env.n_agents)
        if self.router.n_agents != env.n_agents:
            raise ConfigError("router and environment disagree on team size")
        self.gamma = env.gamma
        self.messages = enumerate_messages(env)
        self.prefixes = enumerate_prefixes(env)
        self.prefix_id = {p: i for i, p in enumerate(self.prefixes)}
        self.n_prefix = len(self.prefixes)
        self._build()
        self._build_message_layout()

    def _build(self):
        env = self.env
        seen: dict = {}
        queue = deque()
        for st, _ in initial_states(env):
            if st.key not in seen:
                seen[st.key] = st
                queue.append(st)
        edges = {}
        while queue:
            st = queue.popleft()
            if st.terminal:
                continue
            row = []
            for msg in self.messages:
                nxt, r = step(st, msg, env)
                row.append((nxt.key, r))
                if nxt.key not in seen:
                    if len(seen) >= env.state_cap:
                        raise CapacityError(
                            f"state count exceeds cap {env.state_cap} for {env!r}"
                        )
                    seen[nxt.key] = nxt
                    queue.append(nxt)
            edges[st.key] = row
        self.states = sorted(seen.values(), key=lambda s: (s.tokens, s.turn))
        self.index = {s.key: i for i, s in enumerate(self.states)}
        S, M = len(self.states), len(self.messages)
        self.next_state = np.full((S, M), -1, dtype=np.int64)
        self.reward = np.zeros((S, M))
        self.active = np.full(S, -1, dtype=np.int64)
        self.terminal = np.array([s.terminal for s in self.states])
        for i, st in enumerate(self.states):
            if st.terminal:
                continue
            self.active[i] = self.router(st)
            for m, (key, r) in enumerate(edges[st.key]):
                self.next_state[i, m] = self.index[key]
                self.reward[i, m] = r
        self.mu = np.zeros(S)
        for st, p in initial_states(env):
            self.mu[self.index[st.key]] += p
        self.turn = np.array([s.turn for s in self.states], dtype=np.int64)

    def _build_message_layout(self):
        M, T = len(self.messages), self.env.msg_len_max
        self.msg_len = np.array([len(m) for m in self.messages], dtype=np.int64)
        self.msg_prefix = np.zeros((M, T), dtype=np.int64)
        self.msg_tokens = np.zeros((M, T), dtype=np.int64)
        self.msg_mask = np.zeros((M, T), dtype=bool)
        for m, msg in enumerate(self.messages):
            for u, tok in enumerate(msg):
                self.msg_prefix[m, u] = self.prefix_id[msg[:u]]
                self.msg_tokens[m, u] = tok
                self.msg_mask[m, u] = True
        self.message_index = {msg: m for m, msg in enumerate(self.messages)}

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_messages(self) -> int:
        return len(self.messages)

    @property
    def n_rows(self) -> int:
        return self.n_states * self.n_prefix

    @property
    def vocab_size(self) -> int:
        return self.env.vocab_size

    def row(self, s: int, prefix=()) -> int:
        return s * self.n_prefix + self.prefix_id[tuple(prefix)]

    def state_index(self, state: ContextState) -> int:
        return self.index[state.key]

    def nonterminal(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal)

    def truncation_error_bound(self) -> float:
        """Gap between the capped return and an uncapped continuation."""
        g = self.gamma
        return g ** self.env.ctx_len_max * self.env.r_max / (1.0 - g)

    def __repr__(self):
        return (
            f"StateSpace(states={self.n_states}, messages={self.n_messages}, "
            f"agents={self.env.n_agents})"
        )


def enumerate_states(env: EnvConfig, router: Router | None = None) -> StateSpace:
    return StateSpace(env, router)


# reward-table builders for the bundled scenarios


def _contexts_upto(env: EnvConfig):
    space = StateSpace(
        EnvConfig(
            vocab_size=env.vocab_size,
            msg_len_max=env.msg_len_max,
            ctx_len_max=env.ctx_len_max,
            n_agents=1,
            gamma=env.gamma,
            r_max=env.r_max,
            initial_dist=env.initial_dist,
            eos_id=env.eos_id,
            stop_tokens=env.stop_tokens,
            state_cap=env.state_cap,
        )
    )
    return [s.tokens for s in space.states if not s.terminal], space.messages


def per_step_table(env: EnvConfig, fn) -> RewardSpec:
    """Tabulate ``fn(context, message) -> reward`` over every reachable pair."""
    contexts, messages = _contexts_upto(env)
    entries = {}
    for ctx in contexts:
        for msg in messages:
            r = float(fn(ctx, msg))
            if r != 0.0:
                entries[(ctx, msg)] = r
    return RewardSpec("per-step-table", entries)


def with_reward(env: EnvConfig, spec: RewardSpec) -> EnvConfig:
    from dataclasses import replace

    return replace(env, reward_spec=spec)
