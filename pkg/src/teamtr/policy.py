"""Tabular autoregressive softmax policies and their team composition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .env import StateSpace
from .errors import DomainError, InitializationError, NumericalError, ValidationError

LOGIT_CLAMP = 30.0
POLICY_FORMAT = "teamtr-policy/1"


@dataclass
class AgentPolicy:
    """Token logits for every (state, prefix) row; rows never touched stay at 0."""

    agent_id: int
    logits: np.ndarray  # (n_rows, vocab)
    space: StateSpace

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        expected = (self.space.n_rows, self.space.vocab_size)
        if self.logits.shape != expected:
            raise InitializationError(f"logit table has shape {self.logits.shape}, expected {expected}")
        if not np.all(np.isfinite(self.logits)):
            raise NumericalError("non-finite logits")
        np.clip(self.logits, -LOGIT_CLAMP, LOGIT_CLAMP, out=self.logits)

    def copy(self) -> "AgentPolicy":
        return AgentPolicy(self.agent_id, self.logits.copy(), self.space)

    def with_logits(self, logits) -> "AgentPolicy":
        return AgentPolicy(self.agent_id, np.array(logits, dtype=float), self.space)

    def token_logprobs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def token_probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def message_logprobs(self, states=None) -> np.ndarray:
        """log pi(m | s) for all messages; shape (len(states), M)."""
        sp = self.space
        states = np.arange(sp.n_states) if states is None else np.asarray(states)
        lsm = self.token_logprobs()
        rows = states[:, None, None] * sp.n_prefix + sp.msg_prefix[None, :, :]
        tok = np.broadcast_to(sp.msg_tokens[None], rows.shape)
        lp = lsm[rows, tok]
        return np.where(sp.msg_mask[None], lp, 0.0).sum(axis=2)


def init_agent(space: StateSpace, agent_id: int, scale: float = 0.0, rng=None, bias=None) -> AgentPolicy:
    """Zero logits, plus an optional per-token ``bias`` and Gaussian noise of std ``scale``."""
    if not 0 <= agent_id < space.env.n_agents:
        raise InitializationError(f"agent {agent_id} outside the team")
    logits = np.zeros((space.n_rows, space.vocab_size))
    if bias is not None:
        bias = np.asarray(bias, float)
        if bias.shape != (space.vocab_size,):
            raise InitializationError("bias needs one entry per token")
        logits += bias
    if scale > 0:
        if rng is None:
            raise InitializationError("random initialization needs an rng")
        logits += rng.normal(0.0, scale, size=logits.shape)
    return AgentPolicy(agent_id, logits, space)


def _state_index(space: StateSpace, state) -> int:
    if isinstance(state, (int, np.integer)):
        return int(state)
    return space.state_index(state)


def token_logprob(agent: AgentPolicy, state, prefix, token: int) -> float:
    sp = agent.space
    if not 0 <= token < sp.vocab_size:
        raise DomainError(f"token {token} outside the vocabulary")
    prefix = tuple(prefix)
    if prefix not in sp.prefix_id:
        raise DomainError(f"prefix {prefix} is not a decision point")
    r = sp.row(_state_index(sp, state), prefix)
    return float(log_softmax(agent.logits[r])[token])


def message_logprob(agent: AgentPolicy, state, message) -> float:
    sp = agent.space
    msg = tuple(message)
    if msg not in sp.message_index:
        raise DomainError(f"{msg} is not a valid message")
    s = _state_index(sp, state)
    return float(sum(token_logprob(agent, s, msg[:u], t) for u, t in enumerate(msg)))


def sample_message(agent: AgentPolicy, state, rng) -> tuple:
    """Sample token by token until EOS or the length cap."""
    sp = agent.space
    s = _state_index(sp, state)
    if sp.terminal[s]:
        raise ValidationError("terminal states emit no messages")
    msg = ()
    eos = sp.env.eos_id
    while True:
        p = softmax(agent.logits[sp.row(s, msg)])
        tok = int(rng.choice(sp.vocab_size, p=p))
        msg = msg + (tok,)
        if tok == eos or len(msg) == sp.env.msg_len_max:
            return msg


class TeamPolicy:
    """One :class:`AgentPolicy` per agent; only the active agent speaks."""

    def __init__(self, agents, space: StateSpace):
        agents = tuple(agents)
        if len(agents) != space.env.n_agents:
            raise InitializationError("team size does not match the environment")
        for j, a in enumerate(agents):
            if a.agent_id != j or a.space is not space:
                raise InitializationError(f"agent slot {j} holds a mismatched policy")
        self.agents = agents
        self.space = space
        self._cache = None
        self._memo = {}

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def message_logprobs(self) -> np.ndarray:
        """Team log pi(m | s), shape (S, M); terminal rows are -inf."""
        if self._cache is None:
            sp = self.space
            out = np.full((sp.n_states, sp.n_messages), -np.inf)
            for j, agent in enumerate(self.agents):
                idx = np.flatnonzero(sp.active == j)
                if idx.size:
                    out[idx] = agent.message_logprobs(idx)
            self._cache = out
        return self._cache

    def message_probs(self) -> np.ndarray:
        return np.exp(self.message_logprobs())

    def copy(self) -> "TeamPolicy":
        return TeamPolicy([a.copy() for a in self.agents], self.space)


def init_team(space: StateSpace, scale: float = 0.0, rng=None, bias=None) -> TeamPolicy:
    return TeamPolicy([init_agent(space, j, scale, rng, bias) for j in range(space.env.n_agents)], space)


def replace_factor(team: TeamPolicy, j: int, new_agent: AgentPolicy) -> TeamPolicy:
    if not 0 <= j < team.n_agents:
        raise ValidationError(f"agent index {j} outside the team")
    if new_agent.agent_id != j:
        raise ValidationError("replacement policy carries a different agent id")
    agents = list(team.agents)
    agents[j] = new_agent
    return TeamPolicy(agents, team.space)


def fisher_matrix(probs) -> np.ndarray:
    """Fisher information of a categorical in logit coordinates."""
    p = np.asarray(probs, dtype=float)
    return np.diag(p) - np.outer(p, p)


# serialization


def _fmt_state(tokens, turn) -> str:
    return ".".join(map(str, tokens)) + "|" + str(turn)


def save_team(team: TeamPolicy, path) -> None:
    sp = team.space
    lines = [f"# {POLICY_FORMAT} agents={team.n_agents} vocab={sp.vocab_size} rows={sp.n_rows}"]
    for j, agent in enumerate(team.agents):
        for s in np.flatnonzero(sp.active == j):
            st = sp.states[s]
            for p, prefix in enumerate(sp.prefixes):
                vals = agent.logits[s * sp.n_prefix + p]
                if not np.any(vals):
                    continue
                pre = ".".join(map(str, prefix))
                lines.append(
                    f"{j}\t{_fmt_state(st.tokens, st.turn)}\t{pre}\t" + ",".join(repr(float(v)) for v in vals)
                )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_team(path, space: StateSpace) -> TeamPolicy:
    with open(path) as fh:
        header = fh.readline()
        if POLICY_FORMAT not in header:
            raise ValidationError(f"{path} is not a {POLICY_FORMAT} file")
        tables = [np.zeros((space.n_rows, space.vocab_size)) for _ in range(space.env.n_agents)]
        for line in fh:
            if not line.strip():
                continue
            j, skey, pre, vals = line.rstrip("\n").split("\t")
            toks, turn = skey.split("|")
            tokens = tuple(int(t) for t in toks.split(".")) if toks else ()
            prefix = tuple(int(t) for t in pre.split(".")) if pre else ()
            s = space.index[(tokens, int(turn))]
            tables[int(j)][space.row(s, prefix)] = [float(v) for v in vals.split(",")]
    return TeamPolicy([AgentPolicy(j, t, space) for j, t in enumerate(tables)], space)
