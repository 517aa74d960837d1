"""Exact linear-algebra evaluation of a team on an enumerated state space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import spsolve

from .errors import DomainError, NumericalError
from .policy import TeamPolicy


@dataclass(frozen=True)
class OccupancyMeasure:
    dist: np.ndarray
    gamma: float
    residual: float


@dataclass(frozen=True)
class ValueTable:
    v: np.ndarray  # (S,)
    q: np.ndarray  # (S, M), zero at terminal rows
    adv: np.ndarray  # (S, M), zero at terminal rows
    a_max: float  # max |A| over reachable non-terminal decisions
    gamma: float
    r_max: float

    @property
    def a_max_bound(self) -> float:
        return 2.0 * self.r_max / (1.0 - self.gamma)


def induced_kernel(team: TeamPolicy) -> np.ndarray:
    """State transition matrix under the team; terminal states self-loop."""
    sp = team.space
    S = sp.n_states
    P = np.zeros((S, S))
    probs = team.message_probs()
    live = sp.nonterminal()
    rows = np.repeat(live, sp.n_messages)
    np.add.at(P, (rows, sp.next_state[live].ravel()), probs[live].ravel())
    term = np.flatnonzero(sp.terminal)
    P[term, term] = 1.0
    return P


def sparse_kernel(team: TeamPolicy) -> sps.csr_matrix:
    sp = team.space
    S = sp.n_states
    probs = team.message_probs()
    live = sp.nonterminal()
    term = np.flatnonzero(sp.terminal)
    rows = np.concatenate([np.repeat(live, sp.n_messages), term])
    cols = np.concatenate([sp.next_state[live].ravel(), term])
    vals = np.concatenate([probs[live].ravel(), np.ones(term.size)])
    return sps.csr_matrix((vals, (rows, cols)), shape=(S, S))


def _solve(A, b):
    if A.shape[0] <= 400:
        return np.linalg.solve(A.toarray(), b)
    return spsolve(A.tocsc(), b)


def expected_reward(team: TeamPolicy) -> np.ndarray:
    """Per-state discounted expected transition reward (arrival credit)."""
    sp = team.space
    probs = np.where(sp.terminal[:, None], 0.0, team.message_probs())
    return sp.gamma * np.sum(probs * sp.reward, axis=1)


def exact_occupancy(team: TeamPolicy, init=None) -> OccupancyMeasure:
    """Normalized discounted occupancy d = (1-g) mu + g P^T d."""
    if init is None and "occ" in team._memo:
        return team._memo["occ"]
    sp = team.space
    g = sp.gamma
    mu = sp.mu if init is None else np.asarray(init, dtype=float)
    P = sparse_kernel(team)
    A = sps.identity(sp.n_states, format="csr") - g * P.T
    d = _solve(A, (1.0 - g) * mu)
    if not np.all(np.isfinite(d)):
        raise NumericalError("occupancy solve produced non-finite values")
    d = np.clip(d, 0.0, None)
    residual = float(np.max(np.abs(d - (1.0 - g) * mu - g * (P.T @ d))))
    if residual > 1e-9 or abs(d.sum() - 1.0) > 1e-9:
        raise NumericalError(f"occupancy residual {residual:.3e} too large")
    occ = OccupancyMeasure(d, g, residual)
    if init is None:
        team._memo["occ"] = occ
    return occ


def occupancy_power(team: TeamPolicy, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Fixed-point iteration of the occupancy equation; slow cross-check."""
    sp = team.space
    g = sp.gamma
    P = induced_kernel(team)
    d = sp.mu.copy()
    for _ in range(max_iter):
        nxt = (1.0 - g) * sp.mu + g * P.T @ d
        if np.max(np.abs(nxt - d)) < tol:
            return nxt
        d = nxt
    raise NumericalError("power iteration did not converge")


def visit_counts(team: TeamPolicy) -> np.ndarray:
    """Expected undiscounted visits to each non-terminal state."""
    sp = team.space
    live = sp.nonterminal()
    P = sparse_kernel(team)[live][:, live]
    out = np.zeros(sp.n_states)
    out[live] = _solve(sps.identity(live.size, format="csr") - P.T, sp.mu[live])
    return out


def exact_values(team: TeamPolicy) -> ValueTable:
    if "values" in team._memo:
        return team._memo["values"]
    sp = team.space
    g = sp.gamma
    P = sparse_kernel(team)
    v = _solve(sps.identity(sp.n_states, format="csr") - g * P, expected_reward(team))
    if not np.all(np.isfinite(v)):
        raise NumericalError("value solve produced non-finite values")
    live = ~sp.terminal
    nxt = np.where(live[:, None], sp.next_state, 0)
    q = np.where(live[:, None], g * (sp.reward + v[nxt]), 0.0)
    adv = np.where(live[:, None], q - v[:, None], 0.0)
    a_max = float(np.max(np.abs(adv[live]))) if live.any() else 0.0
    vt = ValueTable(v, q, adv, a_max, g, sp.env.r_max)
    team._memo["values"] = vt
    return vt


def exact_return(team: TeamPolicy) -> float:
    return float(team.space.mu @ exact_values(team).v)


def expected_under(team: TeamPolicy, table: np.ndarray) -> np.ndarray:
    """Per-state expectation E_{m ~ team(.|s)} table[s, m]; zero at terminals."""
    probs = np.where(team.space.terminal[:, None], 0.0, team.message_probs())
    return np.sum(probs * table, axis=1)


def performance_difference(team_new: TeamPolicy, team_old: TeamPolicy) -> float:
    """(1/(1-g)) E_{s ~ d_new, m ~ new}[A_old(s, m)], which equals J(new) - J(old)."""
    g = team_new.space.gamma
    d_new = exact_occupancy(team_new).dist
    adv = exact_values(team_old).adv
    return float(d_new @ expected_under(team_new, adv)) / (1.0 - g)


def exact_surrogate(d: np.ndarray, team_new: TeamPolicy, table: np.ndarray) -> float:
    """(1/(1-g)) E_{s ~ d, m ~ new}[table(s, m)]."""
    return float(d @ expected_under(team_new, table)) / (1.0 - team_new.space.gamma)


def tv_distance(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def conditional_occupancy(team: TeamPolicy, j: int, d=None) -> np.ndarray:
    """Occupancy restricted to states where agent j is active, renormalized."""
    sp = team.space
    d = exact_occupancy(team).dist if d is None else d
    w = np.where(sp.active == j, d, 0.0)
    total = w.sum()
    if total <= 0:
        raise DomainError(f"agent {j} is never active under this team")
    return w / total
