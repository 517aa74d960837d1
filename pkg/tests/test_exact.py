import numpy as np
import pytest
from hypothesis import given, strategies as st

from teamtr.env import EnvConfig, RewardSpec, StateSpace
from teamtr.errors import DomainError
from teamtr.exact import (conditional_occupancy, exact_occupancy, exact_return, exact_values, induced_kernel,
                          occupancy_power, performance_difference, visit_counts)
from teamtr.policy import init_agent, init_team, replace_factor
from teamtr.scenarios import bandit, random_env

from conftest import random_space, random_team, tiny_env


def dense_oracle(team):
    """Occupancy and values via explicit matrix inverses built from per-state loops."""
    sp = team.space
    S, g = sp.n_states, sp.gamma
    P = np.zeros((S, S))
    r = np.zeros(S)
    probs = team.message_probs()
    for s in range(S):
        if sp.terminal[s]:
            P[s, s] = 1.0
            continue
        for m in range(sp.n_messages):
            P[s, sp.next_state[s, m]] += probs[s, m]
            r[s] += g * probs[s, m] * sp.reward[s, m]
    inv = np.linalg.inv(np.eye(S) - g * P)
    return (1 - g) * inv.T @ sp.mu, inv @ r


def mc_rollout(team, rng, n):
    """Discounted returns and discounted visit weights by direct simulation."""
    sp = team.space
    g = sp.gamma
    probs = team.message_probs()
    rets, visits = np.zeros(n), np.zeros((n, sp.n_states))
    for k in range(n):
        s = rng.choice(sp.n_states, p=sp.mu)
        t = 0
        while True:
            visits[k, s] += (1 - g) * g**t
            if sp.terminal[s]:
                visits[k, s] += g ** (t + 1)  # absorbing tail
                break
            m = rng.choice(sp.n_messages, p=probs[s])
            rets[k] += g ** (t + 1) * sp.reward[s, m]
            s = sp.next_state[s, m]
            t += 1
    return rets, visits


def test_absorbing_chain_occupancy():
    sp = StateSpace(EnvConfig(vocab_size=1, ctx_len_max=1, gamma=0.5))
    d = exact_occupancy(init_team(sp)).dist
    np.testing.assert_allclose(d, [0.5, 0.5], atol=1e-12)


def test_terminal_reward_return(terminal_reward_space):
    assert exact_return(init_team(terminal_reward_space)) == pytest.approx(0.5, abs=1e-12)


def test_zero_rewards_zero_return(space2):
    env = EnvConfig(vocab_size=3, ctx_len_max=3, n_agents=2)
    assert exact_return(random_team(StateSpace(env), 0)) == 0.0


def test_small_gamma_limit():
    env = random_env(np.random.default_rng(3), ctx_len_max=3, gamma=0.01)
    sp = StateSpace(env)
    d = exact_occupancy(random_team(sp, 1)).dist
    assert np.max(np.abs(d - 0.99 * sp.mu)) <= 2 * 0.01


def test_kernel_rows_stochastic(space2):
    P = induced_kernel(random_team(space2, 2))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_deterministic_policy_point_mass_rows():
    sp = StateSpace(tiny_env(ctx_len_max=2))
    team = init_team(sp, bias=[30.0, -30.0])
    P = induced_kernel(team)
    assert np.all(np.isclose(P.max(axis=1), 1.0, atol=1e-12))


def test_kernel_matches_sampled_transitions(space2):
    team = random_team(space2, 4)
    P = induced_kernel(team)
    s = int(np.flatnonzero(~space2.terminal)[0])
    rng = np.random.default_rng(0)
    n = 10_000
    nxt = space2.next_state[s, rng.choice(space2.n_messages, size=n, p=team.message_probs()[s])]
    freq = np.bincount(nxt, minlength=space2.n_states) / n
    se = np.sqrt(P[s] * (1 - P[s]) / n)
    assert np.all(np.abs(freq - P[s]) <= 3 * se + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_linear_solves_match_dense_oracle(seed):
    sp = random_space(seed, n_agents=2, ctx_len_max=3, msg_len_max=2)
    team = random_team(sp, seed)
    d, v = dense_oracle(team)
    np.testing.assert_allclose(exact_occupancy(team).dist, d, atol=1e-12)
    np.testing.assert_allclose(exact_values(team).v, v, atol=1e-12)
    np.testing.assert_allclose(occupancy_power(team), d, atol=1e-10)


def test_occupancy_and_return_match_monte_carlo(space2):
    team = random_team(space2, 5)
    rets, visits = mc_rollout(team, np.random.default_rng(1), 4000)
    assert abs(rets.mean() - exact_return(team)) <= 3 * rets.std(ddof=1) / np.sqrt(rets.size)
    d = exact_occupancy(team).dist
    se = visits.std(axis=0, ddof=1) / np.sqrt(visits.shape[0])
    assert np.all(np.abs(visits.mean(axis=0) - d) <= 3 * se + 1e-3)


def test_bandit_advantage_by_hand():
    sp = StateSpace(bandit([1.0, 0.0], gamma=0.5))
    team = init_team(sp, bias=[np.log(3.0), 0.0])
    vt = exact_values(team)
    # Q = g * r, V = 0.75 * 0.5 = 0.375
    np.testing.assert_allclose(vt.q[0], [0.5, 0.0], atol=1e-12)
    assert vt.v[0] == pytest.approx(0.375, abs=1e-12)
    np.testing.assert_allclose(vt.adv[0], [0.125, -0.375], atol=1e-12)


def test_constant_reward_gives_zero_advantage():
    table = {((), (0,)): 0.4, ((), (1,)): 0.4}
    env = tiny_env(ctx_len_max=1, reward_spec=RewardSpec("per-step-table", table))
    vt = exact_values(init_team(StateSpace(env), bias=[1.0, 0.0]))
    assert np.max(np.abs(vt.adv)) < 1e-12


@given(st.integers(0, 5000))
def test_value_table_invariants(seed):
    sp = random_space(seed % 50, n_agents=2, ctx_len_max=3)
    team = random_team(sp, seed, scale=2.0)
    vt = exact_values(team)
    occ = exact_occupancy(team)
    live = ~sp.terminal
    centering = np.sum(team.message_probs()[live] * vt.adv[live], axis=1)
    assert np.max(np.abs(centering)) <= 1e-9
    assert vt.a_max <= vt.a_max_bound + 1e-9
    assert occ.residual <= 1e-9 and occ.dist.min() >= -1e-12
    assert abs(exact_return(team)) <= sp.env.r_max / (1 - sp.gamma)


def test_pdl_same_policy_is_zero(space2):
    team = random_team(space2, 0)
    assert performance_difference(team, team) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_pdl_identity_random_pairs(seed):
    sp = random_space(seed, n_agents=2, ctx_len_max=3, msg_len_max=2)
    old, new = random_team(sp, seed), random_team(sp, seed + 100, scale=1.5)
    assert performance_difference(new, old) == pytest.approx(exact_return(new) - exact_return(old), abs=1e-8)


def test_pdl_single_factor_perturbation(space2):
    old = random_team(space2, 1)
    new = replace_factor(old, 1, init_agent(space2, 1, 1.0, np.random.default_rng(9)))
    assert performance_difference(new, old) == pytest.approx(exact_return(new) - exact_return(old), abs=1e-8)


def test_visit_counts_sum_to_expected_length():
    sp = StateSpace(tiny_env(ctx_len_max=3))
    # every path takes exactly three decisions before the cap
    assert visit_counts(init_team(sp)).sum() == pytest.approx(3.0, abs=1e-12)


def test_conditional_occupancy_normalized(space2):
    team = random_team(space2, 3)
    c = conditional_occupancy(team, 1)
    assert c.sum() == pytest.approx(1.0) and np.all(c[space2.active != 1] == 0)


def test_conditional_occupancy_absent_agent():
    sp = StateSpace(tiny_env(ctx_len_max=1, n_agents=2))
    with pytest.raises(DomainError):
        conditional_occupancy(init_team(sp), 1)
