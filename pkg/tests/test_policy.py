import numpy as np
import pytest
from hypothesis import given, strategies as st

from teamtr.divergence import agent_state_kl
from teamtr.env import EnvConfig, StateSpace
from teamtr.errors import ValidationError
from teamtr.policy import (LOGIT_CLAMP, fisher_matrix, init_agent, init_team, load_team, message_logprob,
                           replace_factor, sample_message, save_team, token_logprob)

from conftest import random_team, tiny_env


def test_uniform_token_logprob():
    sp = StateSpace(EnvConfig(vocab_size=4, ctx_len_max=1))
    a = init_agent(sp, 0)
    assert token_logprob(a, 0, (), 2) == pytest.approx(np.log(0.25), abs=1e-15)


def test_hand_softmax_token_logprob():
    sp = StateSpace(tiny_env(ctx_len_max=1))
    a = init_agent(sp, 0, bias=[np.log(3.0), 0.0])
    assert token_logprob(a, 0, (), 0) == pytest.approx(np.log(0.75), abs=1e-15)
    assert np.exp([token_logprob(a, 0, (), t) for t in range(2)]).sum() == pytest.approx(1.0, abs=1e-15)


def test_single_token_message_equals_token():
    sp = StateSpace(tiny_env(ctx_len_max=1))
    a = init_agent(sp, 0, bias=[0.3, -0.2])
    assert message_logprob(a, 0, (1,)) == token_logprob(a, 0, (), 1)


def test_two_token_uniform_message():
    sp = StateSpace(EnvConfig(vocab_size=2, msg_len_max=2, ctx_len_max=2))
    assert message_logprob(init_agent(sp, 0), 0, (0, 1)) == pytest.approx(np.log(0.25), abs=1e-15)


def test_message_distribution_normalized(msg_space):
    team = random_team(msg_space, 3)
    live = msg_space.nonterminal()
    total = team.message_probs()[live].sum(axis=1)
    np.testing.assert_allclose(total, 1.0, atol=1e-10)


def test_sampling_near_deterministic(rng):
    sp = StateSpace(EnvConfig(vocab_size=3, ctx_len_max=1))
    a = init_agent(sp, 0, bias=[0.0, 25.0, 0.0])
    draws = [sample_message(a, 0, rng)[0] for _ in range(10_000)]
    assert np.mean(np.array(draws) == 1) >= 0.999


def test_sampling_uniform_frequency(rng):
    sp = StateSpace(tiny_env(ctx_len_max=1))
    a = init_agent(sp, 0)
    draws = np.array([sample_message(a, 0, rng)[0] for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) <= 0.01


def test_sampling_seeded_repeat(msg_space):
    a = random_team(msg_space, 0).agents[0]
    s = int(np.flatnonzero(msg_space.active == 0)[0])
    one = [sample_message(a, s, np.random.default_rng(5)) for _ in range(1)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_message(a, s, r1) for _ in range(50)] == [sample_message(a, s, r2) for _ in range(50)]
    assert one


def test_sampled_messages_follow_message_probs(msg_space):
    a = random_team(msg_space, 2).agents[0]
    s = int(np.flatnonzero(msg_space.active == 0)[0])
    r = np.random.default_rng(0)
    n = 20_000
    counts = np.zeros(msg_space.n_messages)
    for _ in range(n):
        counts[msg_space.message_index[sample_message(a, s, r)]] += 1
    p = np.exp(a.message_logprobs([s])[0])
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 4 * se + 1e-12)


def test_replace_identity_keeps_distributions(space2):
    team = random_team(space2, 1)
    same = replace_factor(team, 1, team.agents[1].copy())
    np.testing.assert_array_equal(same.message_logprobs(), team.message_logprobs())


def test_replace_isolates_other_factors(space2):
    team = random_team(space2, 1)
    new = init_agent(space2, 0, 2.0, np.random.default_rng(3))
    swapped = replace_factor(team, 0, new)
    assert np.all(agent_state_kl(team.agents[1], swapped.agents[1]) == 0)
    idx = np.flatnonzero(space2.active == 1)
    np.testing.assert_array_equal(swapped.message_logprobs()[idx], team.message_logprobs()[idx])


def test_replace_rejects_wrong_slot(space2):
    team = init_team(space2)
    with pytest.raises(ValidationError):
        replace_factor(team, 1, team.agents[0])


def test_statewise_kl_hand_value():
    sp = StateSpace(tiny_env(ctx_len_max=1))
    p = init_agent(sp, 0, bias=[np.log(3.0), 0.0])
    q = init_agent(sp, 0)
    expected = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
    assert agent_state_kl(p, q, [0])[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.130812, abs=1e-6)
    assert agent_state_kl(p, p, [0])[0] == 0.0


def test_statewise_kl_matches_enumeration(msg_space):
    p = random_team(msg_space, 4).agents[1]
    q = random_team(msg_space, 5).agents[1]
    states = np.flatnonzero(msg_space.active == 1)
    lp, lq = p.message_logprobs(states), q.message_logprobs(states)
    brute = [sum(np.exp(lp[i, m]) * (lp[i, m] - lq[i, m]) for m in range(msg_space.n_messages))
             for i in range(states.size)]
    np.testing.assert_allclose(agent_state_kl(p, q, states), brute, atol=1e-12)


def test_fisher_uniform_binary():
    np.testing.assert_allclose(fisher_matrix([0.5, 0.5]), [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


def test_fisher_degenerate_limit():
    p = np.array([1 - 1e-12, 1e-12])
    assert np.max(np.abs(fisher_matrix(p))) < 1e-11


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_fisher_psd(logits):
    p = np.exp(np.array(logits) - max(logits))
    p /= p.sum()
    assert np.linalg.eigvalsh(fisher_matrix(p)).min() >= -1e-12


def test_logits_are_clamped():
    sp = StateSpace(tiny_env(ctx_len_max=1))
    a = init_agent(sp, 0, bias=[100.0, -100.0])
    assert a.logits.max() == LOGIT_CLAMP and a.logits.min() == -LOGIT_CLAMP


def test_checkpoint_roundtrip(tmp_path, msg_space):
    team = random_team(msg_space, 8)
    path = tmp_path / "team.policy"
    save_team(team, path)
    back = load_team(path, msg_space)
    for a, b in zip(team.agents, back.agents):
        live = np.flatnonzero(msg_space.active == a.agent_id)
        np.testing.assert_array_equal(a.message_logprobs(live), b.message_logprobs(live))


def test_load_rejects_foreign_file(tmp_path, space2):
    path = tmp_path / "x.policy"
    path.write_text("not a policy\n")
    with pytest.raises(ValidationError):
        load_team(path, space2)
