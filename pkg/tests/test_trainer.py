import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import softmax

from teamtr.advantage import AdvantageConfig, batch_advantages, collect_rollouts, sample_prompts
from teamtr.env import StateSpace
from teamtr.errors import ConfigError, ValidationError
from teamtr.exact import exact_occupancy, exact_values
from teamtr.policy import init_agent, init_team, replace_factor
from teamtr.scenarios import handoff, stop_chain
from teamtr.trainer import (PpoConfig, StagePlan, TrustRegionSchedule, _AgentData, agent_order, check_mode,
                            importance_weights, likelihood_ratio, pga_step, ppo_objective, run_stage, score_bounds,
                            smoothness_constant, train, update_agent)

from conftest import random_space, random_team, tiny_env

ADV = AdvantageConfig(group_size=4, a_clip=3.0, eps_norm=1e-6)


def _setup(space, seed=0, n=30):
    team = random_team(space, seed)
    rng = np.random.default_rng(seed)
    batch = collect_rollouts(team, sample_prompts(team, n, rng), ADV.group_size, rng)
    step_adv, _, _ = batch_advantages(batch, ADV)
    return team, batch, step_adv


def test_likelihood_ratio_hand_value():
    assert likelihood_ratio(np.log(0.75), np.log(0.5)) == pytest.approx(1.5)
    assert likelihood_ratio(-0.3, -0.3) == 1.0


def test_ratio_is_product_of_token_ratios(msg_space):
    p, q = random_team(msg_space, 0).agents[0], random_team(msg_space, 1).agents[0]
    s = int(np.flatnonzero(msg_space.active == 0)[0])
    m = int(np.argmax(msg_space.msg_len))
    rows = s * msg_space.n_prefix + msg_space.msg_prefix[m]
    lp = p.token_logprobs()[rows, msg_space.msg_tokens[m]][: msg_space.msg_len[m]]
    lq = q.token_logprobs()[rows, msg_space.msg_tokens[m]][: msg_space.msg_len[m]]
    total = p.message_logprobs([s])[0, m] - q.message_logprobs([s])[0, m]
    assert total == pytest.approx(float(np.sum(lp - lq)), abs=1e-12)


def test_objective_at_behavior_is_mean_advantage(space2):
    team, batch, step_adv = _setup(space2)
    data = _AgentData(batch, 0, step_adv, space2)
    obj, _ = ppo_objective(data, team.agents[0].logits, 0.2, 5.0)
    assert obj == pytest.approx(float(data.w @ data.adv), abs=1e-12)


def test_objective_zero_advantage_is_negative_penalty(space2):
    team, batch, _ = _setup(space2)
    data = _AgentData(batch, 0, np.zeros(batch.step_state.size), space2)
    theta = random_team(space2, 9).agents[0].logits
    obj, _ = ppo_objective(data, theta, 0.2, 2.0)
    assert obj == pytest.approx(-2.0 * data.monitor(theta), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_objective_gradient_matches_finite_differences(seed, msg_space):
    team, batch, step_adv = _setup(msg_space, seed, n=20)
    data = _AgentData(batch, 0, step_adv, msg_space)
    theta = team.agents[0].logits + 0.05 * np.random.default_rng(seed).normal(size=team.agents[0].logits.shape)
    _, grad = ppo_objective(data, theta, 0.2, 0.7)
    touched = np.unique(data.rows)
    rng = np.random.default_rng(seed + 10)
    h = 1e-6
    for _ in range(15):
        r, v = int(rng.choice(touched)), int(rng.integers(msg_space.vocab_size))
        e = np.zeros_like(theta)
        e[r, v] = h
        fd = (ppo_objective(data, theta + e, 0.2, 0.7, False)[0] - ppo_objective(data, theta - e, 0.2, 0.7, False)[0]) / (2 * h)
        assert abs(fd - grad[r, v]) <= 1e-5 * max(1.0, abs(fd))


def test_zero_learning_rate_leaves_policy(space2):
    team, batch, step_adv = _setup(space2)
    new, info = update_agent(team, 0, batch, step_adv, 0.02, PpoConfig(lr=0.0))
    np.testing.assert_array_equal(new.logits, team.agents[0].logits)
    assert info.kl_monitor == 0.0


def test_rejected_update_returns_behavior(space2):
    team, batch, step_adv = _setup(space2)
    cfg = PpoConfig(lr=50.0, max_inner_steps=1)
    new, info = update_agent(team, 0, batch, step_adv, 1e-6, cfg)
    assert not info.accepted and new is team.agents[0]


def test_infinite_radius_equals_no_trust_region(space2):
    team = random_team(space2, 0)
    ppo = PpoConfig(beta_init=0.0, max_inner_steps=10)
    plan_inf = StagePlan("teamtr", n_prompts=8, schedule=TrustRegionSchedule(radius=np.inf))
    plan_ntr = StagePlan("no-trust-region", n_prompts=8)
    a = run_stage(team, plan_inf, ADV, ppo, 3, 1)
    b = run_stage(team, plan_ntr, ADV, ppo, 3, 1)
    for x, y in zip(a.team.agents, b.team.agents):
        np.testing.assert_array_equal(x.logits, y.logits)


def test_accepted_updates_respect_radius():
    sp = StateSpace(handoff(3))
    team = init_team(sp)
    plan = StagePlan("teamtr", "fixed", n_prompts=32, schedule=TrustRegionSchedule(radius=0.05))
    _, logs, _ = train(team, plan, AdvantageConfig(), PpoConfig(), 0, 6)
    acc = [l for l in logs if l.accepted]
    assert acc and all(l.kl_monitor <= l.delta for l in acc)
    assert np.mean([l.kl_exact <= 1.25 * l.delta for l in acc]) >= 0.95


def test_step_kl_equals_updated_factor_kl():
    sp = StateSpace(handoff(3))
    for mode in ("teamtr", "stale", "stale-is"):
        _, logs, _ = train(init_team(sp), StagePlan(mode, n_prompts=16), AdvantageConfig(), PpoConfig(), 1, 2)
        for l in logs:
            assert l.kl_exact == pytest.approx(l.kl_factor_exact, abs=1e-12)


def test_stage_is_deterministic(space2):
    plan = StagePlan("teamtr", "random", n_prompts=8)
    a = run_stage(random_team(space2, 0), plan, ADV, PpoConfig(), 11, 1)
    b = run_stage(random_team(space2, 0), plan, ADV, PpoConfig(), 11, 1)
    assert [l.as_dict() for l in a.logs] == [l.as_dict() for l in b.logs]


def test_single_agent_stage_has_one_update():
    sp = StateSpace(tiny_env(ctx_len_max=2))
    res = run_stage(init_team(sp), StagePlan(n_prompts=4), ADV, PpoConfig(), 0, 1)
    assert len(res.logs) == 1


def test_first_stale_step_has_no_gap():
    sp = StateSpace(handoff(3))
    res = run_stage(init_team(sp), StagePlan("stale", n_prompts=16), AdvantageConfig(), PpoConfig(), 0, 1)
    assert res.logs[0].gap_exact == 0.0 and res.logs[0].l_hat_seq == res.logs[0].l_hat_stale


def test_resample_every_update_equals_teamtr():
    sp = StateSpace(handoff(3))
    a = run_stage(init_team(sp), StagePlan("teamtr", n_prompts=16), AdvantageConfig(), PpoConfig(), 4, 1)
    b = run_stage(init_team(sp), StagePlan("resample-k", resample_every=1, n_prompts=16), AdvantageConfig(),
                  PpoConfig(), 4, 1)
    for x, y in zip(a.team.agents, b.team.agents):
        np.testing.assert_array_equal(x.logits, y.logits)
    assert [l.kl_monitor for l in a.logs] == [l.kl_monitor for l in b.logs]


def test_joint_single_agent_equals_sequential():
    sp = StateSpace(stop_chain(1, rounds=3))
    a = run_stage(init_team(sp), StagePlan("teamtr", n_prompts=16), AdvantageConfig(), PpoConfig(), 2, 1)
    b = run_stage(init_team(sp), StagePlan("joint", n_prompts=16), AdvantageConfig(), PpoConfig(), 2, 1)
    np.testing.assert_array_equal(a.team.agents[0].logits, b.team.agents[0].logits)
    assert a.j_end == pytest.approx(b.j_end, abs=1e-15)


def test_joint_team_kl_differs_from_factor_kl():
    sp = StateSpace(handoff(3))
    res = run_stage(init_team(sp), StagePlan("joint", n_prompts=32), AdvantageConfig(), PpoConfig(), 0, 1)
    assert any(abs(l.kl_exact - l.kl_factor_exact) > 1e-6 for l in res.logs)


def test_joint_is_deterministic():
    sp = StateSpace(handoff(3))
    plan = StagePlan("joint", n_prompts=16)
    a = run_stage(init_team(sp), plan, AdvantageConfig(), PpoConfig(), 5, 2)
    b = run_stage(init_team(sp), plan, AdvantageConfig(), PpoConfig(), 5, 2)
    assert [l.as_dict() for l in a.logs] == [l.as_dict() for l in b.logs]


def test_importance_weights_hand_value():
    sp = StateSpace(tiny_env(ctx_len_max=1))
    base = init_team(sp)
    cur = replace_factor(base, 0, init_agent(sp, 0, bias=[np.log(3.0), 0.0]))
    batch = collect_rollouts(base, [0] * 50, 2, np.random.default_rng(0))
    w = importance_weights(batch, base, cur, [0])
    expect = np.where(batch.step_msg == 0, 1.5, 0.5)
    np.testing.assert_allclose(w, expect, atol=1e-12)
    assert np.all(importance_weights(batch, base, cur, []) == 1.0)


def test_importance_weights_unbiased(space2):
    base = random_team(space2, 0)
    cur = replace_factor(base, 0, init_agent(space2, 0, 0.5, np.random.default_rng(2)))
    rng = np.random.default_rng(1)
    batch = collect_rollouts(base, sample_prompts(base, 20_000, rng), 1, rng)
    w = importance_weights(batch, base, cur, [0])
    assert abs(w.mean() - 1.0) <= 4 * w.std(ddof=1) / np.sqrt(w.size)


def test_score_bounds_uniform_binary():
    sp = StateSpace(tiny_env(ctx_len_max=1))
    b1, b2 = score_bounds(init_team(sp))
    assert b1 == pytest.approx(np.sqrt(0.5), abs=1e-12)
    assert b2 == pytest.approx(0.5, abs=1e-12)  # largest eigenvalue of diag(p) - pp^T at p = (1/2, 1/2)


def test_smoothness_constant_linear_in_agents_and_clip():
    base = smoothness_constant(1, 1.0, 0.5, 0.7, 0.5)
    assert smoothness_constant(3, 1.0, 0.5, 0.7, 0.5) == pytest.approx(3 * base)
    assert smoothness_constant(1, 2.5, 0.5, 0.7, 0.5) == pytest.approx(2.5 * base)


@pytest.mark.parametrize("seed", range(3))
def test_surrogate_hessian_below_smoothness(seed):
    """Finite-difference Hessian of the exact clipped-advantage surrogate."""
    sp = random_space(seed, n_agents=1, vocab_size=3, ctx_len_max=2)
    team = random_team(sp, seed)
    a_clip = 1.0
    adv = np.clip(exact_values(team).adv, -a_clip, a_clip)
    d = exact_occupancy(team).dist
    g = sp.gamma
    live = np.flatnonzero(~sp.terminal)
    theta0 = team.agents[0].logits[live].ravel()

    def f(theta):
        p = softmax(theta.reshape(live.size, -1), axis=1)
        return float(d[live] @ np.sum(p * adv[live], axis=1)) / (1 - g)

    h = 1e-4
    k = theta0.size
    H = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            ea, eb = np.eye(k)[a] * h, np.eye(k)[b] * h
            H[a, b] = (f(theta0 + ea + eb) - f(theta0 + ea - eb) - f(theta0 - ea + eb) + f(theta0 - ea - eb)) / (4 * h * h)
    b1, b2 = score_bounds(team)
    assert np.abs(np.linalg.eigvalsh((H + H.T) / 2)).max() <= smoothness_constant(1, a_clip, g, b1, b2)


def test_pga_zero_gradient_fixed_point():
    th = np.array([0.3, -0.2])
    nxt, gmap = pga_step(th, lambda t: np.zeros(2), 0.1, np.zeros(2), 1.0)
    np.testing.assert_array_equal(nxt, th)
    assert np.all(gmap == 0)


def test_pga_ascent_inequality_on_quadratic():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    Q = A @ A.T + np.eye(4)
    c = rng.normal(size=4) * 3
    G = lambda t: -0.5 * (t - c) @ Q @ (t - c)
    grad = lambda t: -Q @ (t - c)
    L = np.linalg.eigvalsh(Q).max()
    eta = 1.0 / L
    th = np.zeros(4)
    vals, norms = [G(th)], []
    for _ in range(100):
        nxt, gmap = pga_step(th, grad, eta, np.zeros(4), 1.0)
        assert G(nxt) >= G(th) + 0.5 * eta * gmap @ gmap - 1e-12
        norms.append(gmap @ gmap)
        th = nxt
        vals.append(G(th))
    assert np.linalg.norm(th) <= 1.0 + 1e-12
    assert np.mean(norms) <= 2 * (max(vals) - vals[0]) / (eta * 100) + 1e-12


@given(st.integers(1, 7), st.sampled_from(["fixed", "reverse", "random"]), st.integers(0, 100))
def test_agent_order_is_permutation(n, order, seed):
    perm = agent_order(n, StagePlan(order=order), np.random.default_rng(seed))
    assert sorted(perm) == list(range(n))


def test_plan_and_config_validation():
    with pytest.raises(ConfigError):
        StagePlan(mode="sideways")
    with pytest.raises(ConfigError):
        PpoConfig(ppo_eps=1.5)
    with pytest.raises(ConfigError):
        TrustRegionSchedule(radius=-1.0)
    with pytest.raises(ValidationError):
        check_mode("sideways")


def test_train_stage_numbering(space2):
    seen = []
    train(random_team(space2, 0), StagePlan(n_prompts=4), ADV, PpoConfig(), 0, 2,
          callback=lambda k, res: seen.append(k), first_stage=3)
    assert seen == [3, 4]
