import numpy as np
import pytest

from teamtr.env import StateSpace
from teamtr.errors import ConfigError, ValidationError
from teamtr.exact import conditional_occupancy, exact_occupancy, exact_return
from teamtr.plugswap import (SwapConfig, apply_swap, probe_kl, probe_set, stage0_align, swap_shock,
                             swap_shock_metric)
from teamtr.policy import init_agent, init_team
from teamtr.scenarios import handoff

from conftest import random_team, tiny_env


def test_single_agent_probes_follow_occupancy():
    sp = StateSpace(tiny_env(ctx_len_max=3))
    team = init_team(sp, bias=[0.4, 0.0])
    w = conditional_occupancy(team, 0)
    live = ~sp.terminal
    d = np.where(live, exact_occupancy(team).dist, 0.0)
    np.testing.assert_allclose(w, d / d.sum(), atol=1e-12)


def test_probe_frequencies_match_conditional_occupancy(space2):
    team = random_team(space2, 0)
    n = 20_000
    probes = probe_set(team, 1, n, np.random.default_rng(0))
    w = conditional_occupancy(team, 1)
    freq = np.bincount(probes, minlength=w.size) / n
    se = np.sqrt(w * (1 - w) / n)
    assert np.all(np.abs(freq - w) <= 3 * se + 1e-12)
    assert np.all(space2.active[probes] == 1)


def test_probe_set_seeded(space2):
    team = random_team(space2, 0)
    a = probe_set(team, 0, 50, np.random.default_rng(4))
    b = probe_set(team, 0, 50, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_align_identical_is_immediate(space2):
    team = random_team(space2, 0)
    probes = probe_set(team, 0, 20, np.random.default_rng(0))
    aligned, steps, ok = stage0_align(team.agents[0], team.agents[0].copy(), probes, SwapConfig())
    assert steps == 0 and ok


@pytest.mark.parametrize("seed", range(4))
def test_align_reaches_tolerance(seed, msg_space):
    team = random_team(msg_space, seed)
    incoming = init_agent(msg_space, 1, 2.0, np.random.default_rng(seed + 30))
    probes = probe_set(team, 1, 50, np.random.default_rng(seed))
    aligned, steps, ok = stage0_align(team.agents[1], incoming, probes, SwapConfig(delta_align=0.01))
    assert ok and steps > 0
    assert probe_kl(team.agents[1], aligned, probes) <= 0.01


def test_alignment_loss_nonincreasing_small_lr(space2):
    team = random_team(space2, 0)
    old = team.agents[0]
    incoming = init_agent(space2, 0, 2.0, np.random.default_rng(1))
    probes = probe_set(team, 0, 30, np.random.default_rng(2))
    losses = [probe_kl(old, incoming, probes)]
    cur = incoming
    for _ in range(30):
        cur, _, _ = stage0_align(old, cur, probes, SwapConfig(delta_align=1e-9, align_lr=0.2, align_max_steps=1))
        losses.append(probe_kl(old, cur, probes))
    assert np.all(np.diff(losses) <= 1e-12)


def test_swap_with_same_agent_has_no_shock(space2):
    team = random_team(space2, 0)
    for strat in ("direct", "aligned"):
        new_team, rep = apply_swap(team, 0, team.agents[0].copy(), SwapConfig(strat), np.random.default_rng(0))
        assert rep.shock == 0.0 and rep.j_after == pytest.approx(rep.j_before, abs=1e-14)


def test_aligned_swap_softens_shock():
    sp = StateSpace(handoff(3))
    team = init_team(sp, bias=[0.0, 2.0, -1.0])
    shocks = {"direct": [], "aligned": []}
    for seed in range(8):
        incoming = init_agent(sp, 0, 2.0, np.random.default_rng(seed))
        for strat in shocks:
            _, rep = apply_swap(team, 0, incoming, SwapConfig(strat), np.random.default_rng(100 + seed))
            shocks[strat].append(rep.shock)
    assert np.median(shocks["direct"]) > 0
    assert np.median(shocks["aligned"]) < np.median(shocks["direct"])


def test_retrain_starts_from_reinitialized_team(space2):
    team = random_team(space2, 0, scale=2.0)
    incoming = init_agent(space2, 1, 1.0, np.random.default_rng(3))
    new_team, rep = apply_swap(team, 1, incoming, SwapConfig("retrain"), np.random.default_rng(0))
    np.testing.assert_array_equal(new_team.agents[0].logits, init_team(space2).agents[0].logits)
    assert rep.j_after == pytest.approx(exact_return(new_team))


def test_swap_rejects_foreign_slot(space2):
    team = random_team(space2, 0)
    with pytest.raises(ValidationError):
        apply_swap(team, 0, team.agents[1], SwapConfig(), np.random.default_rng(0))


def test_shock_metric_examples():
    assert swap_shock_metric([0.8, 0.6], None) == 0.0
    assert swap_shock_metric([0.8, 0.6], 1) == pytest.approx(0.2)
    assert swap_shock_metric([0.6, 0.8], 1) == 0.0
    assert swap_shock(1.0, 0.5) == 0.5
    with pytest.raises(ValidationError):
        swap_shock_metric([0.8], 1)


def test_swap_config_validation():
    with pytest.raises(ConfigError):
        SwapConfig("teleport")
    with pytest.raises(ConfigError):
        SwapConfig(probe_size=0)
