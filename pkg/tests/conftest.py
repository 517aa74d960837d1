import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from teamtr.env import EnvConfig, RewardSpec, StateSpace
from teamtr.policy import init_team
from teamtr.scenarios import random_env

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_env(**kw):
    base = dict(vocab_size=2, ctx_len_max=2, n_agents=1, gamma=0.5)
    base.update(kw)
    return EnvConfig(**base)


def random_space(seed, **kw):
    rng = np.random.default_rng(seed)
    return StateSpace(random_env(rng, **kw))


def random_team(space, seed, scale=1.0):
    return init_team(space, scale, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def space2():
    """Two agents, vocab 3, contexts up to 3 tokens, random rewards."""
    return random_space(7, n_agents=2, vocab_size=3, ctx_len_max=3)


@pytest.fixture
def msg_space():
    """Multi-token messages with EOS, two agents."""
    return random_space(11, n_agents=2, vocab_size=3, ctx_len_max=4, msg_len_max=2)


@pytest.fixture
def terminal_reward_space():
    env = tiny_env(ctx_len_max=1, reward_spec=RewardSpec("terminal-pattern", {(0,): 1.0, (1,): 1.0}))
    return StateSpace(env)
