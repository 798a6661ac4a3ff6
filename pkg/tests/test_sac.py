import dataclasses
import math

import numpy as np
import pytest

from busholding.corridor import DOWN, UP, Timetable
from busholding.env import Batch
from busholding.nn import CriticNet, PolicyNet
from busholding.sac import (SacAgent, SacConfig, actor_loss, critic_loss, critic_target, temperature_loss,
                            train, vocab_sizes)
from busholding.stochastic import RngStream
from helpers import VOCAB, max_rel_error, random_batch, random_states


@pytest.fixture
def agent():
    return SacAgent.create(VOCAB, 60.0, SacConfig(batch_size=32, lr=1e-3), 0)


def test_config_validation():
    for bad in ({"tau": 0.0}, {"tau": 1.5}, {"gamma": 1.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            SacConfig(**bad)


def test_defaults():
    c = SacConfig()
    assert (c.gamma, c.tau, c.lr, c.batch_size, c.target_entropy, c.warmup_tuples, c.alpha_init) == \
        (0.99, 0.005, 1e-5, 2048, -1.0, 5000, 0.2)
    assert c.updates_per_episode is None and c.buffer_capacity == 1_000_000


def test_targets_start_equal(agent):
    for online, target in ((agent.q1, agent.q1_targ), (agent.q2, agent.q2_targ)):
        assert all(np.array_equal(online.params[k], target.params[k]) for k in online.params)
        assert all(online.params[k] is not target.params[k] for k in online.params)


def test_target_terminal_and_gamma_zero(agent):
    rng = np.random.default_rng(0)
    b = random_batch(rng, 16)
    noise = rng.standard_normal(16)
    b.done[:] = 1.0
    y = critic_target(b, agent.policy, agent.q1_targ, agent.q2_targ, 0.2, 0.99, noise)
    assert np.array_equal(y, b.reward)
    b.done[:] = 0.0
    y = critic_target(b, agent.policy, agent.q1_targ, agent.q2_targ, 0.2, 0.0, noise)
    assert np.array_equal(y, b.reward)


def test_target_soft_backup_by_hand(agent):
    """Two-state chain s -> s' with known target-network values."""
    rng = np.random.default_rng(1)
    b = random_batch(rng, 2)
    b.done[:] = [0.0, 1.0]
    noise = rng.standard_normal(2)
    a2, logp2, _ = agent.policy.sample(b.next_cat, b.next_num, noise)
    v1, _ = agent.q1_targ.q(b.next_cat, b.next_num, a2)
    v2, _ = agent.q2_targ.q(b.next_cat, b.next_num, a2)
    alpha, gamma = 0.37, 0.9
    expected0 = b.reward[0] + gamma * (min(v1[0], v2[0]) - alpha * logp2[0])
    y = critic_target(b, agent.policy, agent.q1_targ, agent.q2_targ, alpha, gamma, noise)
    assert abs(y[0] - expected0) < 1e-10
    assert y[1] == b.reward[1]
    # alpha = 0: clipped double-Q TD target
    y0 = critic_target(b, agent.policy, agent.q1_targ, agent.q2_targ, 0.0, gamma, noise)
    assert abs(y0[0] - (b.reward[0] + gamma * min(v1[0], v2[0]))) < 1e-10


def test_critic_loss_examples(agent):
    b = random_batch(np.random.default_rng(2), 8)
    q, _ = agent.q1.q(b.cat, b.num, b.action)
    loss, g = critic_loss(agent.q1, b, q.copy())
    assert loss == 0.0 and all(np.all(v == 0) for v in g.values())
    loss, _ = critic_loss(agent.q1, b, q - 1.5)
    assert loss == pytest.approx(2.25)


def test_critic_overfits_one_batch(agent):
    b = random_batch(np.random.default_rng(3), 64)
    y = np.random.default_rng(4).normal(size=64)
    first = critic_loss(agent.q1, b, y)[0]
    for _ in range(100):
        _, g = critic_loss(agent.q1, b, y)
        agent.opt_q1.step(agent.q1.params, g)
    assert critic_loss(agent.q1, b, y)[0] < first


class BowlCritic:
    """Q(s, a) = -(a - a_star)^2, independent of the state."""

    def __init__(self, a_star):
        self.a_star = a_star

    def q(self, cat, num, action, design=None):
        return -(action - self.a_star) ** 2, action

    def q_backward(self, cache, dq, grads=None, param_grads=True):
        return grads, dq * (-2.0 * (cache - self.a_star))


class FlatCritic(BowlCritic):
    def q(self, cat, num, action, design=None):
        return np.zeros_like(action), action

    def q_backward(self, cache, dq, grads=None, param_grads=True):
        return grads, np.zeros_like(dq)


def test_actor_flat_objective_zero_gradient(agent):
    cat, num = random_states(np.random.default_rng(5), 16)
    noise = np.random.default_rng(6).standard_normal(16)
    flat = FlatCritic(0.0)
    _, g, _ = actor_loss(agent.policy, flat, flat, cat, num, noise, 0.0)
    assert all(np.all(v == 0) for v in g.values())


def test_actor_moves_to_bowl(agent):
    pi = agent.policy
    cat, num = random_states(np.random.default_rng(7), 64)
    bowl = BowlCritic(45.0)
    rng = np.random.default_rng(8)

    def mean_action():
        return float(pi.squash(pi.head(cat, num)[0]).mean())

    start = mean_action()
    for _ in range(300):
        _, g, _ = actor_loss(pi, bowl, bowl, cat, num, rng.standard_normal(64), 0.0)
        agent.opt_pi.step(pi.params, g)
    assert abs(mean_action() - 45.0) < abs(start - 45.0) - 5.0


def test_entropy_alone_widens_policy(agent):
    # start narrow: past std ~0.9 the tanh squashing piles mass at the bounds and
    # the action-space entropy falls again, so a wide start would legitimately shrink
    pi = agent.policy
    pi.params["l3.b"][1] = -3.0
    cat, num = random_states(np.random.default_rng(9), 64)
    flat = FlatCritic(0.0)
    rng = np.random.default_rng(10)
    start = float(pi.head(cat, num)[1].mean())
    for _ in range(200):
        _, g, _ = actor_loss(pi, flat, flat, cat, num, rng.standard_normal(64), 0.5)
        agent.opt_pi.step(pi.params, g)
    assert float(pi.head(cat, num)[1].mean()) > start


def test_temperature_loss_gradient():
    logp = np.random.default_rng(0).normal(size=32)
    for la in (-2.0, 0.0, 0.7):
        loss, g = temperature_loss(la, logp, -1.0)
        h = 1e-6
        fd = (temperature_loss(la + h, logp, -1.0)[0] - temperature_loss(la - h, logp, -1.0)[0]) / (2 * h)
        assert abs(fd - g) <= 1e-6 * max(1.0, abs(g))


def test_temperature_direction(agent):
    at_target = np.full(8, 1.0)      # log pi = -H_bar exactly
    assert temperature_loss(0.0, at_target, -1.0)[1] == 0.0
    before = agent.alpha
    agent.temperature_update(np.full(8, 3.0))     # entropy below target
    assert agent.alpha > before
    before = agent.alpha
    for _ in range(3):
        agent.temperature_update(np.full(8, -5.0))  # entropy above target
    assert agent.alpha < before
    assert agent.alpha > 0


def test_update_touches_targets_only_by_polyak(agent):
    b = random_batch(np.random.default_rng(11), 32)
    before = {k: v.copy() for k, v in agent.q1_targ.params.items()}
    agent.critic_update(b)
    agent.actor_update(b)
    assert all(np.array_equal(before[k], agent.q1_targ.params[k]) for k in before)
    agent.update(b)
    tau = agent.config.tau
    k = "l1.W"
    # after the full step: target = (1 - tau) * old + tau * online
    np.testing.assert_allclose(agent.q1_targ.params[k], (1 - tau) * before[k] + tau * agent.q1.params[k],
                               rtol=1e-12, atol=1e-15)


def test_small_training_is_reproducible(empty_scenario, scenario):
    small = scenario.replace(timetables=(Timetable(DOWN, (180, 540, 900), 360), Timetable(UP, (0, 360, 720), 360)))
    cfg = SacConfig(batch_size=32, warmup_tuples=64, lr=1e-3)
    r1 = train(small, cfg, 3, seed=4)
    r2 = train(small, cfg, 3, seed=4)
    assert [m.cum_reward for m in r1.metrics] == [m.cum_reward for m in r2.metrics]
    assert r1.metrics[-1].updates == r1.metrics[-1].decisions == 120
    assert all(np.array_equal(r1.agent.policy.params[k], r2.agent.policy.params[k]) for k in r1.agent.policy.params)


def test_zero_episodes_leaves_agent(scenario):
    cfg = SacConfig()
    agent = SacAgent.create(vocab_sizes(scenario), 60.0, cfg, 1)
    snap = {k: v.copy() for k, v in agent.policy.params.items()}
    res = train(scenario, cfg, 0, 1, agent=agent)
    assert res.metrics == [] and agent.step == 0
    assert all(np.array_equal(snap[k], agent.policy.params[k]) for k in snap)


def test_save_load_agent(agent, tmp_path):
    agent.update(random_batch(np.random.default_rng(12), 32))
    agent.save(tmp_path / "a.npz")
    back = SacAgent.load(tmp_path / "a.npz")
    assert back.config == agent.config and back.step == 1
    assert back.log_alpha == agent.log_alpha
    assert back.opt_pi.t == agent.opt_pi.t
    cat, num = random_states(np.random.default_rng(13), 5)
    assert np.array_equal(back.policy.head(cat, num)[0], agent.policy.head(cat, num)[0])
