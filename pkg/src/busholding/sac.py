"""Soft actor-critic for the holding agent.

One policy and two critics (plus Polyak-averaged target critics) are shared by
every bus; the categorical part of the state tells them apart.  Training
alternates a full simulated day with the policy sampling actions and a burst
of gradient steps, one per decision taken that day.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corridor import N_HOURS, N_STOPS, ScenarioConfig
from .env import Batch, ReplayBuffer, StateVector, TransitionAssembler, sample_batch
from .nn import (Adam, CriticNet, GradientError, PolicyNet, load_checkpoint, polyak_update,
                 save_checkpoint, tune_allocator)
from .sim import run_episode
from .stochastic import INIT, POLICY, RngStream

log = logging.getLogger(__name__)


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 1e-5
    batch_size: int = 2048
    target_entropy: float = -1.0
    warmup_tuples: int = 5000
    alpha_init: float = 0.2
    reward_scale: float = 0.01
    buffer_capacity: int = 1_000_000
    updates_per_episode: int | None = None   # None: one per decision taken in the episode
    hidden: tuple[int, ...] = (32, 32, 32)

    def __post_init__(self) -> None:
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.hidden = tuple(self.hidden)


def vocab_sizes(scenario: ScenarioConfig) -> tuple[int, int, int, int]:
    return (scenario.max_fleet, N_STOPS, N_HOURS, 2)


# --- losses -----------------------------------------------------------------
# Each returns (loss, gradient dict) and leaves parameters untouched, which is
# what the finite-difference checks exercise.

def critic_target(batch: Batch, policy: PolicyNet, q1_targ: CriticNet, q2_targ: CriticNet,
                  alpha: float, gamma: float, noise: np.ndarray, reward_scale: float = 1.0) -> np.ndarray:
    """Soft Bellman target; treated as a constant by the critic update."""
    oh = batch.next_design
    a2, logp2, _ = policy.sample(batch.next_cat, batch.next_num, noise, oh)
    q1, _ = q1_targ.q(batch.next_cat, batch.next_num, a2, oh)
    q2, _ = q2_targ.q(batch.next_cat, batch.next_num, a2, oh)
    soft_v = np.minimum(q1, q2) - alpha * logp2
    return reward_scale * batch.reward + gamma * (1.0 - batch.done) * soft_v


def critic_loss(critic: CriticNet, batch: Batch, y: np.ndarray):
    q, cache = critic.q(batch.cat, batch.num, batch.action, batch.design)
    err = q - y
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise GradientError(f"critic loss is not finite: {loss}")
    grads, _ = critic.q_backward(cache, 2.0 * err / len(err))
    return loss, grads


def actor_loss(policy: PolicyNet, q1: CriticNet, q2: CriticNet, cat, num, noise, alpha: float,
               design=None):
    """mean(alpha * log pi(a|s) - min(Q1, Q2)(s, a)) with a reparameterised through the policy."""
    if design is None:
        design = policy.design(cat, num)
    a, logp, scache = policy.sample(cat, num, noise, design)
    v1, c1 = q1.q(cat, num, a, design)
    v2, c2 = q2.q(cat, num, a, design)
    qmin = np.minimum(v1, v2)
    loss = float(np.mean(alpha * logp - qmin))
    if not math.isfinite(loss):
        raise GradientError(f"actor loss is not finite: {loss}")
    n = len(logp)
    use1 = v1 <= v2
    dq = -np.ones(n) / n
    _, da1 = q1.q_backward(c1, np.where(use1, dq, 0.0), param_grads=False)
    _, da2 = q2.q_backward(c2, np.where(use1, 0.0, dq), param_grads=False)
    grads = policy.sample_backward(scache, da1 + da2, np.full(n, alpha / n))
    return loss, grads, logp


def temperature_loss(log_alpha: float, logp: np.ndarray, target_entropy: float):
    """Returns (loss, d loss / d log_alpha); ``logp`` is a constant here."""
    s = float(np.mean(logp + target_entropy))
    return -log_alpha * s, -s


# --- agent ------------------------------------------------------------------

@dataclass
class SacAgent:
    policy: PolicyNet
    q1: CriticNet
    q2: CriticNet
    q1_targ: CriticNet
    q2_targ: CriticNet
    log_alpha: float
    config: SacConfig
    opt_pi: Adam = None
    opt_q1: Adam = None
    opt_q2: Adam = None
    opt_alpha: Adam = None
    step: int = 0
    episode: int = 0
    rng: RngStream = None
    last_losses: dict = field(default_factory=dict)

    @classmethod
    def create(cls, vocab, max_hold: float, config: SacConfig, seed: int) -> "SacAgent":
        init = RngStream(seed, INIT)
        policy = PolicyNet(vocab, max_hold, init, config.hidden)
        q1 = CriticNet(vocab, max_hold, init, config.hidden)
        q2 = CriticNet(vocab, max_hold, init, config.hidden)
        agent = cls(policy, q1, q2, q1.copy(), q2.copy(), math.log(config.alpha_init), config)
        agent.opt_pi, agent.opt_q1, agent.opt_q2, agent.opt_alpha = (Adam(config.lr) for _ in range(4))
        agent.rng = RngStream(seed, POLICY)
        return agent

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def critic_update(self, batch: Batch) -> tuple[float, float]:
        c = self.config
        noise = self.rng.gen.standard_normal(len(batch))
        y = critic_target(batch, self.policy, self.q1_targ, self.q2_targ, self.alpha, c.gamma, noise,
                          c.reward_scale)
        l1, g1 = critic_loss(self.q1, batch, y)
        l2, g2 = critic_loss(self.q2, batch, y)
        self.opt_q1.step(self.q1.params, g1)
        self.opt_q2.step(self.q2.params, g2)
        return l1, l2

    def actor_update(self, batch: Batch) -> tuple[float, np.ndarray]:
        noise = self.rng.gen.standard_normal(len(batch))
        loss, grads, logp = actor_loss(self.policy, self.q1, self.q2, batch.cat, batch.num, noise, self.alpha,
                                       batch.design)
        self.opt_pi.step(self.policy.params, grads)
        return loss, logp

    def temperature_update(self, logp: np.ndarray) -> float:
        _, g = temperature_loss(self.log_alpha, logp, self.config.target_entropy)
        p = {"log_alpha": np.array([self.log_alpha])}
        self.opt_alpha.step(p, {"log_alpha": np.array([g])})
        self.log_alpha = float(p["log_alpha"][0])
        return self.alpha

    def update(self, batch: Batch) -> dict:
        """One SAC step: critics, actor, temperature, then target averaging."""
        if batch.design is None:
            batch.design = self.policy.design(batch.cat, batch.num)
            batch.next_design = self.policy.design(batch.next_cat, batch.next_num)
        lq1, lq2 = self.critic_update(batch)
        lpi, logp = self.actor_update(batch)
        self.temperature_update(logp)
        polyak_update(self.q1.params, self.q1_targ.params, self.config.tau)
        polyak_update(self.q2.params, self.q2_targ.params, self.config.tau)
        self.step += 1
        self.last_losses = {"critic": 0.5 * (lq1 + lq2), "actor": lpi}
        return self.last_losses

    def controller(self, deterministic: bool = False) -> "SacController":
        return SacController(self.policy, None if deterministic else self.rng, deterministic)

    # --- persistence ----------------------------------------------------
    def nets(self) -> dict:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2, "q1_targ": self.q1_targ,
                "q2_targ": self.q2_targ}

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return save_checkpoint(path, self.nets(),
                               {"policy": self.opt_pi, "q1": self.opt_q1, "q2": self.opt_q2,
                                "alpha": self.opt_alpha},
                               self.log_alpha, self.step, self.episode,
                               {"sac_config": cfg, **(extra or {})})

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "SacAgent":
        ck = load_checkpoint(path)
        cfg = ck.meta["extra"].get("sac_config", {})
        config = SacConfig(**cfg)
        n = ck.nets
        agent = cls(n["policy"], n["q1"], n["q2"], n["q1_targ"], n["q2_targ"], ck.log_alpha, config,
                    ck.optimizers["policy"], ck.optimizers["q1"], ck.optimizers["q2"], ck.optimizers["alpha"],
                    ck.step, ck.episode, RngStream(seed, POLICY))
        return agent


class SacController:
    """Holding controller backed by a policy network."""

    name = "sac"

    def __init__(self, policy: PolicyNet, rng: RngStream | None, deterministic: bool = False):
        self.policy = policy
        self.rng = rng
        self.deterministic = deterministic or rng is None

    def observe(self, state: StateVector) -> float:
        cat = np.array([state.categorical])
        num = np.array([state.numeric])
        return float(self.policy.act(cat, num, self.rng, self.deterministic)[0])


# --- training loop ----------------------------------------------------------

@dataclass
class EpisodeMetrics:
    episode: int
    cum_reward: float
    alpha: float
    actor_loss: float
    critic_loss: float
    buffer_size: int
    decisions: int
    updates: int


METRICS_HEADER = ["episode", "cum_reward", "alpha", "actor_loss", "critic_loss", "buffer_size"]


def episode_seed(seed: int, episode: int) -> int:
    """Simulation seed for a training episode; baselines reuse it for paired comparisons."""
    return seed * 10_000 + episode


@dataclass
class TrainResult:
    agent: SacAgent
    metrics: list[EpisodeMetrics]
    diverged: bool = False
    message: str = ""


def train(scenario: ScenarioConfig, config: SacConfig, episodes: int, seed: int,
          agent: SacAgent | None = None, callback=None) -> TrainResult:
    """Alternate simulated days with SAC updates.

    Deterministic for a given seed.  If a loss turns non-finite the offending
    update is skipped, training stops and the agent keeps its last good state.
    """
    tune_allocator()
    if agent is None:
        agent = SacAgent.create(vocab_sizes(scenario), scenario.max_hold_secs, config, seed)
    buffer = ReplayBuffer(config.buffer_capacity)
    metrics: list[EpisodeMetrics] = []
    batch_rng = RngStream(seed, 4)
    for ep in range(episodes):
        assembler = TransitionAssembler.for_scenario(scenario, buffer)
        ep_log = run_episode(scenario, agent.controller(), episode_seed(seed, ep), assembler)
        n_updates = config.updates_per_episode if config.updates_per_episode is not None else ep_log.n_decisions
        a_losses, c_losses = [], []
        done_updates = 0
        if len(buffer) >= config.warmup_tuples:
            for _ in range(n_updates):
                batch = sample_batch(buffer, config.batch_size, batch_rng)
                if batch is None:
                    break
                try:
                    out = agent.update(batch)
                except GradientError as exc:
                    log.error("episode %d: %s; stopping", ep, exc)
                    metrics.append(EpisodeMetrics(ep, ep_log.cum_reward, agent.alpha, math.nan, math.nan,
                                                  len(buffer), ep_log.n_decisions, done_updates))
                    return TrainResult(agent, metrics, True, str(exc))
                a_losses.append(out["actor"])
                c_losses.append(out["critic"])
                done_updates += 1
        agent.episode = ep + 1
        m = EpisodeMetrics(ep, ep_log.cum_reward, agent.alpha,
                           float(np.mean(a_losses)) if a_losses else math.nan,
                           float(np.mean(c_losses)) if c_losses else math.nan,
                           len(buffer), ep_log.n_decisions, done_updates)
        metrics.append(m)
        log.info("episode %d reward %.0f alpha %.4g updates %d", ep, m.cum_reward, m.alpha, done_updates)
        if callback is not None:
            callback(agent, m)
    return TrainResult(agent, metrics)


def evaluate(scenario: ScenarioConfig, controller, seeds) -> list[float]:
    return [run_episode(scenario, controller, s).cum_reward for s in seeds]
