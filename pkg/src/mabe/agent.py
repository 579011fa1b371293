"""Behavior-regularized actor-critic trained on model-augmented data.

Critic targets and the policy objective subtract ``beta * KL(pi || prior)``;
``beta`` follows dual ascent toward a target divergence ``delta``. Each epoch
adds short model branches, with rewards reduced by ``xi * uncertainty``, to a
buffer that is mixed with the real transitions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mabe.data import AugmentedBuffer, Batch, Dataset, dataset_stats, sample_batch
from mabe.dynamics import DynamicsEnsemble, synth_rollouts
from mabe.nn import (
    ConfigError,
    DiagGaussian,
    Trainable,
    gaussian_kl,
    gaussian_kl_grads,
    mlp_gradients,
    polyak,
)
from mabe.policy import GaussianPolicy, QNet, new_policy, new_qnet, q_regression_grads
from mabe.prior import PriorParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentConfig:
    epochs: int = 100
    branches: int = 400
    horizon: int = 5
    grad_steps: int = 200
    batch_size: int = 256
    real_fraction: float = 0.05
    policy_lr: float = 3e-4
    critic_lr: float = 3e-4
    beta_lr: float = 1e-2
    target_rate: float = 5e-3
    gamma: float = 0.99
    beta_init: float = 1.0
    delta: float = 0.5
    xi: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    twin_q: bool = True
    entropy_coef: float = 0.0
    buffer_capacity: int | None = None
    eval_last: int = 10
    no_prior: bool = False
    no_rl: bool = False
    no_uncertainty: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.grad_steps < 0 or self.branches < 0:
            raise ConfigError("epochs, grad_steps and branches must be non-negative")
        if self.horizon < 1 or self.batch_size < 1:
            raise ConfigError("horizon and batch_size must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma {self.gamma} outside [0, 1)")
        if self.delta <= 0 or self.beta_lr <= 0:
            raise ConfigError("delta and beta_lr must be positive")
        if self.beta_init < 0 or self.xi < 0:
            raise ConfigError("beta_init and xi must be non-negative")

    @property
    def use_prior(self) -> bool:
        return not self.no_prior

    @property
    def penalty(self) -> float:
        return 0.0 if self.no_uncertainty else self.xi


@dataclass
class AgentState:
    """Mutable training state: policy, critics, targets, frozen prior and beta."""

    policy: GaussianPolicy
    pi_opt: Trainable
    critics: list[QNet]
    critic_opts: list[Trainable]
    targets: list[QNet]
    prior: GaussianPolicy | None
    beta: float
    cfg: AgentConfig
    rng: np.random.Generator

    @property
    def current_policy(self) -> GaussianPolicy:
        return self.policy.with_net(self.pi_opt.net)

    def online(self, i: int) -> QNet:
        return self.critics[i].with_net(self.critic_opts[i].net)


def init_agent(d: Dataset, prior: PriorParams | None, cfg: AgentConfig, seed,
               init_policy: GaussianPolicy | None = None, q_scale: float | None = None) -> AgentState:
    rng = np.random.default_rng(seed)
    st = dataset_stats(d)
    if init_policy is None:
        pol = new_policy(d.obs_dim, d.act_dim, cfg.hidden, st.obs_mean, st.obs_scale, rng)
    else:
        pol = init_policy
    if q_scale is None:
        q_scale = max(float(np.abs(d.rewards).max()), 1e-6) / (1.0 - cfg.gamma)
    critics = [new_qnet(d.obs_dim, d.act_dim, cfg.hidden, st.obs_mean, st.obs_scale, q_scale, rng)
               for _ in range(2 if cfg.twin_q else 1)]
    return AgentState(
        policy=pol,
        pi_opt=Trainable(pol.net, cfg.policy_lr),
        critics=critics,
        critic_opts=[Trainable(c.net, cfg.critic_lr) for c in critics],
        targets=list(critics),
        prior=None if prior is None else prior.policy,
        beta=cfg.beta_init if cfg.use_prior else 0.0,
        cfg=cfg,
        rng=rng,
    )


def penalized_reward(r_hat, u, xi: float):
    """``r_hat - xi * u``."""
    return np.asarray(r_hat, dtype=np.float64) - xi * np.asarray(u, dtype=np.float64)


def update_beta(beta: float, measured_kl: float, delta: float, lr: float) -> float:
    """Projected dual ascent: raise beta while the divergence exceeds ``delta``."""
    return max(0.0, beta + lr * (measured_kl - delta))


def polyak_update(target: QNet, online: QNet, rate: float) -> QNet:
    return target.with_net(polyak(target.net, online.net, rate))


def _clip(a):
    return np.clip(a, -1.0, 1.0)


def _policy_kl(agent: AgentState, pi: DiagGaussian, obs) -> np.ndarray:
    if agent.prior is None:
        return np.zeros(len(obs))
    return gaussian_kl(pi, agent.prior.dist(obs))


def critic_target(agent: AgentState, batch: Batch, noise=None) -> np.ndarray:
    """``r + gamma (1 - done) [min target Q(s', a') - beta KL(pi(s') || prior(s'))]``."""
    cfg = agent.cfg
    pi = agent.current_policy.dist(batch.next_obs)
    if noise is None:
        noise = agent.rng.standard_normal(pi.mean.shape)
    a_next = _clip(pi.mean + pi.std * noise)
    q_next = np.min([t(batch.next_obs, a_next) for t in agent.targets], axis=0)
    soft = q_next
    if cfg.use_prior and agent.beta:
        soft = soft - agent.beta * _policy_kl(agent, pi, batch.next_obs)
    if cfg.entropy_coef:
        log_pi = np.sum(-0.5 * noise * noise - pi.log_std - 0.5 * np.log(2 * np.pi), axis=-1)
        soft = soft - cfg.entropy_coef * log_pi
    return batch.rewards + cfg.gamma * (1.0 - batch.dones) * soft


def update_critic(agent: AgentState, batch: Batch, targets) -> float:
    """One Adam step per critic on ``0.5 (Q - target)^2``; returns the mean loss in Q units."""
    losses = []
    for i, c in enumerate(agent.critics):
        val, grads = q_regression_grads(agent.online(i), batch.obs, _clip(batch.actions), targets)
        agent.critic_opts[i].apply(grads)
        losses.append(val * c.q_scale ** 2)
    return float(np.mean(losses))


def policy_objective_grads(agent: AgentState, obs, noise) -> tuple[float, float, list[np.ndarray]]:
    """Mean of ``min Q(s, a_theta) - beta KL`` with reparameterized actions.

    Returns (objective, mean KL, gradient of the negated objective).
    """
    cfg = agent.cfg
    online = [agent.online(i) for i in range(len(agent.critics))]
    pol = agent.current_policy
    beta = agent.beta if cfg.use_prior else 0.0
    prior_dist = agent.prior.dist(obs) if agent.prior is not None else None
    stats = {}

    def loss(pi: DiagGaussian):
        std = pi.std
        a = pi.mean + std * noise
        a_c = _clip(a)
        vals, grads = zip(*(q.value_and_action_grad(obs, a_c) for q in online))
        pick = np.argmin(np.stack(vals), axis=0)
        q = np.stack(vals)[pick, np.arange(len(obs))]
        g_a = np.stack(grads)[pick, np.arange(len(obs))]
        # Past the box, keep only gradients that lead back inside.
        g_a = g_a * (((a > -1.0) | (g_a > 0)) & ((a < 1.0) | (g_a < 0)))
        g_mean = -g_a
        g_ls = -g_a * std * noise
        kl = gaussian_kl(pi, prior_dist) if prior_dist is not None else np.zeros(len(obs))
        obj = q - beta * kl
        if beta:
            km, kls = gaussian_kl_grads(pi, prior_dist)
            g_mean = g_mean + beta * km
            g_ls = g_ls + beta * kls
        if cfg.entropy_coef:
            log_pi = np.sum(-0.5 * noise * noise - pi.log_std - 0.5 * np.log(2 * np.pi), axis=-1)
            obj = obj - cfg.entropy_coef * log_pi
            g_ls = g_ls - cfg.entropy_coef
        stats["kl"] = float(kl.mean())
        return -obj, (g_mean, g_ls)

    neg, grads = mlp_gradients(agent.pi_opt.net, pol.normalize(obs), loss)
    return -neg, stats["kl"], grads


def update_policy(agent: AgentState, batch: Batch, noise=None) -> tuple[float, float]:
    """One ascent step on the regularized objective; returns (objective, batch mean KL)."""
    if noise is None:
        noise = agent.rng.standard_normal((len(batch), agent.policy.act_dim))
    obj, kl, grads = policy_objective_grads(agent, batch.obs, noise)
    agent.pi_opt.apply(grads)
    return obj, kl


def gradient_step(agent: AgentState, buf: AugmentedBuffer) -> tuple[float, float, float]:
    cfg = agent.cfg
    batch = sample_batch(buf, cfg.batch_size, cfg.real_fraction, agent.rng)
    y = critic_target(agent, batch)
    c_loss = update_critic(agent, batch, y)
    obj, kl = update_policy(agent, batch)
    if cfg.use_prior:
        agent.beta = update_beta(agent.beta, kl, cfg.delta, cfg.beta_lr)
    agent.targets = [polyak_update(t, agent.online(i), cfg.target_rate) for i, t in enumerate(agent.targets)]
    return c_loss, obj, kl


@dataclass
class TrainMetrics:
    critic_loss: list[float] = field(default_factory=list)
    policy_obj: list[float] = field(default_factory=list)
    mean_kl: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    buffer_size: list[int] = field(default_factory=list)
    eval_return: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    beta_steps: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.beta)

    def final_eval(self) -> np.ndarray:
        """Evaluation returns recorded during training, in epoch order."""
        r = np.asarray(self.eval_return, dtype=np.float64)
        return r[np.isfinite(r)]

    def rows(self) -> list[dict]:
        return [
            {"epoch": i, "critic_loss": self.critic_loss[i], "policy_obj": self.policy_obj[i],
             "mean_kl": self.mean_kl[i], "beta": self.beta[i], "buffer_size": self.buffer_size[i],
             "eval_return": self.eval_return[i]}
            for i in range(len(self))
        ]


def train_mabe(d: Dataset, e: DynamicsEnsemble | None, prior: PriorParams | None, cfg: AgentConfig, seed,
               evaluate: Callable[[GaussianPolicy], float] | None = None,
               reward_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
               init_policy: GaussianPolicy | None = None) -> tuple[GaussianPolicy, TrainMetrics]:
    """Run the epoch loop and return (final policy, per-epoch metrics).

    ``evaluate`` is probed in the last ``cfg.eval_last`` epochs. ``reward_fn``
    replaces model rewards of synthetic transitions (the real data is used as
    given). With ``no_rl`` the prior is returned untouched.
    """
    metrics = TrainMetrics()
    if cfg.no_rl:
        if prior is None:
            raise ConfigError("no_rl needs a behavioral prior")
        if evaluate is not None:
            ret = evaluate(prior.policy)
            for _ in range(min(cfg.eval_last, cfg.epochs) or 1):
                metrics.eval_return.append(ret)
        return prior.policy, metrics
    if cfg.use_prior and prior is None:
        raise ConfigError("a behavioral prior is required unless no_prior is set")
    if e is None and cfg.real_fraction < 1.0 and cfg.branches:
        raise ConfigError("a dynamics ensemble is required for synthetic rollouts")
    agent = init_agent(d, prior, cfg, seed, init_policy)
    buf = AugmentedBuffer(d, cfg.buffer_capacity)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        if e is not None and cfg.branches:
            pol = agent.current_policy
            ro = synth_rollouts(e, lambda s: pol.act(s, agent.rng), d, cfg.horizon, cfg.branches,
                                agent.rng, action_bounds=(-1.0, 1.0))
            b = ro.batch
            if reward_fn is not None and len(b):
                b.rewards = np.asarray(reward_fn(b.obs, b.actions, b.next_obs), dtype=np.float64)
            b.rewards = penalized_reward(b.rewards, ro.uncertainty, cfg.penalty)
            buf.add(b)
        cl, po, kl = [], [], []
        for _ in range(cfg.grad_steps):
            c, o, k = gradient_step(agent, buf)
            cl.append(c)
            po.append(o)
            kl.append(k)
            metrics.beta_steps.append(agent.beta)
        nan = float("nan")
        metrics.critic_loss.append(float(np.mean(cl)) if cl else nan)
        metrics.policy_obj.append(float(np.mean(po)) if po else nan)
        metrics.mean_kl.append(float(np.mean(kl)) if kl else nan)
        metrics.beta.append(agent.beta)
        metrics.buffer_size.append(len(buf))
        probe = evaluate is not None and epoch >= cfg.epochs - cfg.eval_last
        metrics.eval_return.append(float(evaluate(agent.current_policy)) if probe else nan)
        metrics.wall_clock.append(time.perf_counter() - t0)
        log.debug("epoch %d: critic %.4g obj %.4g kl %.4g beta %.4g", epoch, metrics.critic_loss[-1],
                  metrics.policy_obj[-1], metrics.mean_kl[-1], agent.beta)
    return agent.current_policy, metrics
