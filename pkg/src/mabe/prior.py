"""Dataset Q-function, advantage weights and behavioral priors.

The prior maximizes ``sum_i w_i log p(a_i | s_i)``. Uniform weights give
plain behavior cloning; ``w = exp(omega / eta)`` with
``omega = Q(s, a) (1 - gamma) / r_max`` gives the advantage-weighted prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mabe.data import Dataset, dataset_stats
from mabe.nn import (
    ConfigError,
    NumericError,
    Trainable,
    gaussian_log_prob,
    gaussian_log_prob_grads,
    mlp_gradients,
    polyak,
)
from mabe.policy import GaussianPolicy, QNet, new_policy, new_qnet, q_regression_grads

log = logging.getLogger(__name__)

WEIGHTINGS = ("uniform", "q-advantage", "trajectory-return")


@dataclass(frozen=True)
class QFitConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    target_rate: float = 0.05
    max_steps: int = 20000
    min_steps: int = 1000
    eval_every: int = 200
    patience: int = 5
    rel_tol: float = 0.01


@dataclass
class DatasetQ:
    q: QNet
    target: QNet
    gamma: float
    log: list[float] = field(default_factory=list)

    def __call__(self, obs, act) -> np.ndarray:
        return self.q(obs, act)


def fit_q_dataset(d: Dataset, gamma: float, cfg: QFitConfig = QFitConfig(), seed: int = 0) -> DatasetQ:
    """SARSA-style TD regression using the dataset's own next action.

    Transitions closing a trajectory without ``done`` have no successor
    action and are left out of the loss unless ``gamma`` is zero. Training stops once the mean TD loss
    over an evaluation window stops improving by ``rel_tol`` for
    ``patience`` windows.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma {gamma} outside [0, 1)")
    rng = np.random.default_rng(seed)
    st = dataset_stats(d)
    obs = d.obs.astype(np.float64)
    act = d.actions.astype(np.float64)
    rew = d.rewards.astype(np.float64)
    nxt = d.next_obs.astype(np.float64)
    done = d.dones.astype(np.float64)
    next_act, has_next = d.next_actions()
    next_act = next_act.astype(np.float64)
    usable = np.arange(len(d)) if gamma == 0.0 else np.flatnonzero(has_next | d.dones)
    if not len(usable):
        raise ConfigError("dataset has no transitions with a successor action or terminal flag")
    q_scale = max(float(np.abs(rew).max()), 1e-6) / (1.0 - gamma)
    q = new_qnet(d.obs_dim, d.act_dim, cfg.hidden, st.obs_mean, st.obs_scale, q_scale, rng)
    online = Trainable(q.net, cfg.lr)
    target = q.net
    history: list[float] = []
    window: list[float] = []
    best, since = np.inf, 0
    bs = min(cfg.batch_size, len(usable))
    for step in range(1, cfg.max_steps + 1):
        idx = usable[rng.integers(0, len(usable), size=bs)]
        q_next = q.with_net(target)(nxt[idx], next_act[idx])
        y = rew[idx] + gamma * (1.0 - done[idx]) * q_next
        val, grads = q_regression_grads(q.with_net(online.net), obs[idx], act[idx], y)
        online.apply(grads)
        target = polyak(target, online.net, cfg.target_rate)
        window.append(val)
        if step % cfg.eval_every == 0:
            mean_loss = float(np.mean(window))
            window.clear()
            history.append(mean_loss)
            if mean_loss < best * (1.0 - cfg.rel_tol):
                best, since = mean_loss, 0
            else:
                since += 1
                if since >= cfg.patience and step >= cfg.min_steps:
                    break
    return DatasetQ(q.with_net(online.net), q.with_net(target), gamma, history)


def advantage_weights(q, d: Dataset, gamma: float, r_max: float, eta: float,
                      q_norm: str = "r_max") -> np.ndarray:
    """``exp(omega / eta)`` with ``omega = Q (1 - gamma) / r_max``.

    ``q`` is a :class:`DatasetQ` or an array of precomputed Q-values. With
    ``q_norm="max_q"`` the values are divided by the largest Q-value instead.
    A non-positive ``r_max`` falls back to the largest absolute reward.
    """
    if eta <= 0:
        raise ConfigError(f"temperature must be positive, got {eta}")
    qv = np.asarray(q if isinstance(q, np.ndarray) else q(d.obs.astype(np.float64), d.actions.astype(np.float64)),
                    dtype=np.float64)
    if q_norm == "max_q":
        top = float(qv.max())
        if top <= 0:
            top = float(np.abs(qv).max()) or 1.0
            log.warning("max Q-value is not positive; normalizing by max |Q| = %g", top)
        omega = qv / top
    elif q_norm == "r_max":
        if r_max <= 0:
            fallback = float(np.abs(d.rewards).max()) if len(d) else 0.0
            log.warning("r_max=%g is not positive; normalizing by max |r| = %g", r_max, fallback)
            r_max = fallback or 1.0
        omega = qv * (1.0 - gamma) / r_max
    else:
        raise ConfigError(f"unknown q_norm {q_norm!r}")
    with np.errstate(over="ignore"):
        w = np.exp(omega / eta)
    if not np.all(np.isfinite(w)):
        raise NumericError(f"advantage weights overflow at eta={eta}; increase the temperature")
    return w


def return_weights(d: Dataset, eta: float) -> np.ndarray:
    """Weight each transition by ``exp(R / (max |R| eta))`` of its trajectory's return ``R``."""
    if eta <= 0:
        raise ConfigError(f"temperature must be positive, got {eta}")
    returns = dataset_stats(d).traj_returns
    top = float(np.abs(returns).max())
    norm = returns / top if top > 0 else np.ones_like(returns)
    if len(returns) == 1:
        norm = np.ones(1)
    return np.exp(norm / eta)[d.traj_ids]


@dataclass(frozen=True)
class PriorConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1


@dataclass
class PriorParams:
    policy: GaussianPolicy
    eta: float
    mode: str
    val_nll: float
    init_val_nll: float
    history: list[float] = field(default_factory=list)

    def dist(self, obs):
        return self.policy.dist(obs)


def _weighted_nll(pol: GaussianPolicy, obs, act, w) -> float:
    nll = -gaussian_log_prob(pol.dist(obs), act)
    return float(np.sum(w * nll) / np.sum(w))


def prior_nll_grads(pol: GaussianPolicy, obs, act, w) -> tuple[float, list[np.ndarray]]:
    """Mean of ``-w log p(a | s)`` over a batch and its parameter gradient."""
    act = np.asarray(act, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)

    def loss(dist):
        gm, gl = gaussian_log_prob_grads(dist, act)
        return -w * gaussian_log_prob(dist, act), (-w[:, None] * gm, -w[:, None] * gl)

    return mlp_gradients(pol.net, pol.normalize(obs), loss)


def train_prior(d: Dataset, weights=None, cfg: PriorConfig = PriorConfig(), seed: int = 0,
                eta: float = float("inf"), mode: str = "uniform") -> PriorParams:
    """Weighted maximum likelihood of dataset actions, early-stopped on a 90/10 split.

    Weights are rescaled to unit mean, so multiplying them by a constant does
    not change the result. Returns the parameters with the best validation
    weighted NLL.
    """
    n = len(d)
    if not n:
        raise ConfigError("cannot fit a prior to an empty dataset")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"{len(w)} weights for {n} transitions")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ConfigError("weights must be positive and finite")
    if mode not in WEIGHTINGS:
        raise ConfigError(f"unknown weighting mode {mode!r}")
    w = w / w.mean()
    rng = np.random.default_rng(seed)
    st = dataset_stats(d)
    obs = d.obs.astype(np.float64)
    act = d.actions.astype(np.float64)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val, tr = perm[:n_val], perm[n_val:]
    if not len(val):
        val = tr
    pol = new_policy(d.obs_dim, d.act_dim, cfg.hidden, st.obs_mean, st.obs_scale, rng)
    opt = Trainable(pol.net, cfg.lr)
    init = best = _weighted_nll(pol, obs[val], act[val], w[val])
    best_net, since, history = pol.net, 0, [init]
    for _ in range(cfg.max_epochs):
        order = rng.permutation(len(tr))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            _, grads = prior_nll_grads(pol.with_net(opt.net), obs[tr][b], act[tr][b], w[tr][b])
            opt.apply(grads)
        cur = _weighted_nll(pol.with_net(opt.net), obs[val], act[val], w[val])
        history.append(cur)
        if cur < best - 1e-6 * max(1.0, abs(best)):
            best, best_net, since = cur, opt.net, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return PriorParams(pol.with_net(best_net), eta, mode, best, init, history)


def build_prior(d: Dataset, mode: str, eta: float, gamma: float, q_norm: str = "r_max",
                q_cfg: QFitConfig = QFitConfig(), prior_cfg: PriorConfig = PriorConfig(),
                seed: int = 0) -> tuple[PriorParams, np.ndarray]:
    """Weights for ``mode`` followed by :func:`train_prior`; returns (prior, weights)."""
    if mode == "uniform":
        w = np.ones(len(d))
    elif mode == "q-advantage":
        q = fit_q_dataset(d, gamma, q_cfg, seed)
        w = advantage_weights(q, d, gamma, dataset_stats(d).r_max, eta, q_norm)
    elif mode == "trajectory-return":
        w = return_weights(d, eta)
    else:
        raise ConfigError(f"unknown weighting mode {mode!r}")
    return train_prior(d, w, prior_cfg, seed, eta, mode), w
