"""Observation-normalized network wrappers shared by the prior, agent and critics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mabe.checkpoint import load_checkpoint, mlp_from_arrays, mlp_to_arrays, save_checkpoint
from mabe.nn import MLP, DiagGaussian, init_mlp, mlp_backward, mlp_forward, mlp_forward_cache, mlp_gradients


@dataclass(frozen=True)
class GaussianPolicy:
    """Gaussian two-head network over actions, fed standardized observations."""

    net: MLP
    obs_mean: np.ndarray
    obs_scale: np.ndarray

    def normalize(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_scale

    def dist(self, obs) -> DiagGaussian:
        return mlp_forward(self.net, self.normalize(obs))

    def act(self, obs, rng: np.random.Generator | None = None) -> np.ndarray:
        """Mean action, or a sample when ``rng`` is given."""
        d = self.dist(obs)
        if rng is None:
            return d.mean
        return d.mean + d.std * rng.standard_normal(d.mean.shape)

    def with_net(self, net: MLP) -> "GaussianPolicy":
        return GaussianPolicy(net, self.obs_mean, self.obs_scale)

    @property
    def act_dim(self) -> int:
        return self.net.out_dim


def new_policy(obs_dim: int, act_dim: int, hidden, obs_mean, obs_scale, rng) -> GaussianPolicy:
    net = init_mlp([obs_dim, *hidden, 2 * act_dim], rng, head="gaussian", out_scale=0.1)
    return GaussianPolicy(net, np.asarray(obs_mean, float), np.asarray(obs_scale, float))


@dataclass(frozen=True)
class QNet:
    """Scalar critic over (standardized obs, raw action), output scaled by ``q_scale``."""

    net: MLP
    obs_mean: np.ndarray
    obs_scale: np.ndarray
    q_scale: float = 1.0

    def inputs(self, obs, act) -> np.ndarray:
        o = (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_scale
        return np.concatenate([o, np.asarray(act, dtype=np.float64)], axis=-1)

    def __call__(self, obs, act) -> np.ndarray:
        return mlp_forward(self.net, self.inputs(obs, act))[..., 0] * self.q_scale

    def value_and_action_grad(self, obs, act) -> tuple[np.ndarray, np.ndarray]:
        """Q values and dQ/da for a batch (no parameter gradients)."""
        raw, cache = mlp_forward_cache(self.net, self.inputs(obs, act))
        _, g_in = mlp_backward(self.net, raw, cache, np.full_like(raw, self.q_scale))
        od = len(self.obs_mean)
        return raw[..., 0] * self.q_scale, g_in[..., od:]

    def with_net(self, net: MLP) -> "QNet":
        return QNet(net, self.obs_mean, self.obs_scale, self.q_scale)


def q_regression_grads(q: QNet, obs, act, targets) -> tuple[float, list[np.ndarray]]:
    """Mean of ``0.5 ((Q - target) / q_scale)^2`` and its parameter gradient."""
    y = np.asarray(targets, dtype=np.float64) / q.q_scale

    def loss(out):
        r = out[:, 0] - y
        return 0.5 * r * r, r[:, None]

    return mlp_gradients(q.net, q.inputs(obs, act), loss)


def new_qnet(obs_dim: int, act_dim: int, hidden, obs_mean, obs_scale, q_scale, rng) -> QNet:
    net = init_mlp([obs_dim + act_dim, *hidden, 1], rng)
    return QNet(net, np.asarray(obs_mean, float), np.asarray(obs_scale, float), float(q_scale))


def save_policy(path, pol: GaussianPolicy, meta: dict | None = None):
    arrays = mlp_to_arrays(pol.net, "policy")
    arrays["obs_mean"] = pol.obs_mean
    arrays["obs_scale"] = pol.obs_scale
    return save_checkpoint(path, arrays, {"kind": "policy", **(meta or {})})


def load_policy(path) -> tuple[GaussianPolicy, dict]:
    arrays, meta = load_checkpoint(path)
    pol = GaussianPolicy(mlp_from_arrays(arrays, "policy", "gaussian"), arrays["obs_mean"], arrays["obs_scale"])
    return pol, meta
