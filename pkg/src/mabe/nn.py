"""Dense networks, diagonal Gaussians and Adam, all in float64 numpy.

Networks are plain feed-forward MLPs with rectifier hidden units. A network
with a ``gaussian`` head splits its last layer into a mean half and a
log-std half; the log-std is clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``.
Backpropagation is written out by hand (see :func:`mlp_backward`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    """Raised for inconsistent shapes or invalid hyperparameters."""


class NumericError(FloatingPointError):
    """Raised when a loss or prediction turns non-finite."""


# ---------------------------------------------------------------------------
# Diagonal Gaussian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian; arrays may carry leading batch dimensions."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.log_std):
            raise ConfigError(
                f"mean shape {np.shape(self.mean)} != log_std shape {np.shape(self.log_std)}"
            )

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def dim(self) -> int:
        return np.shape(self.mean)[-1]

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_std[idx])


def _check_dim(d: DiagGaussian, x: np.ndarray):
    if np.shape(x)[-1] != d.dim:
        raise ConfigError(f"dimension mismatch: distribution has {d.dim}, input has {np.shape(x)[-1]}")


def gaussian_log_prob(d: DiagGaussian, x) -> np.ndarray | float:
    """Log density summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(d, x)
    z = (x - d.mean) * np.exp(-d.log_std)
    return np.sum(-0.5 * z * z - d.log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_log_prob_grads(d: DiagGaussian, x) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the log density with respect to (mean, log_std)."""
    x = np.asarray(x, dtype=np.float64)
    inv_var = np.exp(-2.0 * d.log_std)
    diff = x - d.mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_kl(p: DiagGaussian, q: DiagGaussian) -> np.ndarray | float:
    """Closed-form KL(p || q), summed over the last axis."""
    if p.dim != q.dim:
        raise ConfigError(f"KL between distributions of dimension {p.dim} and {q.dim}")
    var_ratio = np.exp(2.0 * (p.log_std - q.log_std))
    mahal = (p.mean - q.mean) ** 2 * np.exp(-2.0 * q.log_std)
    terms = 0.5 * (var_ratio + mahal - 1.0) - (p.log_std - q.log_std)
    return np.sum(terms, axis=-1)


def gaussian_kl_grads(p: DiagGaussian, q: DiagGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of KL(p || q) with respect to p's (mean, log_std)."""
    inv_var_q = np.exp(-2.0 * q.log_std)
    g_mean = (p.mean - q.mean) * inv_var_q
    g_log_std = np.exp(2.0 * p.log_std) * inv_var_q - 1.0
    return g_mean, g_log_std


def gaussian_sample(d: DiagGaussian, noise) -> np.ndarray:
    """Reparameterized sample ``mean + std * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    _check_dim(d, noise)
    return d.mean + np.exp(d.log_std) * noise


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

HEADS = ("linear", "gaussian")


@dataclass(frozen=True)
class MLP:
    """Feed-forward network parameters.

    ``weights[i]`` has shape ``(out, in)``; hidden layers use ReLU. With
    ``head="gaussian"`` the final layer width is ``2 * d``: the first ``d``
    outputs are the mean and the rest the (clamped) log-std.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    head: str = "linear"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("weights and biases must be non-empty and of equal count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits {self.weights[i - 1].shape[0]}"
                )
        if self.head == "gaussian" and self.weights[-1].shape[0] % 2:
            raise ConfigError("gaussian head needs an even output width")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        n = self.weights[-1].shape[0]
        return n // 2 if self.head == "gaussian" else n

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    @property
    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MLP":
        return MLP(tuple(arrays[0::2]), tuple(arrays[1::2]), self.head)

    def __call__(self, x):
        return mlp_forward(self, x)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, head: str = "linear",
             out_scale: float = 1.0) -> MLP:
    """He-uniform hidden layers; the output layer is scaled by ``out_scale``."""
    if len(sizes) < 2:
        raise ConfigError("need at least input and output sizes")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / n_in) if i < len(sizes) - 2 else math.sqrt(3.0 / n_in) * out_scale
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MLP(tuple(weights), tuple(biases), head)


def _split_head(net: MLP, raw: np.ndarray) -> DiagGaussian:
    d = net.out_dim
    return DiagGaussian(raw[..., :d], np.clip(raw[..., d:], LOG_STD_MIN, LOG_STD_MAX))


def mlp_forward_cache(net: MLP, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Raw final-layer output plus the layer inputs needed for backprop."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.in_dim:
        raise ConfigError(f"input width {h.shape[-1]} != network input width {net.in_dim}")
    cache = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.append(h)
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h, cache


def mlp_forward(net: MLP, x):
    """Evaluate the network; a gaussian head returns a :class:`DiagGaussian`."""
    raw, _ = mlp_forward_cache(net, x)
    return _split_head(net, raw) if net.head == "gaussian" else raw


def mlp_backward(net: MLP, raw: np.ndarray, cache: list[np.ndarray], grad_out) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``grad_out`` to (parameter gradients, input gradient).

    ``grad_out`` is an array for linear heads and a ``(g_mean, g_log_std)``
    pair for gaussian heads. Parameter gradients are summed over the batch,
    in the order of :attr:`MLP.arrays`.
    """
    if net.head == "gaussian":
        g_mean, g_log_std = grad_out
        d = net.out_dim
        ls = raw[..., d:]
        inside = (ls >= LOG_STD_MIN) & (ls <= LOG_STD_MAX)
        g = np.concatenate([g_mean, np.where(inside, g_log_std, 0.0)], axis=-1)
    else:
        g = np.asarray(grad_out, dtype=np.float64)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        h_in = cache[i]
        g2 = g.reshape(-1, g.shape[-1])
        grads[2 * i] = g2.T @ h_in.reshape(-1, h_in.shape[-1])
        grads[2 * i + 1] = g2.sum(axis=0)
        g = g @ net.weights[i]
        if i > 0:
            g = g * (h_in > 0.0)
    return grads, g


LossFn = Callable[[object], tuple[np.ndarray, object]]


def mlp_gradients(net: MLP, inputs, loss_fn: LossFn) -> tuple[float, list[np.ndarray]]:
    """Mean loss over a batch and its exact gradient.

    ``loss_fn`` maps the head output (array or :class:`DiagGaussian`) to a
    pair ``(per_sample_losses, grad)`` where ``grad`` is the gradient of each
    sample's own loss with respect to the head output.
    """
    raw, cache = mlp_forward_cache(net, inputs)
    out = _split_head(net, raw) if net.head == "gaussian" else raw
    losses, g = loss_fn(out)
    losses = np.atleast_1d(np.asarray(losses, dtype=np.float64))
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NumericError(f"non-finite loss at batch index {int(bad[0])}")
    n = losses.shape[0]
    if isinstance(g, tuple):
        g = tuple(np.asarray(gi) / n for gi in g)
    else:
        g = np.asarray(g) / n
    grads, _ = mlp_backward(net, raw, cache, g)
    return float(losses.mean()), grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = tuple(np.zeros_like(p) for p in params)
    return AdamState(zeros, tuple(np.zeros_like(p) for p in params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
              ) -> tuple[list[np.ndarray], AdamState]:
    if not (len(params) == len(grads) == len(state.m)):
        raise ConfigError("adam: parameter/gradient/moment counts differ")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigError(f"adam: shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(tuple(new_m), tuple(new_v), t, state.lr, b1, b2, state.eps)


class Trainable:
    """A network paired with its optimizer state; the one mutable holder."""

    def __init__(self, net: MLP, lr: float):
        self.net = net
        self.opt = adam_init(net.arrays, lr)

    def apply(self, grads: Sequence[np.ndarray]):
        arrays, self.opt = adam_step(self.opt, self.net.arrays, grads)
        self.net = self.net.with_arrays(arrays)


def polyak(target: MLP, online: MLP, rate: float) -> MLP:
    """Elementwise ``rate * online + (1 - rate) * target``."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"polyak rate {rate} outside [0, 1]")
    arrays = [rate * o + (1.0 - rate) * t for t, o in zip(target.arrays, online.arrays)]
    return target.with_arrays(arrays)
