"""Gaussian dynamics ensemble: maximum-likelihood training and branch rollouts.

Each member maps normalized ``s ⊕ a`` to the normalized mean of
``[s' - s, r]`` and owns a state-independent log-std vector. Members are
trained on their own bootstrap resample and early-stopped on a shared
holdout split; the ``n_elites`` members with the lowest holdout negative
log-likelihood are used for prediction, uncertainty and rollouts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mabe.checkpoint import load_checkpoint, mlp_from_arrays, mlp_to_arrays, save_checkpoint
from mabe.data import Batch, Dataset
from mabe.nn import (
    LOG_2PI,
    LOG_STD_MAX,
    LOG_STD_MIN,
    MLP,
    ConfigError,
    DiagGaussian,
    adam_init,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DynamicsConfig:
    n_members: int = 5
    n_elites: int = 3
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 60
    holdout_fraction: float = 0.1
    patience: int = 5
    bound_margin: float = 1.0

    def __post_init__(self):
        if self.n_members < self.n_elites or self.n_elites < 1:
            raise ConfigError(f"need 1 <= n_elites ({self.n_elites}) <= n_members ({self.n_members})")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")


@dataclass
class DynamicsEnsemble:
    members: list[MLP]
    log_stds: list[np.ndarray]
    elites: tuple[int, ...]
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray
    obs_low: np.ndarray
    obs_high: np.ndarray
    holdout_nll: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def obs_dim(self) -> int:
        return len(self.obs_low)

    @property
    def act_dim(self) -> int:
        return self.members[0].in_dim - self.obs_dim

    def _raw(self, member: int, s, a) -> tuple[np.ndarray, np.ndarray]:
        x = (np.concatenate([s, a], axis=-1) - self.in_mean) / self.in_scale
        mean = mlp_forward(self.members[member], x) * self.out_scale + self.out_mean
        std = np.exp(self.log_stds[member]) * self.out_scale
        return mean, std


def select_elites(holdout_nll, n_elites: int) -> tuple[int, ...]:
    """Indices of the ``n_elites`` lowest holdout losses (ties by index)."""
    order = np.argsort(np.asarray(holdout_nll), kind="stable")
    return tuple(sorted(int(i) for i in order[:n_elites]))


def _nll_terms(mean, log_std, y):
    z = (y - mean) * np.exp(-log_std)
    per_sample = np.sum(0.5 * z * z + log_std + 0.5 * LOG_2PI, axis=-1)
    return per_sample, z


def member_nll_grads(net, log_std, x, y) -> tuple[float, list[np.ndarray]]:
    """Mean Gaussian NLL of targets ``y`` and its gradient for ``net.arrays + [log_std]``."""
    raw, cache = mlp_forward_cache(net, x)
    per, z = _nll_terms(raw, log_std, y)
    n = len(x)
    g_mean = -z * np.exp(-log_std) / n
    g_ls = np.sum(1.0 - z * z, axis=0) / n
    grads, _ = mlp_backward(net, raw, cache, g_mean)
    return float(per.mean()), grads + [g_ls]


def _train_member(x_tr, y_tr, x_ho, y_ho, cfg: DynamicsConfig, rng: np.random.Generator):
    in_dim, out_dim = x_tr.shape[1], y_tr.shape[1]
    net = init_mlp([in_dim, *cfg.hidden, out_dim], rng)
    log_std = np.zeros(out_dim)
    params = net.arrays + [log_std]
    opt = adam_init(params, cfg.lr)
    boot = rng.integers(0, len(x_tr), size=len(x_tr))
    xb, yb = x_tr[boot], y_tr[boot]

    def holdout_loss(n, ls):
        per, _ = _nll_terms(mlp_forward(n, x_ho), ls, y_ho)
        return float(per.mean())

    best = holdout_loss(net, log_std)
    best_params = [p.copy() for p in params]
    since = 0
    history = [best]
    for _ in range(cfg.max_epochs):
        perm = rng.permutation(len(xb))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            net = net.with_arrays(params[:-1])
            log_std = params[-1]
            _, grads = member_nll_grads(net, log_std, xb[idx], yb[idx])
            params, opt = adam_step(opt, params, grads)
            params[-1] = np.clip(params[-1], LOG_STD_MIN, LOG_STD_MAX)
        net = net.with_arrays(params[:-1])
        loss = holdout_loss(net, params[-1])
        history.append(loss)
        if loss < best - 1e-4 * max(1.0, abs(best)):
            best, best_params, since = loss, [p.copy() for p in params], 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return net.with_arrays(best_params[:-1]), best_params[-1], best, history


def train_dynamics(d: Dataset, cfg: DynamicsConfig = DynamicsConfig(), seed: int = 0) -> DynamicsEnsemble:
    if not len(d):
        raise ConfigError("cannot train dynamics on an empty dataset")
    rng = np.random.default_rng(seed)
    obs = d.obs.astype(np.float64)
    act = d.actions.astype(np.float64)
    nxt = d.next_obs.astype(np.float64)
    x = np.concatenate([obs, act], axis=1)
    y = np.concatenate([nxt - obs, d.rewards.astype(np.float64)[:, None]], axis=1)
    perm = rng.permutation(len(d))
    n_ho = max(1, int(round(cfg.holdout_fraction * len(d))))
    ho, tr = perm[:n_ho], perm[n_ho:]
    if not len(tr):
        tr = ho
    in_mean, in_std = x[tr].mean(0), x[tr].std(0)
    out_mean, out_std = y[tr].mean(0), y[tr].std(0)
    in_scale = np.where(in_std > 1e-8, in_std, 1.0)
    out_scale = np.where(out_std > 1e-8, out_std, 1.0)
    xn = (x - in_mean) / in_scale
    yn = (y - out_mean) / out_scale
    members, log_stds, nlls = [], [], []
    for k in range(cfg.n_members):
        member_rng = np.random.default_rng([seed, k])
        net, ls, nll, hist = _train_member(xn[tr], yn[tr], xn[ho], yn[ho], cfg, member_rng)
        log.debug("member %d: holdout nll %.4f after %d evaluations", k, nll, len(hist) - 1)
        members.append(net)
        log_stds.append(ls)
        nlls.append(nll)
    all_obs = np.concatenate([obs, nxt])
    lo, hi = all_obs.min(0), all_obs.max(0)
    span = np.maximum(hi - lo, 1e-6)
    return DynamicsEnsemble(
        members, log_stds, select_elites(nlls, cfg.n_elites), in_mean, in_scale, out_mean, out_scale,
        lo - cfg.bound_margin * span, hi + cfg.bound_margin * span, np.array(nlls),
        {"dataset_hash": d.meta.get("content_hash", "")},
    )


def predict(e: DynamicsEnsemble, member: int, s, a) -> tuple[DiagGaussian, np.ndarray]:
    """Next-state Gaussian and reward mean from one elite member."""
    if member not in e.elites:
        raise ConfigError(f"member {member} is not an elite ({e.elites})")
    s = np.asarray(s, dtype=np.float64)
    mean, std = e._raw(member, s, np.asarray(a, dtype=np.float64))
    od = e.obs_dim
    dist = DiagGaussian(s + mean[..., :od], np.broadcast_to(np.log(std[:od]), mean[..., :od].shape).copy())
    return dist, mean[..., od]


def uncertainty(e: DynamicsEnsemble, s, a) -> np.ndarray:
    """``max(max elite |std|, |std of elite means|)`` over ``[delta s, r]``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    means, std_norms = [], []
    for m in e.elites:
        mean, std = e._raw(m, s, a)
        means.append(mean)
        std_norms.append(np.linalg.norm(std))
    disagreement = np.linalg.norm(np.std(np.stack(means), axis=0), axis=-1)
    return np.maximum(max(std_norms), disagreement)


@dataclass
class Rollouts:
    batch: Batch
    uncertainty: np.ndarray
    branch: np.ndarray
    n_truncated: int = 0

    def __len__(self):
        return len(self.batch)


def synth_rollouts(e: DynamicsEnsemble, policy: Callable[[np.ndarray], np.ndarray], d: Dataset | np.ndarray,
                   h: int, n_branches: int, seed, action_bounds: tuple[float, float] | None = None) -> Rollouts:
    """Branch rollouts of length ``h`` from uniformly drawn dataset states.

    Each step samples an elite uniformly per branch and draws the next state
    from its Gaussian; the reward is that member's reward mean. A branch stops
    early on a non-finite prediction or when it leaves the state bounds.
    Output is ordered by branch, then step.
    """
    if h < 1:
        raise ConfigError("rollout length must be >= 1")
    rng = np.random.default_rng(seed)
    od, ad = e.obs_dim, e.act_dim
    if n_branches <= 0:
        z = np.zeros((0, od))
        return Rollouts(Batch(z, np.zeros((0, ad)), np.zeros(0), z.copy(), np.zeros(0)), np.zeros(0),
                        np.zeros(0, dtype=np.int64))
    starts = d.obs if isinstance(d, Dataset) else np.asarray(d)
    s = starts[rng.integers(0, len(starts), size=n_branches)].astype(np.float64)
    alive = np.arange(n_branches)
    elites = np.array(e.elites)
    steps = []
    n_trunc = 0
    for t in range(h):
        if not len(alive):
            break
        a = np.asarray(policy(s), dtype=np.float64).reshape(len(s), ad)
        if action_bounds is not None:
            a = np.clip(a, *action_bounds)
        preds = [e._raw(int(m), s, a) for m in elites]
        choice = rng.integers(0, len(elites), size=len(s))
        means = np.stack([p[0] for p in preds])
        mean = means[choice, np.arange(len(s))]
        std = np.stack([p[1] for p in preds])[choice]
        noise = rng.standard_normal(mean.shape)
        out = mean + std * noise
        nxt = s + out[:, :od]
        rew = mean[:, od]
        std_norm = max(float(np.linalg.norm(p[1])) for p in preds)
        u = np.maximum(std_norm, np.linalg.norm(means.std(axis=0), axis=-1))
        ok = np.all(np.isfinite(nxt), axis=1) & np.isfinite(rew)
        ok &= np.all((nxt >= e.obs_low) & (nxt <= e.obs_high), axis=1)
        n_trunc += int((~ok).sum())
        steps.append((alive[ok], s[ok], a[ok], rew[ok], nxt[ok], u[ok], t))
        alive, s = alive[ok], nxt[ok]
    if n_trunc:
        log.debug("synth_rollouts: %d branches truncated", n_trunc)
    branch = np.concatenate([st[0] for st in steps])
    step = np.concatenate([np.full(len(st[0]), st[6]) for st in steps])
    order = np.lexsort((step, branch))
    cat = lambda i: np.concatenate([st[i] for st in steps])[order]
    obs, act, rew, nxt, u = cat(1), cat(2), cat(3), cat(4), cat(5)
    batch = Batch(obs, act, rew, nxt, np.zeros(len(rew)))
    return Rollouts(batch, u, branch[order], n_trunc)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_ensemble(path, e: DynamicsEnsemble, meta: dict | None = None):
    arrays = {}
    for k, (net, ls) in enumerate(zip(e.members, e.log_stds)):
        arrays.update(mlp_to_arrays(net, f"member{k}"))
        arrays[f"member{k}.log_std"] = ls
    for name in ("in_mean", "in_scale", "out_mean", "out_scale", "obs_low", "obs_high", "holdout_nll"):
        arrays[name] = getattr(e, name)
    arrays["elites"] = np.array(e.elites, dtype=np.float64)
    m = {**e.meta, **(meta or {}), "kind": "dynamics", "n_members": len(e.members)}
    return save_checkpoint(path, arrays, m)


def load_ensemble(path) -> DynamicsEnsemble:
    arrays, meta = load_checkpoint(path)
    n = int(meta["n_members"])
    members = [mlp_from_arrays(arrays, f"member{k}", "linear") for k in range(n)]
    log_stds = [arrays[f"member{k}.log_std"] for k in range(n)]
    elites = tuple(int(v) for v in arrays["elites"])
    extra = {k: v for k, v in meta.items() if k not in ("kind", "n_members")}
    return DynamicsEnsemble(
        members, log_stds, elites, arrays["in_mean"], arrays["in_scale"], arrays["out_mean"],
        arrays["out_scale"], arrays["obs_low"], arrays["obs_high"], arrays["holdout_nll"], extra,
    )
