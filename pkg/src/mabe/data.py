"""Offline datasets, the MABD file format, recipes and the augmented buffer.

MABD layout (little-endian)::

    b"MABD" | version u32 | obs_dim u32 | act_dim u32 | count u64
    count x record:
        obs f32[obs_dim] | action f32[act_dim] | reward f32
        next_obs f32[obs_dim] | done u8 | traj_end u8
    footer: n_entries u32, then n_entries x (len u32 | utf-8 "key=value")
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mabe.envs import EnvSpec, make_blended_collector, make_collector, rollout_episode
from mabe.nn import ConfigError

log = logging.getLogger(__name__)

MAGIC = b"MABD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
RECIPES = ("medium", "mixed", "medium-expert", "expert", "random")


class DatasetFormatError(ValueError):
    """Base class for unreadable dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (truncated at byte offset {offset})")
        self.offset = offset


class DimensionError(DatasetFormatError):
    pass


def record_dtype(obs_dim: int, act_dim: int) -> np.dtype:
    return np.dtype([
        ("obs", "<f4", (obs_dim,)),
        ("action", "<f4", (act_dim,)),
        ("reward", "<f4"),
        ("next_obs", "<f4", (obs_dim,)),
        ("done", "u1"),
        ("traj_end", "u1"),
    ])


def _as_rows(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x if x.ndim == 2 else x.reshape(n, -1)


@dataclass
class Dataset:
    """Ordered transitions stored at file precision (float32)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    traj_ends: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.obs = _as_rows(self.obs, len(self.rewards))
        self.actions = _as_rows(self.actions, len(self.rewards))
        self.next_obs = np.asarray(self.next_obs, dtype=np.float32).reshape(self.obs.shape)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.traj_ends = np.asarray(self.traj_ends, dtype=bool)
        n = len(self.rewards)
        if not (len(self.obs) == len(self.actions) == len(self.dones) == len(self.traj_ends) == n):
            raise DimensionError("transition field lengths differ")
        if n and not self.traj_ends[-1]:
            raise DimensionError("last transition must close a trajectory")
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def __len__(self):
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def traj_starts(self) -> np.ndarray:
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([[0], np.flatnonzero(self.traj_ends[:-1]) + 1]).astype(np.int64)

    @property
    def traj_ids(self) -> np.ndarray:
        """Trajectory index of every transition."""
        ids = np.zeros(len(self), dtype=np.int64)
        if len(self) > 1:
            ids[1:] = np.cumsum(self.traj_ends[:-1])
        return ids

    @property
    def n_trajectories(self) -> int:
        return int(self.traj_ends.sum())

    def next_actions(self) -> tuple[np.ndarray, np.ndarray]:
        """Dataset action taken after each transition and a validity mask.

        The mask is false on trajectory ends, where no successor exists.
        """
        nxt = np.zeros_like(self.actions)
        nxt[:-1] = self.actions[1:]
        return nxt, ~self.traj_ends

    def trajectories(self) -> list[slice]:
        starts = self.traj_starts
        ends = np.flatnonzero(self.traj_ends) + 1
        return [slice(int(s), int(e)) for s, e in zip(starts, ends)]

    def subset(self, traj_idx) -> "Dataset":
        slices = self.trajectories()
        idx = np.concatenate([np.arange(slices[i].start, slices[i].stop) for i in traj_idx]) \
            if len(traj_idx) else np.zeros(0, dtype=np.int64)
        return Dataset(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                       self.dones[idx], self.traj_ends[idx], dict(self.meta))

    @property
    def env_spec(self) -> EnvSpec | None:
        import json

        raw = self.meta.get("env_spec")
        return EnvSpec.from_dict(json.loads(raw)) if raw else None

    def equals(self, other: "Dataset") -> bool:
        return (
            self.meta == other.meta
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("obs", "actions", "rewards", "next_obs", "dones", "traj_ends")
            )
        )


def empty_dataset(obs_dim: int, act_dim: int, meta=None) -> Dataset:
    return Dataset(np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros(0), np.zeros((0, obs_dim)),
                   np.zeros(0, bool), np.zeros(0, bool), meta or {})


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def dataset_bytes(d: Dataset) -> bytes:
    rec = np.zeros(len(d), dtype=record_dtype(d.obs_dim, d.act_dim))
    rec["obs"] = d.obs
    rec["action"] = d.actions
    rec["reward"] = d.rewards
    rec["next_obs"] = d.next_obs
    rec["done"] = d.dones
    rec["traj_end"] = d.traj_ends
    parts = [_HEADER.pack(MAGIC, VERSION, d.obs_dim, d.act_dim, len(d)), rec.tobytes()]
    items = sorted(d.meta.items())
    parts.append(struct.pack("<I", len(items)))
    for k, v in items:
        if "=" in k or "\n" in k:
            raise ConfigError(f"invalid metadata key {k!r}")
        line = f"{k}={v}".encode("utf-8")
        parts.append(struct.pack("<I", len(line)) + line)
    return b"".join(parts)


def write_dataset(path, d: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_bytes(d))
    return path


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError("header incomplete", len(blob))
    _, version, obs_dim, act_dim, count = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}")
    if obs_dim < 1 or act_dim < 1:
        raise DimensionError(f"invalid dimensions obs_dim={obs_dim} act_dim={act_dim}")
    dt = record_dtype(obs_dim, act_dim)
    off = _HEADER.size
    need = off + count * dt.itemsize
    if len(blob) < need:
        full = (len(blob) - off) // dt.itemsize
        raise TruncatedFileError(f"expected {count} records, found {full} complete", len(blob))
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=off)
    off = need
    meta = {}
    if len(blob) < off + 4:
        raise TruncatedFileError("metadata footer missing", len(blob))
    (n_items,) = struct.unpack_from("<I", blob, off)
    off += 4
    for _ in range(n_items):
        if len(blob) < off + 4:
            raise TruncatedFileError("metadata entry length missing", len(blob))
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + n:
            raise TruncatedFileError("metadata entry incomplete", len(blob))
        key, _, value = blob[off:off + n].decode("utf-8").partition("=")
        meta[key] = value
        off += n
    for key, want in (("obs_dim", obs_dim), ("act_dim", act_dim)):
        if key in meta and int(meta[key]) != want:
            raise DimensionError(f"metadata {key}={meta[key]} disagrees with header {want}")
    if count and not rec["traj_end"][-1]:
        raise DimensionError("final record does not close a trajectory")
    return Dataset(rec["obs"].copy(), rec["action"].copy(), rec["reward"].copy(), rec["next_obs"].copy(),
                   rec["done"].astype(bool), rec["traj_end"].astype(bool), meta)


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def export_csv(d: Dataset, path) -> Path:
    path = Path(path)
    header = (
        [f"obs_{i}" for i in range(d.obs_dim)] + [f"action_{i}" for i in range(d.act_dim)] + ["reward"]
        + [f"next_obs_{i}" for i in range(d.obs_dim)] + ["done", "traj_end"]
    )
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(d)):
            w.writerow(
                [repr(float(v)) for v in d.obs[i]] + [repr(float(v)) for v in d.actions[i]]
                + [repr(float(d.rewards[i]))] + [repr(float(v)) for v in d.next_obs[i]]
                + [int(d.dones[i]), int(d.traj_ends[i])]
            )
    return path


# ---------------------------------------------------------------------------
# Generation and statistics
# ---------------------------------------------------------------------------


def from_trajectories(trajs, meta=None) -> Dataset:
    if not trajs:
        raise ConfigError("no trajectories")
    ends = []
    for t in trajs:
        e = np.zeros(len(t), bool)
        e[-1] = True
        ends.append(e)
    return Dataset(
        np.concatenate([t.obs for t in trajs]), np.concatenate([t.actions for t in trajs]),
        np.concatenate([t.rewards for t in trajs]), np.concatenate([t.next_obs for t in trajs]),
        np.concatenate([t.dones for t in trajs]), np.concatenate(ends), meta or {},
    )


def generate_dataset(spec: EnvSpec, recipe: str, size: int, seed: int, gamma: float = 0.99) -> Dataset:
    """Roll out scripted collectors following a dataset recipe.

    ``medium`` uses the medium controller throughout; ``mixed`` grades the
    controller from random to medium to expert across trajectories, like a
    replay buffer recorded over training; ``medium-expert`` is half medium,
    half expert trajectories. ``expert`` and ``random`` are single-collector
    recipes used by the transfer experiments.
    """
    import json

    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}")
    n_traj = max(1, int(round(size / spec.horizon)))
    rng = np.random.default_rng(seed)
    trajs, sources = [], []
    for i in range(n_traj):
        if recipe == "mixed":
            q = i / max(n_traj - 1, 1)
            policy = make_blended_collector(q, spec, rng)
            src = f"q{q:.3f}"
        else:
            if recipe == "medium-expert":
                kind = "medium" if i < (n_traj + 1) // 2 else "expert"
            else:
                kind = recipe
            policy = make_collector(kind, spec, rng)
            src = kind
        trajs.append(rollout_episode(spec, policy, seed=int(rng.integers(2 ** 31))))
        sources.append(src)
    meta = {
        "env_spec": json.dumps(spec.to_dict(), sort_keys=True),
        "env_hash": spec.digest(),
        "obs_dim": spec.obs_dim,
        "act_dim": spec.act_dim,
        "recipe": recipe,
        "gamma": gamma,
        "seed": seed,
        "sources": ",".join(sources),
    }
    d = from_trajectories(trajs, meta)
    # The toy tasks never terminate; horizon endings are truncations, kept in traj_end only.
    d.dones[:] = False
    return d


@dataclass(frozen=True)
class Stats:
    r_max: float
    traj_returns: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray

    @property
    def obs_scale(self) -> np.ndarray:
        """Standard deviation with zero entries replaced by 1."""
        return np.where(self.obs_std > 0, self.obs_std, 1.0)


def dataset_stats(d: Dataset) -> Stats:
    if not len(d):
        raise ConfigError("statistics of an empty dataset")
    r = d.rewards.astype(np.float64)
    returns = np.array([r[s].sum() for s in d.trajectories()])
    obs = d.obs.astype(np.float64)
    return Stats(float(r.max()), returns, obs.mean(axis=0), obs.std(axis=0))


# ---------------------------------------------------------------------------
# Augmented buffer
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    n_real: int = 0

    def __len__(self):
        return len(self.rewards)

    @staticmethod
    def concat(batches: list["Batch"]) -> "Batch":
        return Batch(*(np.concatenate([getattr(b, k) for b in batches])
                       for k in ("obs", "actions", "rewards", "next_obs", "dones")),
                     n_real=sum(b.n_real for b in batches))


class AugmentedBuffer:
    """Real transitions (never evicted) plus a FIFO ring of synthetic ones."""

    def __init__(self, real: Dataset, capacity: int | None = None):
        if not len(real):
            raise ConfigError("augmented buffer needs real data")
        self.real = Batch(real.obs.astype(np.float64), real.actions.astype(np.float64),
                          real.rewards.astype(np.float64), real.next_obs.astype(np.float64),
                          real.dones.astype(np.float64))
        self.capacity = 100 * len(real) if capacity is None else int(capacity)
        od, ad = real.obs_dim, real.act_dim
        self._obs = np.zeros((self.capacity, od))
        self._act = np.zeros((self.capacity, ad))
        self._rew = np.zeros(self.capacity)
        self._nxt = np.zeros((self.capacity, od))
        self._done = np.zeros(self.capacity)
        self._head = 0
        self.n_synthetic = 0
        self.n_added = 0

    @property
    def n_real(self) -> int:
        return len(self.real)

    def __len__(self):
        return self.n_real + self.n_synthetic

    def add(self, batch: Batch):
        n = len(batch)
        if n == 0:
            return
        if n > self.capacity:
            batch = Batch(*(getattr(batch, k)[-self.capacity:]
                            for k in ("obs", "actions", "rewards", "next_obs", "dones")))
            n = self.capacity
        idx = (self._head + np.arange(n)) % self.capacity
        self._obs[idx] = batch.obs
        self._act[idx] = batch.actions
        self._rew[idx] = batch.rewards
        self._nxt[idx] = batch.next_obs
        self._done[idx] = batch.dones
        self._head = int((self._head + n) % self.capacity)
        self.n_synthetic = min(self.capacity, self.n_synthetic + n)
        self.n_added += n


def sample_batch(buf: AugmentedBuffer, n: int, real_fraction: float, seed) -> Batch:
    """``round(f * n)`` real transitions, the rest synthetic, uniform within each."""
    if n <= 0:
        raise ConfigError("batch size must be positive")
    if not 0.0 <= real_fraction <= 1.0:
        raise ConfigError("real_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if buf.n_synthetic == 0:
        if real_fraction < 1.0:
            log.info("synthetic buffer empty; sampling all %d transitions from real data", n)
        n_real = n
    else:
        n_real = int(math.floor(real_fraction * n + 0.5))
    ri = rng.integers(0, buf.n_real, size=n_real)
    si = rng.integers(0, buf.n_synthetic, size=n - n_real)
    r = buf.real
    return Batch(
        np.concatenate([r.obs[ri], buf._obs[si]]),
        np.concatenate([r.actions[ri], buf._act[si]]),
        np.concatenate([r.rewards[ri], buf._rew[si]]),
        np.concatenate([r.next_obs[ri], buf._nxt[si]]),
        np.concatenate([r.dones[ri], buf._done[si]]),
        n_real=n_real,
    )
