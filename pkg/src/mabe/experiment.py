"""Configuration, content-addressed pipelines, evaluation and result emission.

Every trained artifact is stored under ``<out>/artifacts`` with a file name
derived from the hash of everything that determines it, so reruns reuse what
already exists and never mix artifacts from different configurations.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from mabe.agent import AgentConfig, TrainMetrics, train_mabe
from mabe.checkpoint import load_checkpoint, mlp_from_arrays, mlp_to_arrays, save_checkpoint
from mabe.data import Dataset, generate_dataset, read_dataset, write_dataset
from mabe.dynamics import DynamicsConfig, DynamicsEnsemble, load_ensemble, save_ensemble, train_dynamics
from mabe.envs import EnvSpec, make_collector, reward_fn, rollout_episode
from mabe.nn import ConfigError
from mabe.policy import GaussianPolicy, load_policy, save_policy
from mabe.prior import PriorConfig, PriorParams, QFitConfig, build_prior

log = logging.getLogger(__name__)

RESULTS_HEADER = ("experiment", "arm", "seed", "raw_return", "return_std", "normalized_score")
CURVES_HEADER = ("arm", "seed", "epoch", "critic_loss", "policy_obj", "mean_kl", "beta", "buffer_size", "eval_return")
ABLATION_ARMS = ("full", "no_prior", "no_rl", "no_uncertainty")
# Arm overrides on top of the configured agent; "uniform_prior" swaps the weighted prior for plain cloning.
ARM_FLAGS = {
    "full": {},
    "no_prior": {"no_prior": True},
    "no_rl": {"no_rl": True},
    "no_uncertainty": {"no_uncertainty": True},
    "uniform_prior": {},
}
TRANSFER_ARMS = ("i_task", "ii_domain", "iii_task_init", "iv_mabe")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage!r} failed: {msg}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    recipe: str = "mixed"
    size: int = 20000
    seed: int = 0


@dataclass(frozen=True)
class PriorSpec:
    mode: str = "q-advantage"
    eta: float = 1.0
    q_norm: str = "r_max"
    q_fit: QFitConfig = QFitConfig()
    fit: PriorConfig = PriorConfig()


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 10
    deterministic: bool = True
    seed: int = 10000


@dataclass(frozen=True)
class RefConfig:
    random_ref: float | None = None
    expert_ref: float | None = None
    episodes: int = 100
    seed: int = 20000


@dataclass(frozen=True)
class TransferConfig:
    ice_friction: float = 0.45
    direction: tuple[float, ...] = (-1.0, 0.0)
    source: DataConfig = DataConfig(recipe="mixed", size=20000, seed=0)
    target: DataConfig = DataConfig(recipe="expert", size=5000, seed=1)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "pipeline"
    seeds: tuple[int, ...] = (0,)
    env: EnvSpec = EnvSpec()
    data: DataConfig = DataConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    prior: PriorSpec = PriorSpec()
    agent: AgentConfig = AgentConfig()
    eval: EvalConfig = EvalConfig()
    refs: RefConfig = RefConfig()
    transfer: TransferConfig = TransferConfig()
    arms: tuple[str, ...] = ABLATION_ARMS

    def to_dict(self) -> dict:
        return _plain(self)


def _plain(obj):
    if isinstance(obj, EnvSpec):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {
    ExperimentConfig: {"data": DataConfig, "dynamics": DynamicsConfig, "prior": PriorSpec, "agent": AgentConfig,
                       "eval": EvalConfig, "refs": RefConfig, "transfer": TransferConfig},
    PriorSpec: {"q_fit": QFitConfig, "fit": PriorConfig},
    TransferConfig: {"source": DataConfig, "target": DataConfig},
}


def _build(cls, raw: dict, path: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a table")
    if cls is EnvSpec:
        try:
            return EnvSpec.from_dict(raw)
        except TypeError as exc:
            raise ConfigError(f"config section {path}: {exc}") from None
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
        sub = _NESTED.get(cls, {}).get(key)
        if key == "env" and cls is ExperimentConfig:
            kw[key] = _build(EnvSpec, val, "env.")
        elif sub is not None:
            kw[key] = _build(sub, val, f"{path}{key}.")
        elif isinstance(val, list):
            kw[key] = tuple(val)
        else:
            kw[key] = val
    return cls(**kw)


def merge_dicts(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_dicts(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Overlay ``raw`` on the defaults; unknown keys are rejected."""
    merged = merge_dicts(ExperimentConfig().to_dict(), raw)
    cfg = _build(ExperimentConfig, merged)
    for arm in cfg.arms:
        if arm not in ARM_FLAGS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {sorted(ARM_FLAGS)}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    r = cfg.refs
    if r.random_ref is not None and r.expert_ref is not None and not r.expert_ref > r.random_ref:
        raise ConfigError("expert_ref must exceed random_ref")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config file (nested tables) and apply ``overrides`` on top."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(merge_dicts(raw, overrides or {}))


def parse_override(text: str) -> dict:
    """``"agent.delta=0.3"`` -> ``{"agent": {"delta": 0.3}}``; values are JSON or bare strings."""
    key, sep, val = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(val)
    except json.JSONDecodeError:
        value = val
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def digest(obj) -> str:
    blob = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Evaluation and scoring
# ---------------------------------------------------------------------------


def evaluate_policy(spec: EnvSpec, policy, episodes: int, seed: int,
                    deterministic: bool = True) -> tuple[float, float]:
    """Mean and standard deviation of undiscounted episode returns.

    ``policy`` is a :class:`GaussianPolicy` (mean actions unless
    ``deterministic`` is false) or any ``obs -> action`` callable.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(policy, GaussianPolicy):
        pol = policy
        act = (lambda o: pol.act(o[None])[0]) if deterministic else (lambda o: pol.act(o[None], rng)[0])
    else:
        act = policy
    returns = np.array([rollout_episode(spec, act, seed=seed + i).total_return for i in range(episodes)])
    return float(returns.mean()), float(returns.std())


def normalized_score(raw: float, random_ref: float, expert_ref: float) -> float:
    """``100 (raw - random) / (expert - random)``."""
    if expert_ref == random_ref or not (math.isfinite(random_ref) and math.isfinite(expert_ref)):
        raise ConfigError(f"degenerate reference scores random={random_ref} expert={expert_ref}")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


def reference_scores(spec: EnvSpec, episodes: int = 100, seed: int = 20000) -> tuple[float, float]:
    """(random_ref, expert_ref) from the scripted controllers."""
    out = []
    for kind in ("random", "expert"):
        rng = np.random.default_rng(seed)
        out.append(evaluate_policy(spec, make_collector(kind, spec, rng), episodes, seed)[0])
    return out[0], out[1]


def resolve_refs(cfg: ExperimentConfig, spec: EnvSpec) -> tuple[float, float]:
    r = cfg.refs
    if r.random_ref is not None and r.expert_ref is not None:
        return float(r.random_ref), float(r.expert_ref)
    lo, hi = reference_scores(spec, r.episodes, r.seed)
    if not hi > lo:
        raise ConfigError(f"expert reference {hi} does not exceed random reference {lo}")
    return lo, hi


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    arm: str
    seed: int
    raw_return: float
    return_std: float
    normalized_score: float


@dataclass
class RunOutput:
    rows: list[ResultRow] = field(default_factory=list)
    curves: dict[tuple[str, int], TrainMetrics] = field(default_factory=dict)
    artifacts: dict[str, Path] = field(default_factory=dict)
    provenance: dict[str, dict] = field(default_factory=dict)
    refs: tuple[float, float] = (float("nan"), float("nan"))


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.6f}"


def results_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in sorted(rows, key=lambda r: (r.experiment, r.arm, r.seed)):
        w.writerow([r.experiment, r.arm, r.seed, _fmt(r.raw_return), _fmt(r.return_std), _fmt(r.normalized_score)])
    return buf.getvalue()


def curves_csv(curves: dict[tuple[str, int], TrainMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVES_HEADER)
    for (arm, seed) in sorted(curves):
        for row in curves[(arm, seed)].rows():
            w.writerow([arm, seed, row["epoch"], *(_fmt(row[k]) for k in CURVES_HEADER[3:8]),
                        _fmt(row["eval_return"])])
    return buf.getvalue()


def summary_text(rows: list[ResultRow], refs: tuple[float, float], config_hash: str) -> str:
    lines = [f"config {config_hash}", f"random_ref {_fmt(refs[0])}  expert_ref {_fmt(refs[1])}", ""]
    lines.append(f"{'experiment':<12} {'arm':<16} {'seeds':>5} {'score mean':>11} {'score std':>10} {'raw mean':>10}")
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.arm), []).append(r)
    for (exp, arm), rs in sorted(groups.items()):
        s = np.array([r.normalized_score for r in rs])
        raw = np.array([r.raw_return for r in rs])
        lines.append(f"{exp:<12} {arm:<16} {len(rs):>5} {s.mean():>11.2f} {s.std():>10.2f} {raw.mean():>10.2f}")
    return "\n".join(lines) + "\n"


def emit_metrics(rows: list[ResultRow], curves: dict[tuple[str, int], TrainMetrics], out_dir,
                 refs: tuple[float, float] = (float("nan"), float("nan")), config_hash: str = "") -> dict[str, Path]:
    """Write ``results.csv``, ``learning_curves.csv`` and ``summary.txt``."""
    if not rows:
        raise ConfigError("no result rows to emit")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": out / "results.csv",
            "curves": out / "learning_curves.csv",
            "summary": out / "summary.txt",
        }
        paths["results"].write_text(results_csv(rows))
        paths["curves"].write_text(curves_csv(curves))
        paths["summary"].write_text(summary_text(rows, refs, config_hash))
    except OSError as exc:
        raise StageError("emit", f"cannot write to {out}: {exc}") from None
    return paths


# ---------------------------------------------------------------------------
# Artifact store
# ---------------------------------------------------------------------------


class Store:
    """Content-addressed artifact directory with stage-level skip logic."""

    def __init__(self, out_dir, force: bool = False):
        self.root = Path(out_dir) / "artifacts"
        self.root.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.built: list[str] = []
        self.skipped: list[str] = []
        self.datasets_read: list[str] = []

    def path(self, kind: str, key: str, ext: str) -> Path:
        return self.root / f"{kind}-{key}.{ext}"

    def have(self, stage: str, path: Path) -> bool:
        if path.exists() and not self.force:
            log.info("skip %s: %s exists", stage, path.name)
            self.skipped.append(stage)
            return True
        self.built.append(stage)
        return False


def _stage(name: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (ConfigError, ValueError, FloatingPointError, OSError) as exc:
        raise StageError(name, str(exc)) from exc


def ensure_dataset(store: Store, spec: EnvSpec, dc: DataConfig, gamma: float) -> tuple[Dataset, str, Path]:
    key = digest({"env": spec, "data": dc, "gamma": gamma})
    path = store.path("dataset", key, "mabd")

    def build():
        if not store.have("gen-data", path):
            d = generate_dataset(spec, dc.recipe, dc.size, dc.seed, gamma)
            d.meta["content_hash"] = key
            write_dataset(path, d)
        store.datasets_read.append(key)
        return read_dataset(path)

    return _stage("gen-data", build), key, path


def ensure_dynamics(store: Store, d: Dataset, data_key: str, cfg: DynamicsConfig, seed: int
                    ) -> tuple[DynamicsEnsemble, str, Path]:
    key = digest({"data": data_key, "dynamics": cfg, "seed": seed})
    path = store.path("dynamics", key, "mabm")

    def build():
        if not store.have("train-dynamics", path):
            save_ensemble(path, train_dynamics(d, cfg, seed), {"dataset": data_key, "seed": seed})
        return load_ensemble(path)

    return _stage("train-dynamics", build), key, path


def save_prior(path, p: PriorParams, weights: np.ndarray, meta: dict | None = None):
    arrays = mlp_to_arrays(p.policy.net, "policy")
    arrays.update(obs_mean=p.policy.obs_mean, obs_scale=p.policy.obs_scale, weights=weights,
                  history=np.asarray(p.history))
    m = {"kind": "prior", "eta": repr(p.eta), "mode": p.mode, "val_nll": repr(p.val_nll),
         "init_val_nll": repr(p.init_val_nll), **(meta or {})}
    return save_checkpoint(path, arrays, m)


def load_prior(path) -> tuple[PriorParams, np.ndarray]:
    arrays, meta = load_checkpoint(path)
    pol = GaussianPolicy(mlp_from_arrays(arrays, "policy", "gaussian"), arrays["obs_mean"], arrays["obs_scale"])
    p = PriorParams(pol, float(meta["eta"]), meta["mode"], float(meta["val_nll"]), float(meta["init_val_nll"]),
                    list(arrays["history"]))
    return p, arrays["weights"]


def ensure_prior(store: Store, d: Dataset, data_key: str, ps: PriorSpec, gamma: float, seed: int
                 ) -> tuple[PriorParams, str, Path]:
    key = digest({"data": data_key, "prior": ps, "gamma": gamma, "seed": seed})
    path = store.path("prior", key, "mabm")

    def build():
        if not store.have("train-prior", path):
            p, w = build_prior(d, ps.mode, ps.eta, gamma, ps.q_norm, ps.q_fit, ps.fit, seed)
            save_prior(path, p, w, {"dataset": data_key, "seed": seed})
        return load_prior(path)[0]

    return _stage("train-prior", build), key, path


def _metrics_to_json(m: TrainMetrics) -> dict:
    return {k: [None if isinstance(v, float) and not math.isfinite(v) else v for v in getattr(m, k)]
            for k in (f.name for f in fields(TrainMetrics))}


def _metrics_from_json(raw: dict) -> TrainMetrics:
    m = TrainMetrics()
    for k, vals in raw.items():
        setattr(m, k, [float("nan") if v is None else v for v in vals])
    return m


@dataclass
class PolicyRun:
    policy: GaussianPolicy
    metrics: TrainMetrics
    raw_return: float
    return_std: float
    key: str
    path: Path


def ensure_policy(store: Store, key_parts: dict, train: Callable[[Callable], tuple[GaussianPolicy, TrainMetrics]],
                  eval_spec: EnvSpec, ev: EvalConfig, seed: int) -> PolicyRun:
    """Train (or reuse) a policy; raw score averages the in-training probes of the final epochs."""
    key = digest({**key_parts, "eval_env": eval_spec, "eval": ev, "seed": seed})
    path = store.path("policy", key, "mabm")
    mpath = store.path("metrics", key, "json")

    def build():
        if not store.have("train", path) or not mpath.exists():
            episodes: list[float] = []

            def probe(pol):
                mean, std = evaluate_policy(eval_spec, pol, ev.episodes, ev.seed + 1000 * seed, ev.deterministic)
                episodes.append((mean, std))
                return mean

            pol, metrics = train(probe)
            if not episodes:
                probe(pol)
            means = np.array([e[0] for e in episodes])
            # Pooled std over all probe episodes (equal episode counts per probe).
            pooled = float(np.sqrt(np.mean([e[1] ** 2 for e in episodes]) + means.var()))
            summary = {"raw_return": float(means.mean()), "return_std": pooled, "metrics": _metrics_to_json(metrics)}
            save_policy(path, pol, {"key": key})
            mpath.write_text(json.dumps(summary, sort_keys=True))
        pol, _ = load_policy(path)
        s = json.loads(mpath.read_text())
        return PolicyRun(pol, _metrics_from_json(s["metrics"]), s["raw_return"], s["return_std"], key, path)

    return _stage("train", build)


# ---------------------------------------------------------------------------
# Harnesses
# ---------------------------------------------------------------------------


def arm_agent_config(cfg: AgentConfig, arm: str) -> AgentConfig:
    return replace(cfg, **ARM_FLAGS[arm])


def _arm_prior_spec(ps: PriorSpec, arm: str) -> PriorSpec:
    return replace(ps, mode="uniform") if arm == "uniform_prior" else ps


def run_arms(cfg: ExperimentConfig, out_dir, force: bool = False, arms=None) -> RunOutput:
    """Train and score ``arms`` over every seed on one shared dataset.

    Arms of one seed share the dataset, the dynamics ensemble and (where the
    arm uses it) the prior; only the ablated component differs.
    """
    arms = tuple(cfg.arms if arms is None else arms)
    store = Store(out_dir, force)
    spec = cfg.env
    gamma = cfg.agent.gamma
    refs = _stage("refs", resolve_refs, cfg, spec)
    out = RunOutput(refs=refs)
    d, dkey, dpath = ensure_dataset(store, spec, cfg.data, gamma)
    out.artifacts["dataset"] = dpath
    for seed in cfg.seeds:
        dyn = None
        priors: dict[str, tuple] = {}
        for arm in arms:
            acfg = arm_agent_config(cfg.agent, arm)
            prior = pkey = None
            if not acfg.no_prior:
                ps = _arm_prior_spec(cfg.prior, arm)
                if ps.mode not in priors:
                    priors[ps.mode] = ensure_prior(store, d, dkey, ps, gamma, seed)
                    out.artifacts[f"prior-{ps.mode}"] = priors[ps.mode][2]
                prior, pkey, _ = priors[ps.mode]
            ekey = None
            if not acfg.no_rl:
                if dyn is None:
                    dyn = ensure_dynamics(store, d, dkey, cfg.dynamics, seed)
                    out.artifacts["dynamics"] = dyn[2]
                ekey = dyn[1]
            ens = dyn[0] if dyn is not None else None

            def train(probe, acfg=acfg, prior=prior, ens=ens):
                return train_mabe(d, ens, prior, acfg, seed, evaluate=probe)

            parts = {"arm": arm, "data": dkey, "dynamics": ekey, "prior": pkey, "agent": acfg}
            run = ensure_policy(store, parts, train, spec, cfg.eval, seed)
            out.artifacts["policy"] = run.path
            out.rows.append(ResultRow(cfg.name, arm, seed, run.raw_return, run.return_std,
                                      normalized_score(run.raw_return, *refs)))
            out.curves[(arm, seed)] = run.metrics
            out.provenance[f"{arm}/{seed}"] = {"dataset": dkey, "dynamics": ekey, "prior": pkey, "policy": run.key}
    return out


def run_pipeline(cfg: ExperimentConfig, out_dir, force: bool = False) -> RunOutput:
    """Dataset, dynamics, prior, MABE training and evaluation for every seed ("full" arm)."""
    return run_arms(cfg, out_dir, force, arms=("full",))


def run_ablation(cfg: ExperimentConfig, out_dir, force: bool = False) -> RunOutput:
    return run_arms(cfg, out_dir, force, arms=cfg.arms)


def relabel(d: Dataset, fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> Dataset:
    """Copy of ``d`` with rewards recomputed by ``fn(obs, action, next_obs)``."""
    r = fn(d.obs.astype(np.float64), d.actions.astype(np.float64), d.next_obs.astype(np.float64))
    return Dataset(d.obs, d.actions, r, d.next_obs, d.dones, d.traj_ends, dict(d.meta, relabeled="1"))


def transfer_specs(cfg: ExperimentConfig) -> tuple[EnvSpec, EnvSpec, EnvSpec]:
    """(source domain/task, ice domain/backward task, evaluation: normal domain/backward task)."""
    tc = cfg.transfer
    source = cfg.env
    ice = cfg.env.replace(friction=tc.ice_friction, direction=tuple(tc.direction))
    target = cfg.env.replace(direction=tuple(tc.direction))
    return source, ice, target


def run_transfer(cfg: ExperimentConfig, out_dir, force: bool = False) -> RunOutput:
    """Cross-domain, cross-task transfer arms.

    D1: source-quality data, forward task, normal friction. D2: expert data,
    backward task, ice. Evaluation: backward task, normal friction.

    * ``i_task``: offline MBRL (no prior) on D1's dynamics, rewards relabeled for the backward task.
    * ``ii_domain``: offline MBRL (no prior) on D2 alone, evaluated zero-shot in the normal domain.
    * ``iii_task_init``: ``i_task`` with the policy initialized from the D2 prior.
    * ``iv_mabe``: MABE with D1 dynamics (relabeled rewards) and the D2 prior.
    """
    store = Store(out_dir, force)
    gamma = cfg.agent.gamma
    source, ice, target = transfer_specs(cfg)
    refs = _stage("refs", resolve_refs, cfg, target)
    out = RunOutput(refs=refs)
    d1, k1, p1 = ensure_dataset(store, source, cfg.transfer.source, gamma)
    d2, k2, p2 = ensure_dataset(store, ice, cfg.transfer.target, gamma)
    out.artifacts.update(dataset_d1=p1, dataset_d2=p2)
    relabel_fn = lambda s, a, s2: reward_fn(target, s, a, s2)  # noqa: E731
    d1_task = relabel(d1, relabel_fn)
    mopo = replace(cfg.agent, no_prior=True, no_rl=False)
    mabe = replace(cfg.agent, no_prior=False, no_rl=False)
    for seed in cfg.seeds:
        e1, ek1, _ = ensure_dynamics(store, d1, k1, cfg.dynamics, seed)
        e2, ek2, _ = ensure_dynamics(store, d2, k2, cfg.dynamics, seed)
        prior2, pk2, _ = ensure_prior(store, d2, k2, cfg.prior, gamma, seed)
        plans = {
            "i_task": dict(data=d1_task, ens=e1, prior=None, acfg=mopo, rf=relabel_fn, init=None,
                           prov={"dataset": k1, "dynamics": ek1, "prior": None}),
            "ii_domain": dict(data=d2, ens=e2, prior=None, acfg=mopo, rf=None, init=None,
                              prov={"dataset": k2, "dynamics": ek2, "prior": None}),
            "iii_task_init": dict(data=d1_task, ens=e1, prior=None, acfg=mopo, rf=relabel_fn, init=prior2.policy,
                                  prov={"dataset": k1, "dynamics": ek1, "prior": None, "init": pk2}),
            "iv_mabe": dict(data=d1_task, ens=e1, prior=prior2, acfg=mabe, rf=relabel_fn, init=None,
                            prov={"dataset": k1, "dynamics": ek1, "prior": pk2}),
        }
        for arm in TRANSFER_ARMS:
            p = plans[arm]

            def train(probe, p=p):
                return train_mabe(p["data"], p["ens"], p["prior"], p["acfg"], seed, evaluate=probe,
                                  reward_fn=p["rf"], init_policy=p["init"])

            parts = {"arm": arm, "agent": p["acfg"], "transfer": cfg.transfer, **p["prov"]}
            run = ensure_policy(store, parts, train, target, cfg.eval, seed)
            out.rows.append(ResultRow(cfg.name, arm, seed, run.raw_return, run.return_std,
                                      normalized_score(run.raw_return, *refs)))
            out.curves[(arm, seed)] = run.metrics
            out.provenance[f"{arm}/{seed}"] = {**p["prov"], "policy": run.key}
    return out


def write_outputs(cfg: ExperimentConfig, res: RunOutput, out_dir) -> dict[str, Path]:
    """Emit metrics plus the resolved config and artifact provenance."""
    out = Path(out_dir)
    paths = emit_metrics(res.rows, res.curves, out, res.refs, digest(cfg))
    resolved = cfg.to_dict()
    resolved["refs"].update(random_ref=res.refs[0], expert_ref=res.refs[1])
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    (out / "provenance.json").write_text(json.dumps(res.provenance, indent=2, sort_keys=True) + "\n")
    paths.update(config=out / "config.json", provenance=out / "provenance.json")
    return paths
