"""Command-line entry point: ``mabe <subcommand> [--config PATH] [--seed N] [--out DIR] [--force]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mabe.experiment import (
    EvalConfig,
    ExperimentConfig,
    ResultRow,
    StageError,
    Store,
    digest,
    emit_metrics,
    ensure_dataset,
    ensure_dynamics,
    ensure_prior,
    evaluate_policy,
    load_config,
    merge_dicts,
    normalized_score,
    parse_override,
    resolve_refs,
    run_ablation,
    run_pipeline,
    run_transfer,
    write_outputs,
)
from mabe.nn import ConfigError
from mabe.policy import load_policy

log = logging.getLogger("mabe")

COMMANDS = ("gen-data", "train-dynamics", "train-prior", "train", "eval", "ablate", "transfer", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (nested tables)")
    common.add_argument("--seed", type=int, action="append",
                        help="training seed; repeat for several (overrides the config's seed list)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    common.add_argument("--force", action="store_true", help="retrain even when artifacts exist")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. agent.delta=0.3 (JSON values)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="mabe", description="Offline model-based RL with behavioral priors.")
    sub = p.add_subparsers(dest="command", required=True)
    help_text = {
        "gen-data": "generate the configured offline dataset",
        "train-dynamics": "train the dynamics ensemble for each seed",
        "train-prior": "fit the dataset Q-function, weights and behavioral prior for each seed",
        "train": "train the MABE agent for each seed",
        "eval": "evaluate a trained policy checkpoint (or the pipeline policies)",
        "ablate": "run the ablation arms and write results",
        "transfer": "run the cross-domain transfer arms and write results",
        "pipeline": "run every stage end to end and write results",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=help_text[name])
        if name == "eval":
            sp.add_argument("--policy", type=Path, help="policy checkpoint to evaluate")
            sp.add_argument("--episodes", type=int, help="evaluation episodes")
    return p


def resolve(args) -> ExperimentConfig:
    over: dict = {}
    for text in args.overrides:
        over = merge_dicts(over, parse_override(text))
    if args.seed:
        over["seeds"] = list(args.seed)
    return load_config(args.config, over)


def _echo_config(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_stages(cfg: ExperimentConfig, args, upto: str) -> int:
    store = Store(args.out, args.force)
    _echo_config(cfg, args.out)
    d, dkey, path = ensure_dataset(store, cfg.env, cfg.data, cfg.agent.gamma)
    print(f"dataset {path} ({len(d)} transitions)")
    if upto == "gen-data":
        return 0
    for seed in cfg.seeds:
        if upto == "train-dynamics":
            _, _, p = ensure_dynamics(store, d, dkey, cfg.dynamics, seed)
            print(f"dynamics seed {seed}: {p}")
        else:
            prior, _, p = ensure_prior(store, d, dkey, cfg.prior, cfg.agent.gamma, seed)
            print(f"prior seed {seed}: {p} (validation nll {prior.val_nll:.4f})")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ev = cfg.eval if args.episodes is None else EvalConfig(args.episodes, cfg.eval.deterministic, cfg.eval.seed)
    if args.policy is None:
        res = run_pipeline(cfg, args.out, force=False)
        write_outputs(cfg, res, args.out)
        print((args.out / "summary.txt").read_text(), end="")
        return 0
    pol, _ = load_policy(args.policy)
    refs = resolve_refs(cfg, cfg.env)
    rows = []
    for seed in cfg.seeds:
        mean, std = evaluate_policy(cfg.env, pol, ev.episodes, ev.seed + 1000 * seed, ev.deterministic)
        rows.append(ResultRow("eval", args.policy.stem, seed, mean, std, normalized_score(mean, *refs)))
        print(f"seed {seed}: return {mean:.3f} +- {std:.3f}, normalized {rows[-1].normalized_score:.2f}")
    emit_metrics(rows, {}, args.out, refs, digest(cfg))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command in ("gen-data", "train-dynamics", "train-prior"):
            return cmd_stages(cfg, args, args.command)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        runner = {"train": run_pipeline, "pipeline": run_pipeline, "ablate": run_ablation,
                  "transfer": run_transfer}[args.command]
        res = runner(cfg, args.out, args.force)
        write_outputs(cfg, res, args.out)
        print((args.out / "summary.txt").read_text(), end="")
        return 0
    except StageError as exc:
        print(f"mabe: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"mabe: stage 'config' failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
