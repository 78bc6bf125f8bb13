"""Command line: ``oodppo train|eval|oodbench|sweep --config <path> --out <dir> [--seed N] [--force]``.

Exit codes: 0 ok, 2 configuration error, 3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, load_config
from .envs import make_env
from .evaluate import run_episodes
from .layers import ConfigError
from .ood import DegenerateLabels, run_benchmark, write_benchmark
from .ppo import CURVE_COLUMNS, TrainingDiverged, train
from .rng import make_rng
from .sweep import run_sweep, write_sweep
from .tables import cell, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

OUTPUTS = {
    "train": ("checkpoint.bin", "train_curve.csv", "config.resolved.json"),
    "eval": ("eval.csv", "eval.config.resolved.json"),
    "oodbench": ("summary.csv", "timeline.csv", "breakdown.csv", "oodbench.config.resolved.json"),
    "sweep": ("sweep.csv", "pareto.csv", "sweep.config.resolved.json"),
}
EVAL_COLUMNS = ("env", "method", "k", "scheme", "episodes", "seeds", "reward_mean", "reward_std",
                "single_reward_mean", "single_reward_std")


class OutputExists(OSError):
    pass


def _prepare_out(out: Path, command: str, force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    clash = [name for name in OUTPUTS[command] if (out / name).exists()]
    if command == "oodbench":
        clash += [p.name for p in out.glob("roc_*.csv")]
    if clash and not force:
        raise OutputExists(f"{out} already holds {', '.join(sorted(clash))}; pass --force to overwrite")


def _write_resolved(path: Path, cfg: RunConfig) -> None:
    path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def _checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.bin"


def cmd_train(cfg: RunConfig, out: Path) -> int:
    resolved = cfg.resolved()
    env_id = cfg.env
    with open(out / "train_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)

        def on_row(row: dict) -> None:
            writer.writerow([cell(row[c]) for c in CURVE_COLUMNS])
            fh.flush()

        try:
            result = train(lambda i, s: make_env(env_id, seed=s), cfg.agent_config(), cfg.ppo_config(), cfg.seed,
                           cfg.mode, on_row)
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    extra = {"env_steps": result.env_steps, "epochs": result.epochs}
    ckpt = ckpt_io.make_checkpoint(result.agent, resolved, result.optim, result.rng_states, extra)
    ckpt_io.save(out / "checkpoint.bin", ckpt)
    _write_resolved(out / "config.resolved.json", cfg)
    return EXIT_OK


def evaluate_checkpoint(cfg: RunConfig, agent) -> dict:
    """Aggregate-scheme and single-random-submodel rewards over ``episodes`` x ``seeds`` episodes."""
    e = cfg.eval
    agg, single = [], []
    for s in range(e.seeds):
        seed = cfg.seed + s
        env_seed = int(make_rng(seed, 51).integers(2**31 - 1))
        agg += run_episodes(agent, make_env(cfg.env, seed=env_seed), e.episodes, e.scheme, seed, e.deterministic)
        single += run_episodes(agent, make_env(cfg.env, seed=env_seed), e.episodes, "single", seed, e.deterministic)
    return {"env": cfg.env, "method": agent.config.method, "k": agent.k, "scheme": e.scheme,
            "episodes": len(agg), "seeds": e.seeds, "reward_mean": float(np.mean(agg)),
            "reward_std": float(np.std(agg)), "single_reward_mean": float(np.mean(single)),
            "single_reward_std": float(np.std(single))}


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    agent = ckpt_io.agent_from_checkpoint(ckpt_io.load(_checkpoint_path(cfg, out)))
    if agent.discrete and cfg.eval.scheme == "aggregate":
        raise ConfigError("eval.scheme: 'aggregate' needs a continuous action space")
    row = evaluate_checkpoint(cfg, agent)
    write_csv(out / "eval.csv", EVAL_COLUMNS, [row])
    _write_resolved(out / "eval.config.resolved.json", cfg)
    return EXIT_OK


def cmd_oodbench(cfg: RunConfig, out: Path) -> int:
    agent = ckpt_io.agent_from_checkpoint(ckpt_io.load(_checkpoint_path(cfg, out)))
    result = run_benchmark(agent, cfg.env, cfg.bench_params(), cfg.seed)
    write_benchmark(out, result)
    _write_resolved(out / "oodbench.config.resolved.json", cfg)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    s = cfg.sweep
    points = run_sweep(cfg.agent.method, cfg.env, s.n_configs, s.budget, cfg.seed, cfg.sweep_space(),
                       cfg.ppo_config(), len(cfg.agent.hidden), s.eval_episodes, s.n_id_steps, s.noise_level,
                       s.objective)
    write_sweep(out, cfg.agent.method, points)
    _write_resolved(out / "sweep.config.resolved.json", cfg)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "oodbench": cmd_oodbench, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodppo", description="PPO with multi-sample uncertainty and OOD benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML or JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed)
        _prepare_out(out, args.command, args.force)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateLabels as exc:
        print(f"config error: {exc} (is bench.burn_in longer than the episodes?)", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
