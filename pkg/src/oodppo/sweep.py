"""Random-search hyperparameter sweep scored on (reward, OOD AUC), with Pareto filtering."""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import AgentConfig
from .envs import make_env
from .evaluate import run_episodes
from .layers import ConfigError
from .ood import AttackSpec, LabeledStateSet, ObsStats, apply_attack, collect_id_states, score_measures
from .ppo import PpoConfig, TrainingDiverged, train
from .rng import make_rng
from .tables import write_csv

OBJECTIVES = {"value": "value_std", "policy": "policy_std"}
HYPERPARAMETERS = ("learning_rate", "hidden_width", "k", "scale", "p", "clip_range", "ent_coef",
                   "gae_lambda", "n_epochs")


@dataclass(frozen=True)
class SweepSpace:
    learning_rate: tuple[float, float] = (1e-4, 3e-3)
    hidden_width: tuple[int, ...] = (32, 64)
    k: tuple[int, ...] = (2, 4)
    scale: tuple[float, float] = (1.0, 4.0)
    p: tuple[float, float] = (0.05, 0.3)
    clip_range: tuple[float, float] = (0.1, 0.3)
    ent_coef: tuple[float, float] = (0.0, 0.01)
    gae_lambda: tuple[float, float] = (0.9, 1.0)
    n_epochs: tuple[int, ...] = (4, 10)

    def __post_init__(self):
        for name in ("learning_rate", "scale", "p", "clip_range", "ent_coef", "gae_lambda"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"empty sweep range for {name}")
        if self.learning_rate[0] <= 0:
            raise ConfigError("learning rate range must be positive")
        if not (self.hidden_width and self.k and self.n_epochs):
            raise ConfigError("choice lists must be non-empty")
        if min(self.k) < 2:
            raise ConfigError("sweep k choices must be >= 2")
        if self.scale[0] < 1:
            raise ConfigError("masksembles scale must be >= 1")
        if not (0 <= self.p[0] and self.p[1] < 1):
            raise ConfigError("dropout p range must lie in [0, 1)")

    def sample(self, rng: np.random.Generator, method: str, num_envs: int) -> dict:
        lo, hi = self.learning_rate
        ks = [k for k in self.k if num_envs % k == 0]
        if method != "none" and not ks:
            raise ConfigError(f"no k choice divides num_envs={num_envs}")
        hp = {
            "learning_rate": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            "hidden_width": int(rng.choice(self.hidden_width)),
            "k": int(rng.choice(ks)) if ks else 1,
            "scale": float(rng.uniform(*self.scale)),
            "p": float(rng.uniform(*self.p)),
            "clip_range": float(rng.uniform(*self.clip_range)),
            "ent_coef": float(rng.uniform(*self.ent_coef)),
            "gae_lambda": float(rng.uniform(*self.gae_lambda)),
            "n_epochs": int(rng.choice(self.n_epochs)),
        }
        if method == "none":
            hp["k"] = 1
        # a masksembles scale above k has no valid mask set
        hp["scale"] = min(hp["scale"], float(hp["k"]))
        return hp


@dataclass
class ParetoPoint:
    config_id: int
    reward: float
    auc: float
    dominated: bool = False
    diverged: bool = False
    hyperparameters: dict = field(default_factory=dict)


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return a.reward >= b.reward and a.auc >= b.auc and (a.reward > b.reward or a.auc > b.auc)


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points (both objectives maximised), best reward first."""
    live = [p for p in points if not p.diverged and math.isfinite(p.reward) and math.isfinite(p.auc)]
    if not live:
        return []
    r = np.array([p.reward for p in live])
    a = np.array([p.auc for p in live])
    ge = (r[:, None] >= r[None, :]) & (a[:, None] >= a[None, :])
    gt = (r[:, None] > r[None, :]) | (a[:, None] > a[None, :])
    dominated = (ge & gt).any(axis=0)
    front = [p for p, d in zip(live, dominated) if not d]
    return sorted(front, key=lambda p: (-p.reward, -p.auc, p.config_id))


def mark_dominated(points: Sequence[ParetoPoint]) -> None:
    front = {id(p) for p in pareto_front(points)}
    for p in points:
        p.dominated = id(p) not in front


@dataclass(frozen=True)
class SweepJob:
    config_id: int
    method: str
    env_id: str
    budget: int
    seed: int
    space: SweepSpace
    ppo: PpoConfig
    hidden_layers: int
    eval_episodes: int
    n_id_steps: int
    noise_level: float
    objective: str


def run_config(job: SweepJob) -> ParetoPoint:
    """Train, evaluate and score one sampled configuration; every stream derives from ``job.seed``."""
    seed = job.seed
    hp = job.space.sample(make_rng(seed, 41), job.method, job.ppo.num_envs)
    probe = make_env(job.env_id)
    budget = job.budget - job.budget % job.ppo.num_envs
    ppo = dataclasses.replace(job.ppo, learning_rate=hp["learning_rate"], clip_range=hp["clip_range"],
                              ent_coef=hp["ent_coef"], gae_lambda=hp["gae_lambda"], n_epochs=hp["n_epochs"],
                              total_timesteps=budget)
    acfg = AgentConfig(probe.obs_dim, probe.n_actions, probe.discrete, (hp["hidden_width"],) * job.hidden_layers,
                       job.method, hp["k"], hp["scale"], hp["p"], seed)
    try:
        result = train(lambda i, s: make_env(job.env_id, seed=s), acfg, ppo, seed)
    except TrainingDiverged:
        return ParetoPoint(job.config_id, float("nan"), float("nan"), diverged=True, hyperparameters=hp)
    agent = result.agent
    env = make_env(job.env_id, seed=int(make_rng(seed, 42).integers(2**31 - 1)))
    reward = float(np.mean(run_episodes(agent, env, job.eval_episodes, seed=seed)))
    id_states = collect_id_states(agent, job.env_id, job.n_id_steps, seed)
    attacked = apply_attack(id_states, AttackSpec("uniform_noise", job.noise_level), ObsStats.of(id_states),
                            make_rng(seed, 43))
    labeled = LabeledStateSet.from_parts(id_states, attacked, ood_provenance=["uniform_noise"] * len(attacked))
    aucs = {r.measure: r.auc for r in score_measures(agent, labeled, seed)}
    return ParetoPoint(job.config_id, reward, aucs[OBJECTIVES[job.objective]], hyperparameters=hp)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("OODPPO_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_jobs))


def run_sweep(method: str, env_id: str, n_configs: int = 20, budget: int = 50_000, seed: int = 0,
              space: SweepSpace | None = None, ppo: PpoConfig | None = None, hidden_layers: int = 3,
              eval_episodes: int = 10, n_id_steps: int = 2000, noise_level: float = 2.0,
              objective: str = "value", workers: int | None = None) -> list[ParetoPoint]:
    """Config ``i`` uses seed ``seed + i`` so serial and pooled runs agree exactly."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {sorted(OBJECTIVES)}")
    space = space or SweepSpace()
    ppo = ppo or PpoConfig()
    jobs = [SweepJob(i, method, env_id, budget, seed + i, space, ppo, hidden_layers, eval_episodes,
                     n_id_steps, noise_level, objective) for i in range(n_configs)]
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1:
        points = [run_config(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(run_config, jobs))
    mark_dominated(points)
    return points


SWEEP_COLUMNS = ("config_id", "method", *HYPERPARAMETERS, "reward", "auc", "diverged", "dominated")


def _row(p: ParetoPoint, method: str) -> dict:
    return {"config_id": p.config_id, "method": method, **p.hyperparameters, "reward": p.reward,
            "auc": p.auc, "diverged": int(p.diverged), "dominated": int(p.dominated)}


def write_sweep(out: Path, method: str, points: Sequence[ParetoPoint]) -> None:
    out = Path(out)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, [_row(p, method) for p in points])
    write_csv(out / "pareto.csv", SWEEP_COLUMNS, [_row(p, method) for p in pareto_front(points)])
