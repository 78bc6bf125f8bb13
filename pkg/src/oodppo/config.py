"""Run configuration: one YAML document, strictly validated before any work starts."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agent import AgentConfig
from .envs import REGISTRY, PerturbationConfig, make_env
from .layers import ConfigError
from .ood import AttackSpec, BenchParams
from .ppo import PpoConfig
from .sweep import SweepSpace


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AgentSection(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64, 64, 64])
    method: Literal["none", "masksembles", "dropout", "dropconnect", "ensembles"] = "none"
    k: int = Field(1, ge=1)
    scale: float = Field(2.0, ge=1.0)
    p: float = Field(0.1, ge=0.0, lt=1.0)
    log_std_init: float = 0.0
    freeze_log_std: bool = False
    normalize_obs: bool = False


class PpoSection(_Strict):
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    gae_lambda: float = Field(0.95, ge=0.0, le=1.0)
    clip_range: float = Field(0.2, gt=0.0)
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    learning_rate: float = Field(3e-4, gt=0.0)
    lr_schedule: Literal["constant", "linear"] = "constant"
    n_epochs: int = Field(10, ge=1)
    batch_size: int = Field(64, ge=1)
    n_steps: int = Field(256, ge=1)
    num_envs: int = Field(8, ge=1)
    max_grad_norm: float = Field(0.5, gt=0.0)
    total_timesteps: int = Field(100_000, ge=0)
    normalize_advantage: bool = True
    value_all_submodels: bool = True


class EvalSection(_Strict):
    episodes: int = Field(10, ge=1)
    seeds: int = Field(3, ge=1)
    scheme: Literal["default", "vote", "aggregate", "avg_then_sample"] = "default"
    deterministic: bool = True


class AttackSection(_Strict):
    kind: Literal["none", "zero_obs", "max_obs", "uniform_noise", "static_mask"] = "none"
    level: float = Field(0.0, ge=0.0)
    dims: list[int] = Field(default_factory=list)


class PerturbationSection(_Strict):
    gravity: tuple[float, float] = (0.5, 4.0)
    wind: tuple[float, float] = (0.0, 1.0)
    friction: tuple[float, float] = (0.1, 50.0)
    body_scale: tuple[float, float] = (1.5, 2.5)
    targets: list[Literal["gravity", "wind", "friction", "body_scale", "layout"]] = Field(
        default_factory=lambda: ["gravity", "wind", "friction", "body_scale"])
    include_prob: float = Field(0.5, ge=0.0, le=1.0)
    min_one: bool = False


class BenchSection(_Strict):
    n_id_steps: int = Field(2000, ge=0)
    n_ood_configs: int = Field(50, ge=0)
    steps_per_config: int = Field(100, ge=0)
    burn_in: int = Field(10, ge=0)
    null_control: bool = False
    perturbation: PerturbationSection = Field(default_factory=PerturbationSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    cat_std_on_probs: bool = False


class SpaceSection(_Strict):
    learning_rate: tuple[float, float] = (1e-4, 3e-3)
    hidden_width: list[int] = Field(default_factory=lambda: [32, 64])
    k: list[int] = Field(default_factory=lambda: [2, 4])
    scale: tuple[float, float] = (1.0, 4.0)
    p: tuple[float, float] = (0.05, 0.3)
    clip_range: tuple[float, float] = (0.1, 0.3)
    ent_coef: tuple[float, float] = (0.0, 0.01)
    gae_lambda: tuple[float, float] = (0.9, 1.0)
    n_epochs: list[int] = Field(default_factory=lambda: [4, 10])


class SweepSection(_Strict):
    n_configs: int = Field(20, ge=1)
    budget: int = Field(50_000, ge=0)
    objective: Literal["value", "policy"] = "value"
    eval_episodes: int = Field(10, ge=1)
    n_id_steps: int = Field(2000, ge=1)
    noise_level: float = Field(2.0, ge=0.0)
    space: SpaceSection = Field(default_factory=SpaceSection)


class RunConfig(_Strict):
    env: str = "pointmass"
    seed: int = 0
    mode: Literal["shared_buffer", "independent"] = "shared_buffer"
    checkpoint: Optional[str] = None
    agent: AgentSection = Field(default_factory=AgentSection)
    ppo: PpoSection = Field(default_factory=PpoSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    sweep: SweepSection = Field(default_factory=SweepSection)

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        if self.env not in REGISTRY:
            raise ValueError(f"env: unknown env {self.env!r}; known: {sorted(REGISTRY)}")
        a, p = self.agent, self.ppo
        if (a.k == 1) != (a.method == "none"):
            raise ValueError("agent.k: k must be 1 exactly when agent.method is 'none'")
        if len(a.hidden) < 2 or min(a.hidden) < 1:
            raise ValueError("agent.hidden: need at least two positive layer widths")
        if a.method == "masksembles" and a.scale > a.k:
            raise ValueError("agent.scale: masksembles scale must not exceed k")
        if p.num_envs % a.k:
            raise ValueError(f"ppo.num_envs: {p.num_envs} is not divisible by agent.k={a.k}")
        step = p.num_envs * (a.k if self.mode == "independent" else 1)
        if p.total_timesteps % step:
            raise ValueError(f"ppo.total_timesteps: must be a multiple of {step}")
        if self.mode == "independent":
            if a.method != "ensembles":
                raise ValueError("mode: independent training needs agent.method 'ensembles'")
            if a.normalize_obs:
                raise ValueError("agent.normalize_obs: not supported in independent mode")
        if self.eval.scheme in ("vote", "avg_then_sample"):
            if not REGISTRY[self.env].discrete:
                raise ValueError(f"eval.scheme: {self.eval.scheme!r} needs a discrete action space")
        if self.eval.scheme == "aggregate" and REGISTRY[self.env].discrete:
            raise ValueError("eval.scheme: 'aggregate' needs a continuous action space")
        obs_dim = REGISTRY[self.env].obs_dim
        if any(not 0 <= d < obs_dim for d in self.bench.attack.dims):
            raise ValueError(f"bench.attack.dims: indices must lie in [0, {obs_dim})")
        for name in ("gravity", "wind", "friction", "body_scale"):
            lo, hi = getattr(self.bench.perturbation, name)
            if lo > hi:
                raise ValueError(f"bench.perturbation.{name}: empty range")
        if self.bench.perturbation.gravity[0] <= 0 or self.bench.perturbation.friction[0] <= 0:
            raise ValueError("bench.perturbation: gravity and friction must stay positive")
        s = self.sweep.space
        if min(s.k) < 2:
            raise ValueError("sweep.space.k: choices must be >= 2")
        if self.agent.method != "none" and not any(p.num_envs % k == 0 for k in s.k):
            raise ValueError("sweep.space.k: no choice divides ppo.num_envs")
        return self

    # ---------------------------------------------------------------- conversions

    def agent_config(self) -> AgentConfig:
        env = make_env(self.env)
        a = self.agent
        return AgentConfig(env.obs_dim, env.n_actions, env.discrete, tuple(a.hidden), a.method, a.k, a.scale,
                           a.p, self.seed, a.log_std_init, a.freeze_log_std, a.normalize_obs)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**self.ppo.model_dump())

    def bench_params(self) -> BenchParams:
        b = self.bench
        pert = None
        if not b.null_control:
            pc = b.perturbation
            pert = PerturbationConfig(pc.gravity, pc.wind, pc.friction, pc.body_scale, tuple(pc.targets),
                                      pc.include_prob, pc.min_one)
        attack = AttackSpec(b.attack.kind, b.attack.level, tuple(b.attack.dims))
        return BenchParams(b.n_id_steps, b.n_ood_configs, b.steps_per_config, b.burn_in, pert, attack,
                           b.cat_std_on_probs)

    def sweep_space(self) -> SweepSpace:
        s = self.sweep.space
        return SweepSpace(tuple(s.learning_rate), tuple(s.hidden_width), tuple(s.k), tuple(s.scale), tuple(s.p),
                          tuple(s.clip_range), tuple(s.ent_coef), tuple(s.gae_lambda), tuple(s.n_epochs))

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _field_message(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(lines)


def parse_config(data: dict | None, seed: int | None = None) -> RunConfig:
    data = dict(data or {})
    if seed is not None:
        data["seed"] = seed
    try:
        cfg = RunConfig.model_validate(data)
        # the runtime constructors enforce the same contracts; surface anything they add
        cfg.agent_config()
        cfg.ppo_config()
        cfg.bench_params()
        cfg.sweep_space()
    except ValidationError as exc:
        raise ConfigError(_field_message(exc)) from None
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    """Read a YAML (or JSON, which is valid YAML) run configuration."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, seed)

