"""Vectorised rollouts into a shared buffer, GAE, and the clipped PPO update."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .agent import Agent, AgentConfig, act_training_batch, combine_members
from .distributions import categorical_logprob_entropy_t, gaussian_logprob_entropy_t
from .envs import Env, vec_reset, vec_step
from .layers import ConfigError, submodel_for_env
from .optim import AdamState, adam_step, clip_global_norm
from .rng import get_state, make_rng

CURVE_COLUMNS = ("iteration", "timesteps", "mean_episode_reward", "mean_episode_len",
                 "loss", "policy_loss", "value_loss", "entropy")
MODES = ("shared_buffer", "independent")
ADV_EPS = 1e-8


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, curve: list[dict]):
        super().__init__(message)
        self.curve = curve


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    learning_rate: float = 3e-4
    lr_schedule: str = "constant"
    n_epochs: int = 10
    batch_size: int = 64
    n_steps: int = 256
    num_envs: int = 8
    max_grad_norm: float = 0.5
    total_timesteps: int = 100_000
    normalize_advantage: bool = True
    # regress every submodel's value head on every transition, not just its own envs'
    value_all_submodels: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.clip_range <= 0:
            raise ConfigError("clip_range must be positive")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError("lr_schedule must be 'constant' or 'linear'")
        for name in ("n_epochs", "batch_size", "n_steps", "num_envs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.total_timesteps < 0:
            raise ConfigError("total_timesteps must be >= 0")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be positive")


# --------------------------------------------------------------------------- buffer

@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray | int
    reward: float
    done: bool
    value: float
    logprob: float
    submodel: int
    env_index: int


@dataclass
class RolloutBuffer:
    """Transitions laid out [env][step]."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    logprobs: np.ndarray
    sub_idx: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def empty(cls, num_envs: int, n_steps: int, obs_dim: int, action_shape: tuple[int, ...]) -> "RolloutBuffer":
        shape = (num_envs, n_steps)
        return cls(np.zeros(shape + (obs_dim,)), np.zeros(shape + action_shape), np.zeros(shape),
                   np.zeros(shape, dtype=bool), np.zeros(shape), np.zeros(shape),
                   np.zeros(shape, dtype=np.int64))

    @property
    def num_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_steps(self) -> int:
        return self.rewards.shape[1]

    def __len__(self) -> int:
        return self.rewards.size

    def transition(self, env: int, step: int) -> Transition:
        action = self.actions[env, step]
        return Transition(self.obs[env, step], action, float(self.rewards[env, step]), bool(self.dones[env, step]),
                          float(self.values[env, step]), float(self.logprobs[env, step]),
                          int(self.sub_idx[env, step]), env)

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise ContractError("advantages must be computed before optimisation")
        n = len(self)
        return {
            "obs": self.obs.reshape(n, -1),
            "actions": self.actions.reshape((n,) + self.actions.shape[2:]),
            "logprobs": self.logprobs.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
            "sub_idx": self.sub_idx.reshape(n),
        }


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates for arrays shaped (..., T).

    ``last_values`` is V(s_T) for the state after the final step; it is only
    used where that step is not terminal.
    """
    if last_values is None:
        raise ContractError("bootstrap values for the final states are required")
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    last_values = np.broadcast_to(np.asarray(last_values, dtype=np.float64), rewards.shape[:-1])
    T = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in reversed(range(T)):
        nxt = last_values if t == T - 1 else values[..., t + 1]
        live = 1.0 - dones[..., t]
        delta = rewards[..., t] + gamma * nxt * live - values[..., t]
        running = delta + gamma * lam * live * running
        adv[..., t] = running
    return adv, adv + values


# --------------------------------------------------------------------------- loss

def ppo_loss(agent: Agent, batch: dict[str, np.ndarray], config: PpoConfig,
             rng: np.random.Generator | None = None) -> tuple[ag.Tensor, dict[str, float]]:
    """Clipped surrogate + value MSE - entropy bonus, each row under its stored submodel."""
    obs, sub_idx = batch["obs"], batch["sub_idx"]
    adv = np.asarray(batch["advantages"], dtype=np.float64)
    if config.normalize_advantage and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + ADV_EPS)
    out = agent.policy.forward(obs, sub_idx, rng)
    if agent.discrete:
        logp, ent = categorical_logprob_entropy_t(out, batch["actions"].astype(np.int64))
    else:
        logp, ent = gaussian_logprob_entropy_t(out, agent.log_std, batch["actions"])
    ratio = ag.exp(ag.sub(logp, batch["logprobs"]))
    surr1 = ag.mul(ratio, adv)
    surr2 = ag.mul(ag.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range), adv)
    policy_loss = ag.mul(ag.mean(ag.minimum(surr1, surr2)), -1.0)
    returns = batch["returns"]
    if config.value_all_submodels and agent.k > 1:
        n = obs.shape[0]
        v_obs, v_sub = np.tile(obs, (agent.k, 1)), np.repeat(np.arange(agent.k), n)
        returns = np.tile(returns, agent.k)
    else:
        v_obs, v_sub = obs, sub_idx
    v = ag.reshape(agent.value.forward(v_obs, v_sub, rng), (v_obs.shape[0],))
    value_loss = ag.mean(ag.square(ag.sub(v, returns)))
    entropy = ag.mean(ent)
    loss = ag.sub(ag.add(policy_loss, ag.mul(value_loss, config.vf_coef)), ag.mul(entropy, config.ent_coef))
    r = ratio.data
    diag = {
        "loss": float(loss.data),
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > config.clip_range)),
    }
    return loss, diag


# --------------------------------------------------------------------------- training

EnvFactory = Callable[[int, int], Env]  # (env_index, seed) -> env


@dataclass
class TrainResult:
    agent: Agent
    curve: list[dict]
    env_steps: list[int]
    epochs: list[int]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    rng_states: dict[str, dict] = field(default_factory=dict)


class Trainer:
    """One PPO learner over a set of vectorised envs, with every random stream derived from ``seed``."""

    def __init__(self, make_env: EnvFactory, agent: Agent, config: PpoConfig, seed: int):
        k = agent.k
        if config.num_envs % k:
            raise ConfigError(f"num_envs={config.num_envs} is not divisible by k={k}")
        if config.total_timesteps % config.num_envs:
            raise ConfigError("total_timesteps must be a multiple of num_envs")
        self.agent, self.config, self.seed = agent, config, seed
        env_seeds = make_rng(seed, 14).integers(0, 2**31 - 1, size=config.num_envs)
        self.envs = [make_env(i, int(s)) for i, s in enumerate(env_seeds)]
        self.act_rng = make_rng(seed, 11)
        self.batch_rng = make_rng(seed, 12)
        self.loss_rng = make_rng(seed, 13)
        self.params = agent.trainable()
        self.adam = AdamState.zeros_like([p.data for p in self.params])
        self.sub_idx = np.array([submodel_for_env(agent.config.method, i, config.num_envs, k)
                                 for i in range(config.num_envs)])
        self.steps = 0
        self.iteration = 0
        self.obs = None

    def _observe(self, raw: np.ndarray, update: bool) -> np.ndarray:
        rms = self.agent.obs_rms
        if rms is None:
            return raw
        if update:
            rms.update(raw)
        return rms.normalize(raw)

    def collect(self, n_steps: int) -> tuple[RolloutBuffer, list]:
        agent, E = self.agent, self.config.num_envs
        if self.obs is None:
            self.obs = self._observe(vec_reset(self.envs), update=True)
        action_shape = () if agent.discrete else (agent.config.n_actions,)
        buf = RolloutBuffer.empty(E, n_steps, agent.config.obs_dim, action_shape)
        finished = []
        for t in range(n_steps):
            actions, logprobs, values = act_training_batch(agent, self.obs, self.sub_idx, self.act_rng)
            raw, rewards, dones, done_eps = vec_step(self.envs, actions)
            buf.obs[:, t] = self.obs
            buf.actions[:, t] = actions
            buf.rewards[:, t] = rewards
            buf.dones[:, t] = dones
            buf.values[:, t] = values
            buf.logprobs[:, t] = logprobs
            buf.sub_idx[:, t] = self.sub_idx
            finished.extend(done_eps)
            self.obs = self._observe(raw, update=True)
        last = agent.value.forward(self.obs, self.sub_idx, self.act_rng).data[:, 0]
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, last,
                                                  self.config.gamma, self.config.gae_lambda)
        self.steps += E * n_steps
        return buf, finished

    def optimize(self, buf: RolloutBuffer, lr: float) -> dict[str, float]:
        cfg = self.config
        data = buf.flat()
        n = len(buf)
        sums: dict[str, float] = {}
        count = 0
        for _ in range(cfg.n_epochs):
            order = self.batch_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = {key: val[idx] for key, val in data.items()}
                with ag.GradTape() as tape:
                    loss, diag = ppo_loss(self.agent, batch, cfg, self.loss_rng)
                grads = ag.backward(tape, loss, self.params)
                grads = clip_global_norm(grads, cfg.max_grad_norm)
                new = adam_step([p.data for p in self.params], grads, self.adam, lr)
                for p, value in zip(self.params, new):
                    p.data = value
                for key, val in diag.items():
                    sums[key] = sums.get(key, 0.0) + val
                count += 1
        return {key: val / count for key, val in sums.items()}

    def run(self, on_row: Callable[[dict], None] | None = None, timestep_offset: int = 0,
            iteration_offset: int = 0) -> list[dict]:
        cfg = self.config
        curve: list[dict] = []
        while self.steps < cfg.total_timesteps:
            n_steps = min(cfg.n_steps, (cfg.total_timesteps - self.steps) // cfg.num_envs)
            frac = self.steps / cfg.total_timesteps
            lr = cfg.learning_rate * (1.0 - frac) if cfg.lr_schedule == "linear" else cfg.learning_rate
            try:
                buf, finished = self.collect(n_steps)
                stats = self.optimize(buf, lr)
            except ag.NonFiniteError as exc:
                raise TrainingDiverged(f"training diverged at iteration {self.iteration}: {exc}", curve) from exc
            self.iteration += 1
            row = {
                "iteration": iteration_offset + self.iteration,
                "timesteps": timestep_offset + self.steps,
                "mean_episode_reward": float(np.mean([e.ret for e in finished])) if finished else float("nan"),
                "mean_episode_len": float(np.mean([e.length for e in finished])) if finished else float("nan"),
                **{key: stats[key] for key in CURVE_COLUMNS[4:]},
            }
            curve.append(row)
            if on_row is not None:
                on_row(row)
        return curve

    def rng_states(self, prefix: str = "") -> dict[str, dict]:
        return {f"{prefix}{name}": get_state(getattr(self, f"{name}_rng")) for name in ("act", "batch", "loss")}

    def optimizer_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}adam.step": np.array([float(self.adam.step)])}
        for p, m, v in zip(self.params, self.adam.m, self.adam.v):
            out[f"{prefix}adam.m.{p.name}"] = m
            out[f"{prefix}adam.v.{p.name}"] = v
        return out


def train(make_env: EnvFactory, agent_config: AgentConfig, config: PpoConfig, seed: int,
          mode: str = "shared_buffer", on_row: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch.

    ``shared_buffer``: one learner; each env acts with its partitioned submodel
    and every submodel's loss sees the whole mixed buffer.

    ``independent``: k single-network learners with seeds ``seed + i``, each on
    ``total_timesteps / k`` env steps and ``k`` times the epochs, stacked into
    one ensemble afterwards.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    if mode == "shared_buffer":
        agent = Agent.build(agent_config)
        trainer = Trainer(make_env, agent, config, seed)
        curve = trainer.run(on_row)
        return TrainResult(agent, curve, [trainer.steps], [config.n_epochs * trainer.iteration],
                           trainer.optimizer_arrays(), trainer.rng_states())
    k = agent_config.k
    if agent_config.method != "ensembles":
        raise ConfigError("independent training builds an ensemble; set method to 'ensembles'")
    if agent_config.normalize_obs:
        raise ConfigError("observation normalisation is not supported in independent mode")
    if config.total_timesteps % (k * config.num_envs):
        raise ConfigError("total_timesteps must be a multiple of k * num_envs in independent mode")
    member_cfg = dataclasses.replace(config, total_timesteps=config.total_timesteps // k,
                                     n_epochs=config.n_epochs * k)
    members, curve, steps, epochs, optim, rngs = [], [], [], [], {}, {}
    for i in range(k):
        acfg = dataclasses.replace(agent_config, method="none", k=1, seed=agent_config.seed + i)
        agent = Agent.build(acfg)
        trainer = Trainer(make_env, agent, member_cfg, seed + i)
        try:
            curve.extend(trainer.run(on_row, timestep_offset=sum(steps), iteration_offset=len(curve)))
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), curve + exc.curve) from exc
        members.append(agent)
        steps.append(trainer.steps)
        epochs.append(member_cfg.n_epochs * trainer.iteration)
        optim.update(trainer.optimizer_arrays(prefix=f"member{i}."))
        rngs.update(trainer.rng_states(prefix=f"member{i}."))
    return TrainResult(combine_members(members, agent_config.seed), curve, steps, epochs, optim, rngs)
