"""Actor-critic agent with separate policy and value networks, and its inference schemes."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .distributions import Categorical, DiagGaussian, softmax
from .layers import METHODS, ConfigError, StochasticMLP, SubmodelBundle, submodel_for_env
from .obsnorm import RunningMeanStd

SCHEMES = ("default", "vote", "aggregate", "single", "avg_then_sample")


@dataclass(frozen=True)
class AgentConfig:
    obs_dim: int
    n_actions: int
    discrete: bool
    hidden: tuple[int, ...] = (64, 64, 64)
    method: str = "none"
    k: int = 1
    scale: float = 2.0
    p: float = 0.1
    seed: int = 0
    log_std_init: float = 0.0
    freeze_log_std: bool = False
    normalize_obs: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if (self.k == 1) != (self.method == "none"):
            raise ConfigError("k == 1 exactly when method == 'none'")
        if len(self.hidden) < 2:
            raise ConfigError("need at least two hidden layers")


@dataclass
class ActionDecision:
    action: np.ndarray | int
    logprob: float
    submodel: int | str
    bundle: SubmodelBundle | None = None
    value: float | None = None


@dataclass
class Agent:
    config: AgentConfig
    policy: StochasticMLP
    value: StochasticMLP
    log_std: ag.Tensor | None
    obs_rms: RunningMeanStd | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config: AgentConfig) -> "Agent":
        c = config
        policy = StochasticMLP.build([c.obs_dim, *c.hidden, c.n_actions], c.method, c.k, c.seed,
                                     out_gain=0.01, scale=c.scale, p=c.p, name="pi.")
        value = StochasticMLP.build([c.obs_dim, *c.hidden, 1], c.method, c.k, c.seed + 7919,
                                    out_gain=1.0, scale=c.scale, p=c.p, name="vf.")
        log_std = None
        if not c.discrete:
            log_std = ag.Tensor(np.full(c.n_actions, c.log_std_init), requires_grad=True, name="log_std")
        rms = RunningMeanStd(c.obs_dim) if c.normalize_obs else None
        return cls(config, policy, value, log_std, rms)

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def discrete(self) -> bool:
        return self.config.discrete

    def parameters(self) -> list[ag.Tensor]:
        params = self.policy.parameters() + self.value.parameters()
        if self.log_std is not None:
            params.append(self.log_std)
        return params

    def trainable(self) -> list[ag.Tensor]:
        params = self.policy.parameters() + self.value.parameters()
        if self.log_std is not None and not self.config.freeze_log_std:
            params.append(self.log_std)
        return params

    def named_parameters(self) -> dict[str, ag.Tensor]:
        return {p.name: p for p in self.parameters()}

    def preprocess(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        return obs if self.obs_rms is None else self.obs_rms.normalize(obs)

    def log_std_array(self) -> np.ndarray | None:
        return None if self.log_std is None else self.log_std.data.copy()


def forward_all_submodels(agent: Agent, states: np.ndarray, rng: np.random.Generator | None = None,
                          preprocessed: bool = False) -> SubmodelBundle:
    """Policy and value outputs of every submodel for a batch of raw states."""
    if agent.config.method != "none" and agent.k < 2:
        raise ConfigError("multi-sample methods need k >= 2")
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if not preprocessed:
        x = agent.preprocess(x)
    pol = agent.policy.forward_all(x, rng)
    val = agent.value.forward_all(x, rng)[..., 0]
    return SubmodelBundle(pol, val, agent.config.method, agent.discrete, agent.log_std_array())


def _dist(bundle: SubmodelBundle, j: int, i: int = 0):
    out = bundle.policy_outputs[j, i]
    if bundle.discrete:
        return Categorical(out)
    return DiagGaussian(out, bundle.log_std)


# --------------------------------------------------------------------------- training-time acting

def act_training_batch(agent: Agent, obs: np.ndarray, sub_idx: np.ndarray, rng: np.random.Generator):
    """Sample one action per row from the row's acting submodel.

    ``obs`` must already be normalised.  Returns (actions, logprobs, values).
    """
    out = agent.policy.forward(obs, sub_idx, rng).data
    values = agent.value.forward(obs, sub_idx, rng).data[:, 0]
    if agent.discrete:
        dist = Categorical(out)
        actions = dist.sample(rng)
    else:
        dist = DiagGaussian(out, agent.log_std.data)
        actions = dist.sample(rng)
    return actions, dist.logprob(actions), values


def act_training(agent: Agent, state: np.ndarray, env_index: int, num_envs: int,
                 rng: np.random.Generator) -> ActionDecision:
    j = submodel_for_env(agent.config.method, env_index, num_envs, agent.k)
    obs = agent.preprocess(state)
    actions, logprobs, values = act_training_batch(agent, obs, np.array([j]), rng)
    action = int(actions[0]) if agent.discrete else actions[0]
    return ActionDecision(action, float(logprobs[0]), j, value=float(values[0]))


# --------------------------------------------------------------------------- inference schemes

def act_vote(bundle: SubmodelBundle, rng: np.random.Generator, state: int = 0) -> int:
    """Majority vote over submodel argmaxes; ties are broken uniformly at random."""
    if not bundle.discrete:
        raise ValueError("voting needs a discrete action space")
    votes = np.argmax(bundle.policy_outputs[:, state], axis=-1)
    counts = Counter(votes.tolist())
    top = max(counts.values())
    tied = sorted(a for a, c in counts.items() if c == top)
    if len(tied) == 1:
        return tied[0]
    return tied[int(rng.integers(len(tied)))]


def aggregate_gaussian(bundle: SubmodelBundle, state: int = 0) -> DiagGaussian:
    """Mean of submodel means; std combines the shared sigma with their spread in quadrature."""
    means = bundle.policy_outputs[:, state]
    mean = means.mean(axis=0)
    std = np.sqrt(np.exp(2.0 * bundle.log_std) + means.var(axis=0))
    return DiagGaussian(mean, np.log(std))


def act_gaussian_aggregate(bundle: SubmodelBundle, deterministic: bool, rng: np.random.Generator,
                           state: int = 0) -> np.ndarray:
    if bundle.discrete:
        raise ValueError("Gaussian aggregation needs a continuous action space")
    g = aggregate_gaussian(bundle, state)
    return g.mean.copy() if deterministic else g.sample(rng)


def act_single(bundle: SubmodelBundle, index: int | None, rng: np.random.Generator,
               deterministic: bool = False, state: int = 0):
    """Act with one submodel; ``index=None`` picks one uniformly at random."""
    if index is None:
        index = int(rng.integers(bundle.k))
    if not 0 <= index < bundle.k:
        raise IndexError(f"submodel {index} outside [0, {bundle.k})")
    dist = _dist(bundle, index, state)
    if bundle.discrete:
        return int(dist.mode()) if deterministic else int(dist.sample(rng))
    return dist.mean.copy() if deterministic else dist.sample(rng)


def act_avg_then_sample(bundle: SubmodelBundle, rng: np.random.Generator, deterministic: bool = False,
                        state: int = 0) -> int:
    p = softmax(bundle.policy_outputs[:, state]).mean(axis=0)
    if deterministic:
        return int(np.argmax(p))
    return int(Categorical(np.log(p)).sample(rng))


def default_scheme(discrete: bool) -> str:
    return "vote" if discrete else "aggregate"


def act(agent: Agent, state: np.ndarray, rng: np.random.Generator, scheme: str = "default",
        deterministic: bool = True, submodel: int | None = None) -> ActionDecision:
    """Evaluation-time action for one raw state."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "default":
        scheme = default_scheme(agent.discrete)
    bundle = forward_all_submodels(agent, state, rng)
    if scheme == "vote":
        if not agent.discrete:
            raise ValueError("voting needs a discrete action space")
        action = act_vote(bundle, rng)
        votes = np.argmax(bundle.policy_outputs[:, 0], axis=-1)
        share = float(np.mean(votes == action))
        return ActionDecision(action, float(np.log(share)), "aggregate", bundle)
    if scheme == "aggregate":
        if agent.discrete:
            raise ValueError("Gaussian aggregation needs a continuous action space")
        g = aggregate_gaussian(bundle)
        action = g.mean.copy() if deterministic else g.sample(rng)
        return ActionDecision(action, float(g.logprob(action)), "aggregate", bundle)
    if scheme == "avg_then_sample":
        if not agent.discrete:
            raise ValueError("distribution averaging needs a discrete action space")
        action = act_avg_then_sample(bundle, rng, deterministic)
        p = softmax(bundle.policy_outputs[:, 0]).mean(axis=0)
        return ActionDecision(action, float(np.log(p[action])), "aggregate", bundle)
    index = int(rng.integers(bundle.k)) if submodel is None else submodel
    action = act_single(bundle, index, rng, deterministic)
    return ActionDecision(action, float(_dist(bundle, index).logprob(action)), index, bundle)


def combine_members(members: Sequence[Agent], seed: int = 0) -> Agent:
    """Stack independently trained single-network agents into one ensemble agent."""
    first = members[0].config
    cfg = AgentConfig(first.obs_dim, first.n_actions, first.discrete, first.hidden, "ensembles",
                      len(members), first.scale, first.p, seed, first.log_std_init,
                      first.freeze_log_std, False)
    policy = StochasticMLP(list(members[0].policy.sizes), "ensembles", len(members),
                           [m.policy.members[0] for m in members])
    value = StochasticMLP(list(members[0].value.sizes), "ensembles", len(members),
                          [m.value.members[0] for m in members])
    log_std = None
    if not first.discrete:
        log_std = ag.Tensor(np.mean([m.log_std.data for m in members], axis=0), requires_grad=True, name="log_std")
    agent = Agent(cfg, policy, value, log_std, None)
    _rename(agent)
    return agent


def _rename(agent: Agent) -> None:
    for net, prefix in ((agent.policy, "pi."), (agent.value, "vf.")):
        for i, member in enumerate(net.members):
            for li, (W, b) in enumerate(member):
                W.name = f"{prefix}m{i}.l{li}.W"
                b.name = f"{prefix}m{i}.l{li}.b"
