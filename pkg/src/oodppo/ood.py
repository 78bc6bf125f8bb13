"""OOD detection benchmark: ID vs perturbed-environment states scored by ROC-AUC."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import Agent, act, forward_all_submodels
from .envs import EnvParams, PerturbationConfig, make_env, perturb
from .rng import make_rng
from .tables import write_csv
from .uncertainty import report

ATTACK_KINDS = ("none", "zero_obs", "max_obs", "uniform_noise", "static_mask")
TIMELINE_MEASURES = ("value_std", "policy_std", "policy_js")


class DegenerateLabels(ValueError):
    pass


@dataclass
class LabeledStateSet:
    """States with labels (0 = ID, 1 = OOD) and a provenance tag per state."""

    states: np.ndarray
    labels: np.ndarray
    provenance: list[str]

    @classmethod
    def from_parts(cls, id_states: np.ndarray, ood_states: np.ndarray, id_tag: str = "id",
                   ood_provenance: list[str] | None = None) -> "LabeledStateSet":
        ood_provenance = ood_provenance or ["ood"] * len(ood_states)
        states = np.concatenate([np.atleast_2d(id_states), np.atleast_2d(ood_states)])
        labels = np.r_[np.zeros(len(id_states), dtype=np.int64), np.ones(len(ood_states), dtype=np.int64)]
        return cls(states, labels, [id_tag] * len(id_states) + list(ood_provenance))

    def check(self) -> None:
        if not (self.labels == 0).any() or not (self.labels == 1).any():
            raise DegenerateLabels("both ID and OOD states are required")


@dataclass
class RocResult:
    measure: str
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_id: int = 0
    n_ood: int = 0

    @property
    def flipped(self) -> bool:
        """True when the score ranks ID above OOD, i.e. the labels read better inverted."""
        return self.auc < 0.5


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    level: float = 0.0
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "uniform_noise" and self.level < 0:
            raise ValueError("noise level must be >= 0")


@dataclass
class ObsStats:
    mean: np.ndarray
    std: np.ndarray
    high: np.ndarray

    @classmethod
    def of(cls, states: np.ndarray) -> "ObsStats":
        states = np.atleast_2d(states)
        return cls(states.mean(axis=0), states.std(axis=0), states.max(axis=0))


# --------------------------------------------------------------------------- ROC

def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sweep every unique score as a threshold (predict OOD when score >= t).

    Returns (thresholds, fpr, tpr), starting at (0, 0) with threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = int((labels == 1).sum()), int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise DegenerateLabels("ROC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y == 1)[ends]
    fp = np.cumsum(y == 0)[ends]
    thresholds = np.r_[np.inf, s[ends]]
    return thresholds, np.r_[0.0, fp / neg], np.r_[0.0, tp / pos]


def auc_threshold_sweep(scores, labels) -> float:
    _, fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def auc_mann_whitney(scores, labels) -> float:
    """P(OOD score > ID score) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    ood, idd = scores[labels == 1], np.sort(scores[labels == 0])
    if len(ood) == 0 or len(idd) == 0:
        raise DegenerateLabels("AUC needs both classes")
    below = np.searchsorted(idd, ood, side="left")
    equal = np.searchsorted(idd, ood, side="right") - below
    return float((below.sum() + 0.5 * equal.sum()) / (len(ood) * len(idd)))


def roc(measure: str, scores, labels) -> RocResult:
    thresholds, fpr, tpr = roc_curve(scores, labels)
    labels = np.asarray(labels)
    return RocResult(measure, thresholds, fpr, tpr, auc_mann_whitney(scores, labels),
                     int((labels == 0).sum()), int((labels == 1).sum()))


# --------------------------------------------------------------------------- state collection

def _rollout(agent: Agent, env, n_steps: int, rng: np.random.Generator, burn_in: int = 0,
             scheme: str = "default") -> np.ndarray:
    states = []
    obs = env.reset()
    for _ in range(n_steps):
        if env.t >= burn_in:
            states.append(obs)
        decision = act(agent, obs, rng, scheme, deterministic=True)
        obs, _, done = env.step(decision.action)
        if done:
            obs = env.reset()
    return np.array(states).reshape(len(states), env.obs_dim)


def collect_id_states(agent: Agent, env_id: str, n_steps: int = 2000, seed: int = 0,
                      params: EnvParams | None = None, scheme: str = "default") -> np.ndarray:
    """Observations visited by the agent's deployed policy in the unperturbed env."""
    env = make_env(env_id, params, seed=int(make_rng(seed, 31).integers(2**31 - 1)))
    return _rollout(agent, env, n_steps, make_rng(seed, 32), scheme=scheme)


def collect_ood_states(agent: Agent, env_id: str, perturbation: PerturbationConfig | None,
                       n_configs: int = 50, steps_per_config: int = 100, burn_in: int = 10, seed: int = 0,
                       base: EnvParams | None = None, scheme: str = "default") -> tuple[np.ndarray, list[str], list[EnvParams]]:
    """Roll the agent in ``n_configs`` perturbed envs, dropping each episode's first ``burn_in`` states.

    ``perturbation=None`` keeps the base physics (the null control).
    """
    base = base or EnvParams()
    cfg_rng = make_rng(seed, 33)
    act_rng = make_rng(seed, 34)
    env_seeds = make_rng(seed, 35).integers(0, 2**31 - 1, size=max(n_configs, 1))
    chunks, provenance, configs = [], [], []
    for c in range(n_configs):
        params = base if perturbation is None else perturb(base, perturbation, cfg_rng)
        configs.append(params)
        env = make_env(env_id, params, seed=int(env_seeds[c]))
        states = _rollout(agent, env, steps_per_config, act_rng, burn_in, scheme)
        chunks.append(states)
        provenance.extend([f"config{c}"] * len(states))
    obs_dim = make_env(env_id).obs_dim
    states = np.concatenate(chunks) if chunks else np.zeros((0, obs_dim))
    return states, provenance, configs


def apply_attack(states: np.ndarray, spec: AttackSpec, stats: ObsStats | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    states = np.array(states, dtype=np.float64)
    if spec.kind == "none":
        return states
    if spec.kind == "zero_obs":
        return np.zeros_like(states)
    if stats is None and spec.kind in ("max_obs", "uniform_noise"):
        raise ValueError(f"attack {spec.kind!r} needs observation statistics")
    if spec.kind == "max_obs":
        return np.broadcast_to(stats.high, states.shape).copy()
    if spec.kind == "uniform_noise":
        if spec.level == 0:
            return states
        width = spec.level * stats.std
        return states + rng.uniform(-1.0, 1.0, states.shape) * width
    out = states.copy()
    out[:, list(spec.dims)] = 0.0
    return out


# --------------------------------------------------------------------------- scoring

def score_states(agent: Agent, states: np.ndarray, rng: np.random.Generator | None = None,
                 cat_std_on_probs: bool = False) -> dict[str, np.ndarray]:
    bundle = forward_all_submodels(agent, states, rng)
    return report(bundle, cat_std_on_probs).measures()


def score_measures(agent: Agent, labeled: LabeledStateSet, seed: int = 0,
                   cat_std_on_probs: bool = False) -> list[RocResult]:
    labeled.check()
    scores = score_states(agent, labeled.states, make_rng(seed, 36), cat_std_on_probs)
    return [roc(name, s, labeled.labels) for name, s in scores.items()]


def breakdown(agent: Agent, labeled: LabeledStateSet, measure: str = "value_std", seed: int = 0) -> list[dict]:
    """Per-provenance AUC of one measure: every OOD group against all ID states."""
    labeled.check()
    scores = score_states(agent, labeled.states, make_rng(seed, 36))[measure]
    prov = np.array(labeled.provenance)
    id_mask = labeled.labels == 0
    rows = []
    for tag in dict.fromkeys(p for p, y in zip(labeled.provenance, labeled.labels) if y == 1):
        mask = prov == tag
        sel = id_mask | mask
        rows.append({"provenance": tag, "measure": measure, "n_ood": int(mask.sum()),
                     "auc": auc_mann_whitney(scores[sel], labeled.labels[sel])})
    return rows


def uncertainty_timeline(agent: Agent, states: np.ndarray, boundary: int, seed: int = 0) -> list[dict]:
    """Per-step uncertainty over ordered states; rows before ``boundary`` are ID."""
    states = np.atleast_2d(states)
    if len(states) == 0:
        return []
    scores = score_states(agent, states, make_rng(seed, 37))
    return [{"step": i, "label": int(i >= boundary), "boundary": boundary,
             **{m: float(scores[m][i]) for m in TIMELINE_MEASURES}} for i in range(len(states))]


@dataclass
class BenchParams:
    n_id_steps: int = 2000
    n_ood_configs: int = 50
    steps_per_config: int = 100
    burn_in: int = 10
    perturbation: PerturbationConfig | None = field(default_factory=PerturbationConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    cat_std_on_probs: bool = False


@dataclass
class BenchResult:
    labeled: LabeledStateSet
    rocs: list[RocResult]
    timeline: list[dict]
    breakdown: list[dict]

    def auc(self, measure: str) -> float:
        return next(r.auc for r in self.rocs if r.measure == measure)


def run_benchmark(agent: Agent, env_id: str, bench: BenchParams, seed: int = 0) -> BenchResult:
    """Full protocol: ID states, perturbed-env states (optionally attacked), scored per measure."""
    id_states = collect_id_states(agent, env_id, bench.n_id_steps, seed)
    ood_states, prov, _ = collect_ood_states(agent, env_id, bench.perturbation, bench.n_ood_configs,
                                             bench.steps_per_config, bench.burn_in, seed)
    if bench.attack.kind != "none":
        stats = ObsStats.of(id_states)
        ood_states = apply_attack(ood_states, bench.attack, stats, make_rng(seed, 38))
        prov = [f"{p}+{bench.attack.kind}" for p in prov]
    labeled = LabeledStateSet.from_parts(id_states, ood_states, ood_provenance=prov)
    rocs = score_measures(agent, labeled, seed, bench.cat_std_on_probs)
    timeline = uncertainty_timeline(agent, labeled.states, len(id_states), seed)
    return BenchResult(labeled, rocs, timeline, breakdown(agent, labeled, seed=seed))


# --------------------------------------------------------------------------- output

def write_benchmark(out: Path, result: BenchResult) -> None:
    out = Path(out)
    for r in result.rocs:
        write_csv(out / f"roc_{r.measure}.csv", ("threshold", "fpr", "tpr"),
                  zip(r.thresholds.tolist(), r.fpr.tolist(), r.tpr.tolist()))
    write_csv(out / "summary.csv", ("measure", "auc", "n_id", "n_ood", "flipped_flag"),
              [(r.measure, r.auc, r.n_id, r.n_ood, int(r.flipped)) for r in result.rocs])
    write_csv(out / "timeline.csv", ("step", "label", "boundary", *TIMELINE_MEASURES), result.timeline)
    write_csv(out / "breakdown.csv", ("provenance", "measure", "n_ood", "auc"), result.breakdown)
