"""Multi-sample layers: Masksembles, MC Dropout, MC Dropconnect and Ensembles.

Every method is exposed through :class:`StochasticMLP`, which routes each input
row to one submodel.  Stochastic layers sit after hidden layers 1 and 2.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .nn import Layer, init_mlp
from .rng import make_rng

METHODS = ("none", "masksembles", "dropout", "dropconnect", "ensembles")
STOCHASTIC_POSITIONS = (0, 1)  # after hidden layer 1 and 2


class ConfigError(ValueError):
    """Invalid combination of layer / training settings."""


# --------------------------------------------------------------------------- masks

def mask_ones(width: int, k: int, scale: float) -> int:
    """Ones per mask: round(C / s), half rounded up.

    s = 1 gives full masks (all submodels identical); s = k with C divisible
    by k gives C/k ones per mask, i.e. disjoint masks.
    """
    return int(math.floor(width / scale + 0.5))


@dataclass(frozen=True)
class MaskSet:
    k: int
    width: int
    scale: float
    seed: int
    masks: np.ndarray  # (k, width) of 0.0 / 1.0

    @property
    def ones(self) -> int:
        return int(self.masks[0].sum())

    def overlaps(self) -> list[int]:
        return [int(self.masks[i] @ self.masks[j]) for i, j in itertools.combinations(range(self.k), 2)]

    @property
    def rescale(self) -> float:
        return self.width / self.ones


def _gale_ryser(rows: Sequence[int], cols: Sequence[int]) -> bool:
    if sum(rows) != sum(cols):
        return False
    rows = sorted(rows, reverse=True)
    acc = 0
    for q, r in enumerate(rows, start=1):
        acc += r
        if acc > sum(min(c, q) for c in cols):
            return False
    return True


def _greedy_masks(k: int, width: int, m: int) -> np.ndarray:
    total = k * m
    base, extra = divmod(total, width)
    coverage = [base + 1] * extra + [base] * (width - extra)
    masks = np.zeros((k, width))
    need = [m] * k
    overlap = np.zeros((k, k), dtype=np.int64)
    iu = np.triu_indices(k, 1)
    for t in range(width):
        left = width - t
        forced = [i for i in range(k) if need[i] == left]
        free = [i for i in range(k) if 0 < need[i] < left]
        best = None
        for extra_set in itertools.combinations(free, coverage[t] - len(forced)):
            chosen = tuple(sorted(forced + list(extra_set)))
            rest = [need[i] - (i in chosen) for i in range(k)]
            if not _gale_ryser(rest, coverage[t + 1:]):
                continue
            ov = overlap.copy()
            for i, j in itertools.combinations(chosen, 2):
                ov[i, j] += 1
            vals = ov[iu]
            key = (int(vals.max()), int((vals * vals).sum()), -sum(need[i] for i in chosen), chosen)
            if best is None or key < best:
                best = key
        chosen = best[-1]
        for i in chosen:
            masks[i, t] = 1.0
            need[i] -= 1
        for i, j in itertools.combinations(chosen, 2):
            overlap[i, j] += 1
    return masks


def _spread(masks: np.ndarray) -> int:
    ov = masks @ masks.T
    vals = ov[np.triu_indices(len(masks), 1)]
    return int(vals.max() - vals.min())


def _repair(masks: np.ndarray, rng: np.random.Generator, max_iter: int = 200_000) -> np.ndarray:
    """Swap units between two masks until pairwise overlaps differ by at most one.

    A move gives channel b to mask i and channel a to mask j (i had a, j had b),
    keeping every ones-count and channel coverage fixed; it is accepted when the
    sum of squared overlaps does not grow, or by a slowly cooling random chance.
    """
    k, width = masks.shape
    masks = masks.copy()
    ov = masks @ masks.T
    for it in range(max_iter):
        if it % 64 == 0 and _spread(masks) <= 1:
            return masks
        i, j = rng.choice(k, 2, replace=False)
        only_i = np.flatnonzero((masks[i] > 0) & (masks[j] == 0))
        only_j = np.flatnonzero((masks[j] > 0) & (masks[i] == 0))
        if len(only_i) == 0 or len(only_j) == 0:
            continue
        a = only_i[rng.integers(len(only_i))]
        b = only_j[rng.integers(len(only_j))]
        others = [x for x in range(k) if x != i and x != j]
        d_i = masks[others, b] - masks[others, a]
        d_j = -d_i
        old = ov[i, others] ** 2 + ov[j, others] ** 2
        new = (ov[i, others] + d_i) ** 2 + (ov[j, others] + d_j) ** 2
        delta = float((new - old).sum())
        temp = max(0.02, 1.0 - it / 20_000)
        if delta <= 0 or rng.random() < math.exp(-delta / temp):
            masks[i, a], masks[i, b] = 0.0, 1.0
            masks[j, b], masks[j, a] = 0.0, 1.0
            ov[i, others] += d_i
            ov[others, i] += d_i
            ov[j, others] += d_j
            ov[others, j] += d_j
    if _spread(masks) > 1:
        raise ConfigError(f"could not balance mask overlaps for k={k}, width={width}")
    return masks


def generate_masks(k: int, width: int, scale: float, seed: int) -> MaskSet:
    """Fixed binary masks with equal ones-count and near-equal pairwise overlap.

    Channels are filled greedily, each one joining the feasible group of masks
    that keeps the largest pairwise overlap smallest (then the most unfilled
    masks, then lowest indices).  If the greedy overlaps still spread by more
    than one, a seeded swap search rebalances them.
    The channel order is then shuffled with ``seed``.
    """
    if k < 2:
        raise ConfigError("Masksembles needs k >= 2")
    if not 1 <= scale <= k:
        raise ConfigError(f"scale must lie in [1, k={k}], got {scale}")
    if width < k:
        raise ConfigError(f"width {width} < k={k}: cannot place one unit per mask")
    m = mask_ones(width, k, scale)
    if m < 1:
        raise ConfigError(f"width {width} too small for k={k}, scale={scale}")
    masks = _greedy_masks(k, width, m)
    if _spread(masks) > 1:
        masks = _repair(masks, make_rng(seed, 1))
    perm = make_rng(seed).permutation(width)
    return MaskSet(k=k, width=width, scale=float(scale), seed=seed, masks=masks[:, perm].copy())


# --------------------------------------------------------------------------- dropout

@dataclass(frozen=True)
class DropoutSpec:
    p: float
    mode: str = "dropout"  # "dropout" (unit drop) or "dropconnect" (weight drop)

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"drop probability must lie in [0, 1), got {self.p}")
        if self.mode not in ("dropout", "dropconnect"):
            raise ConfigError(f"unknown dropout mode {self.mode!r}")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Inverted-dropout keep mask: kept entries are 1/(1-p), dropped 0."""
        if self.p == 0.0:
            return np.ones(shape)
        return (rng.random(shape) >= self.p) / (1.0 - self.p)


def dropout_layer(x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator) -> np.ndarray:
    return x * spec.sample(rng, np.shape(x))


# --------------------------------------------------------------------------- routing

def submodel_for_env(method: str, env_index: int, num_envs: int, k: int) -> int:
    if k == 1 or method == "none":
        return 0
    if num_envs % k:
        raise ConfigError(f"num_envs={num_envs} is not divisible by k={k}")
    if not 0 <= env_index < num_envs:
        raise IndexError(f"env index {env_index} outside [0, {num_envs})")
    return env_index // (num_envs // k)


@dataclass
class SubmodelBundle:
    """k per-submodel policy outputs and value outputs for a batch of states.

    ``policy_outputs`` has shape (k, n, N): logits for discrete spaces, means
    for continuous ones.  ``value_outputs`` has shape (k, n).
    """

    policy_outputs: np.ndarray
    value_outputs: np.ndarray
    method: str
    discrete: bool
    log_std: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.policy_outputs.shape[0]

    @property
    def n_states(self) -> int:
        return self.policy_outputs.shape[1]

    def state(self, i: int) -> "SubmodelBundle":
        return SubmodelBundle(self.policy_outputs[:, i:i + 1], self.value_outputs[:, i:i + 1],
                              self.method, self.discrete, self.log_std)


# --------------------------------------------------------------------------- network

@dataclass
class StochasticMLP:
    """MLP whose hidden layers 1 and 2 are followed by the method's stochastic layer."""

    sizes: list[int]
    method: str
    k: int
    members: list[list[Layer]]
    masks: list[MaskSet] = field(default_factory=list)
    dropout: DropoutSpec | None = None

    @classmethod
    def build(cls, sizes: Sequence[int], method: str, k: int, seed: int, out_gain: float,
              scale: float = 2.0, p: float = 0.1, name: str = "") -> "StochasticMLP":
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        if method == "none" and k != 1:
            raise ConfigError("method 'none' requires k == 1")
        if method != "none" and k < 2:
            raise ConfigError(f"method {method!r} requires k >= 2")
        sizes = list(sizes)
        if len(sizes) < 4:
            raise ConfigError("stochastic layers need at least two hidden layers")
        n_members = k if method == "ensembles" else 1
        members = [init_mlp(make_rng(seed + i), sizes, out_gain, prefix=f"{name}m{i}.") for i in range(n_members)]
        masks = []
        if method == "masksembles":
            masks = [generate_masks(k, sizes[pos + 1], scale, seed + 1000 + pos) for pos in STOCHASTIC_POSITIONS]
        dropout = None
        if method in ("dropout", "dropconnect"):
            dropout = DropoutSpec(p, mode=method)
        return cls(sizes, method, k, members, masks, dropout)

    def parameters(self) -> list[ag.Tensor]:
        return [t for member in self.members for layer in member for t in layer]

    def forward(self, x, sub_idx: np.ndarray, rng: np.random.Generator | None = None) -> ag.Tensor:
        """One output row per input row, row i computed by submodel ``sub_idx[i]``."""
        x = ag.as_tensor(x)
        sub_idx = np.asarray(sub_idx, dtype=np.int64)
        if self.method in ("ensembles", "dropconnect"):
            return self._grouped(x, sub_idx, rng)
        row_masks = None
        if self.method == "masksembles":
            row_masks = [ms.masks[sub_idx] * ms.rescale for ms in self.masks]
        elif self.method == "dropout":
            row_masks = [self.dropout.sample(rng, (x.shape[0], self.sizes[pos + 1])) for pos in STOCHASTIC_POSITIONS]
        return self._run(self.members[0], x, row_masks, None)

    def _grouped(self, x: ag.Tensor, sub_idx: np.ndarray, rng) -> ag.Tensor:
        groups = [np.flatnonzero(sub_idx == j) for j in range(self.k)]
        parts, order = [], []
        for j, rows in enumerate(groups):
            if self.method == "ensembles":
                weights, wmasks = self.members[j], None
            else:
                weights = self.members[0]
                # fresh weight masks per submodel slot, drawn for every slot so
                # the stream advances identically whatever the routing
                wmasks = [self.dropout.sample(rng, weights[pos + 1][0].shape) for pos in STOCHASTIC_POSITIONS]
            if len(rows) == 0:
                continue
            parts.append(self._run(weights, ag.take_rows(x, rows), None, wmasks))
            order.append(rows)
        out = parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)
        perm = np.concatenate(order)
        if np.array_equal(perm, np.arange(len(perm))):
            return out
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return ag.take_rows(out, inverse)

    @staticmethod
    def _run(layers: list[Layer], x: ag.Tensor, row_masks, weight_masks) -> ag.Tensor:
        h = x
        for i, (W, b) in enumerate(layers):
            if weight_masks is not None and i - 1 in STOCHASTIC_POSITIONS:
                W = ag.mul(W, weight_masks[i - 1])
            h = ag.add(ag.matmul(h, W), b)
            if i < len(layers) - 1:
                h = ag.tanh(h)
                if row_masks is not None and i in STOCHASTIC_POSITIONS:
                    h = ag.mul(h, row_masks[i])
        return h

    def forward_all(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Outputs of all k submodels for every row: shape (k, n, out)."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        tiled = np.tile(x, (self.k, 1))
        sub_idx = np.repeat(np.arange(self.k), n)
        return self.forward(tiled, sub_idx, rng).data.reshape(self.k, n, -1)
