"""Categorical and diagonal-Gaussian action distributions.

The dataclasses work on plain arrays (leading batch axes allowed); the ``*_t``
functions build the same quantities on the autograd tape for the PPO loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag

LOG_2PI = math.log(2.0 * math.pi)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass(frozen=True)
class Categorical:
    logits: np.ndarray

    @property
    def n(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def logprob(self, action) -> np.ndarray:
        action = np.asarray(action)
        if np.any(action < 0) or np.any(action >= self.n):
            raise IndexError(f"action {action} out of range for {self.n} actions")
        logp = log_softmax(self.logits)
        return np.take_along_axis(logp, action[..., None].astype(np.int64), axis=-1)[..., 0]

    def entropy(self) -> np.ndarray:
        logp = log_softmax(self.logits)
        return -(np.exp(logp) * logp).sum(axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = self.probs
        u = rng.random(p.shape[:-1] + (1,))
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
        return np.minimum(idx, self.n - 1)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)


def categorical_logprob_entropy(c: Categorical, action_index: int) -> tuple[float, float]:
    return float(c.logprob(action_index)), float(c.entropy())


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def logprob(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if a.shape[-1] != self.mean.shape[-1]:
            raise ag.ShapeError(f"action width {a.shape[-1]} != {self.mean.shape[-1]}")
        z = (a - self.mean) / self.std
        return (-0.5 * z * z - self.log_std - 0.5 * LOG_2PI).sum(axis=-1)

    def entropy(self) -> np.ndarray:
        ent = (self.log_std + 0.5 * (1.0 + LOG_2PI)).sum(axis=-1)
        return np.broadcast_to(ent, self.mean.shape[:-1]).copy()

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)


def gaussian_logprob(g: DiagGaussian, a) -> float:
    return float(g.logprob(a))


def categorical_logprob_entropy_t(logits: ag.Tensor, actions: np.ndarray) -> tuple[ag.Tensor, ag.Tensor]:
    """Per-row log-probability of ``actions`` and entropy, on the tape."""
    logp = ag.log_softmax(logits)
    ent = ag.mul(ag.sum(ag.mul(ag.exp(logp), logp), axis=-1), -1.0)
    return ag.pick(logp, actions), ent


def gaussian_logprob_entropy_t(mean: ag.Tensor, log_std: ag.Tensor, actions: np.ndarray) -> tuple[ag.Tensor, ag.Tensor]:
    inv_std = ag.exp(ag.mul(log_std, -1.0))
    z = ag.mul(ag.sub(actions, mean), inv_std)
    per_dim = ag.sub(ag.mul(ag.square(z), -0.5), log_std)
    logp = ag.sub(ag.sum(per_dim, axis=-1), 0.5 * LOG_2PI * mean.shape[-1])
    ent = ag.add(ag.sum(log_std), 0.5 * (1.0 + LOG_2PI) * mean.shape[-1])
    ent = ag.mul(ent, np.ones(mean.shape[0]))
    return logp, ent
