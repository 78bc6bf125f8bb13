"""Running observation normalisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class RunningMeanStd:
    """Streaming mean / variance (parallel-merge update).

    Statistics only move through :meth:`update`; evaluation code calls
    :meth:`normalize` alone, which keeps them frozen.
    """

    dim: int
    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)
    count: float = 0.0

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.var is None:
            self.var = np.zeros(self.dim)

    def update(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        n = batch.shape[0]
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta * delta * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.mean) / np.maximum(self.std, STD_FLOOR)


def normalize_obs(stats: RunningMeanStd, obs: np.ndarray, update: bool = False) -> np.ndarray:
    if update:
        stats.update(obs)
    return stats.normalize(obs)
