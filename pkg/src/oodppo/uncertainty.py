"""Disagreement-based uncertainty measures over k submodel outputs.

All functions take the submodel axis first: ``(k, ...)``.  Trailing batch axes
are allowed, so a whole state batch of shape ``(k, n, N)`` is scored in one call.
Standard deviations are population (divide by k).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .distributions import softmax

KL_FLOOR = 1e-12


class ContractError(ValueError):
    pass


def _need_k(x: np.ndarray, k_min: int = 2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] < k_min:
        raise ContractError(f"need at least {k_min} submodels, got shape {x.shape}")
    return x


def value_uncertainty(values) -> np.ndarray:
    """Std of the k value estimates; ``values`` is (k,) or (k, n)."""
    return _need_k(values).std(axis=0)


def policy_uncertainty_std_continuous(means) -> np.ndarray:
    """Mean over action dimensions of the per-dimension std of submodel means."""
    return _need_k(means).std(axis=0).mean(axis=-1)


def policy_uncertainty_std_categorical(logits, on_probs: bool = False) -> np.ndarray:
    """Mean over actions of the per-action std of submodel logits.

    ``on_probs`` scores softmax probabilities instead of logits.
    """
    x = _need_k(logits)
    if on_probs:
        x = softmax(x)
    return x.std(axis=0).mean(axis=-1)


def mean_policy(logits) -> np.ndarray:
    return softmax(_need_k(logits, 1)).mean(axis=0)


def max_prob_uncertainty(logits) -> np.ndarray:
    """1 - max_a of the submodel-averaged action distribution."""
    return 1.0 - mean_policy(logits).max(axis=-1)


def entropy_uncertainty(logits) -> np.ndarray:
    p = mean_policy(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def symmetric_kl_categorical(p, q) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), KL_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), KL_FLOOR)
    lp, lq = np.log(p), np.log(q)
    return 0.5 * ((p * (lp - lq)).sum(axis=-1) + (q * (lq - lp)).sum(axis=-1))


def policy_uncertainty_js_categorical(logits) -> np.ndarray:
    """Largest pairwise symmetrised KL between the k action distributions."""
    probs = softmax(_need_k(logits))
    best = np.zeros(probs.shape[1:-1])
    for i, j in itertools.combinations(range(probs.shape[0]), 2):
        best = np.maximum(best, symmetric_kl_categorical(probs[i], probs[j]))
    return best


def policy_uncertainty_js_continuous(means, sigma) -> np.ndarray:
    """Largest pairwise divergence between Gaussians sharing a covariance.

    With a scalar ``sigma`` this is ``max sigma * ||mu_i - mu_j||^2``.  When
    ``sigma`` differs across dimensions the full symmetric KL of two Gaussians
    with covariance diag(sigma^2) is used instead: ``0.5 * sum(d^2 / sigma^2)``.
    """
    mu = _need_k(means)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim > 0 and sigma.size > 1 and not np.all(sigma == sigma.flat[0]):
        var = sigma * sigma
        score = lambda d: 0.5 * (d * d / var).sum(axis=-1)  # noqa: E731
    else:
        s = float(sigma.flat[0]) if sigma.ndim else float(sigma)
        score = lambda d: s * (d * d).sum(axis=-1)  # noqa: E731
    best = np.zeros(mu.shape[1:-1])
    for i, j in itertools.combinations(range(mu.shape[0]), 2):
        best = np.maximum(best, score(mu[i] - mu[j]))
    return best


@dataclass
class UncertaintyReport:
    """Per-state uncertainty scores; categorical-only fields are None for continuous actions."""

    value_u: np.ndarray
    policy_u_std: np.ndarray
    policy_u_js: np.ndarray
    max_prob_u: np.ndarray | None = None
    entropy_u: np.ndarray | None = None

    def measures(self) -> dict[str, np.ndarray]:
        out = {"value_std": self.value_u, "policy_std": self.policy_u_std, "policy_js": self.policy_u_js}
        if self.max_prob_u is not None:
            out["max_prob"] = self.max_prob_u
            out["entropy"] = self.entropy_u
        return out


def report(bundle, cat_std_on_probs: bool = False) -> UncertaintyReport:
    """All applicable measures for a :class:`~oodppo.layers.SubmodelBundle`."""
    if bundle.k < 2:
        zeros = np.zeros(bundle.n_states)
        if bundle.discrete:
            return UncertaintyReport(zeros, zeros, zeros,
                                     max_prob_uncertainty(bundle.policy_outputs),
                                     entropy_uncertainty(bundle.policy_outputs))
        return UncertaintyReport(zeros, zeros, zeros)
    values = bundle.value_outputs
    pol = bundle.policy_outputs
    if bundle.discrete:
        return UncertaintyReport(
            value_uncertainty(values),
            policy_uncertainty_std_categorical(pol, on_probs=cat_std_on_probs),
            policy_uncertainty_js_categorical(pol),
            max_prob_uncertainty(pol),
            entropy_uncertainty(pol),
        )
    return UncertaintyReport(
        value_uncertainty(values),
        policy_uncertainty_std_continuous(pol),
        policy_uncertainty_js_continuous(pol, np.exp(bundle.log_std)),
    )
