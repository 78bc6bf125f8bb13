"""Dense MLP parameters and the plain forward pass."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autograd as ag

Layer = tuple[ag.Tensor, ag.Tensor]


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], out_gain: float, prefix: str = "") -> list[Layer]:
    """Orthogonal init, gain sqrt(2) on hidden layers, ``out_gain`` on the head; zero biases."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else np.sqrt(2.0)
        W = ag.Tensor(orthogonal(rng, n_in, n_out, gain), requires_grad=True, name=f"{prefix}l{i}.W")
        b = ag.Tensor(np.zeros(n_out), requires_grad=True, name=f"{prefix}l{i}.b")
        layers.append((W, b))
    return layers


def mlp_forward(params: Sequence[Layer], x, activ: Callable = ag.tanh) -> ag.Tensor:
    """Hidden layers use ``activ``; the last layer is linear (logits)."""
    h = ag.as_tensor(x)
    if h.shape[-1] != params[0][0].shape[0]:
        raise ag.ShapeError(f"input width {h.shape[-1]} != first layer width {params[0][0].shape[0]}")
    for i, (W, b) in enumerate(params):
        h = ag.add(ag.matmul(h, W), b)
        if i < len(params) - 1:
            h = activ(h)
    return h
