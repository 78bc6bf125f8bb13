"""Episode evaluation under the inference schemes."""
from __future__ import annotations

import numpy as np

from .agent import Agent, act
from .envs import Env
from .rng import make_rng


def run_episodes(agent: Agent, env: Env, episodes: int, scheme: str = "default", seed: int = 0,
                 deterministic: bool = True) -> list[float]:
    """Returns of ``episodes`` full episodes.

    The scheme's own randomness (ties, submodel picks, sampling) uses a stream
    separate from the environment's.
    """
    rng = make_rng(seed, 21)
    returns = []
    for _ in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            decision = act(agent, obs, rng, scheme, deterministic)
            obs, _, done = env.step(decision.action)
        returns.append(env.episode_return)
    return returns
