"""Small episodic environments with perturbable physics.

``pointmass``  continuous 2-D puck on a plane, reward -distance to the goal.
``gridchase``  discrete 4-move grid navigation; the wall layout is the "level".
``bandit2``    one-step two-armed bandit, arm 1 pays 1.

Gravity acts along z, perpendicular to the puck's plane, so it enters the
planar dynamics only through the normal force that scales the friction drag.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import make_rng


@dataclass(frozen=True)
class EnvParams:
    gravity: float = 1.0
    wind: float = 0.0
    friction: float = 1.0
    body_scale: tuple[float, ...] = (1.0, 1.0)
    layout: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.gravity <= 0 or self.friction <= 0 or any(s <= 0 for s in self.body_scale):
            raise ValueError(f"physics factors must be positive: {self}")
        if self.wind < 0:
            raise ValueError("wind must be non-negative")

    def is_default(self) -> bool:
        return self.physics() == EnvParams().physics()

    def physics(self) -> tuple:
        return (self.gravity, self.wind, self.friction, tuple(self.body_scale), self.layout)


class Env:
    env_id = ""
    obs_dim = 0
    discrete = True
    n_actions = 0  # discrete: number of actions, continuous: action dimension
    horizon = 1

    def __init__(self, params: EnvParams | None = None, seed: int = 0):
        self.params = params or EnvParams(seed=seed)
        self.rng = make_rng(seed)
        self.t = 0
        self.episode_return = 0.0

    def reset(self) -> np.ndarray:
        self.t = 0
        self.episode_return = 0.0
        return self._reset()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        obs, reward, done = self._step(action)
        self.t += 1
        self.episode_return += reward
        if self.t >= self.horizon:
            done = True
        return obs, float(reward), done

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


class PointMass(Env):
    env_id = "pointmass"
    obs_dim = 4
    discrete = False
    n_actions = 2
    horizon = 200
    dt = 0.05
    max_force = 1.0
    wind_dir = np.array([1.0, 0.0])
    start = np.array([-1.0, -1.0])
    goal = np.zeros(2)
    start_noise = 0.1

    def _reset(self) -> np.ndarray:
        self.pos = self.start + self.rng.uniform(-self.start_noise, self.start_noise, 2)
        self.vel = np.zeros(2)
        return self.obs()

    def obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def set_state(self, pos, vel) -> None:
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.vel = np.asarray(vel, dtype=np.float64).copy()

    def _step(self, action):
        a = np.asarray(action, dtype=np.float64).reshape(self.n_actions)
        if not np.isfinite(a).all():
            raise ValueError(f"non-finite action {a}")
        p = self.params
        force = np.clip(a, -self.max_force, self.max_force) * np.asarray(p.body_scale) + p.wind * self.wind_dir
        # implicit drag: stable for any friction * gravity * dt
        self.vel = (self.vel + force * self.dt) / (1.0 + p.friction * p.gravity * self.dt)
        self.pos = self.pos + self.vel * self.dt
        reward = -float(np.linalg.norm(self.pos - self.goal))
        return self.obs(), reward, False

    def pd_action(self, kp: float = 4.0, kd: float = 2.0) -> np.ndarray:
        """Scripted proportional-derivative controller toward the goal."""
        return np.clip(kp * (self.goal - self.pos) - kd * self.vel, -self.max_force, self.max_force)


LAYOUTS = (
    (
        "#######",
        "#.....#",
        "#.##..#",
        "#..#..#",
        "#..#T.#",
        "#.....#",
        "#######",
    ),
    (
        "#######",
        "#..#..#",
        "#..#..#",
        "#.T#..#",
        "#..##.#",
        "#.....#",
        "#######",
    ),
    (
        "#######",
        "#.....#",
        "####..#",
        "#T....#",
        "#.#####",
        "#.....#",
        "#######",
    ),
)
MOVES = np.array([[-1, 0], [0, 1], [1, 0], [0, -1]])  # N, E, S, W as (row, col)


class GridChase(Env):
    env_id = "gridchase"
    obs_dim = 8
    discrete = True
    n_actions = 4
    horizon = 50
    step_cost = 0.01

    def __init__(self, params: EnvParams | None = None, seed: int = 0):
        super().__init__(params, seed)
        rows = LAYOUTS[self.params.layout % len(LAYOUTS)]
        self.walls = np.array([[c == "#" for c in r] for r in rows])
        self.target = np.argwhere(np.array([[c == "T" for c in r] for r in rows]))[0]
        self.size = self.walls.shape[0]
        self.free = [tuple(c) for c in np.argwhere(~self.walls) if tuple(c) != tuple(self.target)]

    def _reset(self) -> np.ndarray:
        self.agent = np.array(self.free[self.rng.integers(len(self.free))])
        return self.obs()

    def set_agent(self, cell) -> None:
        self.agent = np.asarray(cell)

    def obs(self) -> np.ndarray:
        blocked = [float(self.walls[tuple(self.agent + m)]) for m in MOVES]
        scale = self.size - 1
        return np.array([*(self.agent / scale), *(self.target / scale), *blocked])

    def _step(self, action):
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action}")
        nxt = self.agent + MOVES[action]
        if not self.walls[tuple(nxt)]:
            self.agent = nxt
        if np.array_equal(self.agent, self.target):
            return self.obs(), 1.0, True
        return self.obs(), -self.step_cost, False


class TwoArmBandit(Env):
    env_id = "bandit2"
    obs_dim = 1
    discrete = True
    n_actions = 2
    horizon = 1

    def _reset(self) -> np.ndarray:
        return np.ones(1)

    def _step(self, action):
        action = int(action)
        if action not in (0, 1):
            raise ValueError(f"invalid action {action}")
        return np.ones(1), float(action), True


REGISTRY: dict[str, type[Env]] = {cls.env_id: cls for cls in (PointMass, GridChase, TwoArmBandit)}


def make_env(env_id: str, params: EnvParams | None = None, seed: int = 0) -> Env:
    try:
        cls = REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown env {env_id!r}; known: {sorted(REGISTRY)}") from None
    return cls(params, seed)


# --------------------------------------------------------------------------- perturbations

PHYSICS_TARGETS = ("gravity", "wind", "friction", "body_scale")


@dataclass(frozen=True)
class PerturbationConfig:
    """Ranges of the physics interventions and which of them may be applied.

    Each enabled physics factor is included on an independent fair coin flip and
    sampled uniformly from its range, so all tails leaves the physics untouched.
    ``min_one`` instead includes one uniformly picked enabled factor when every
    flip fails.  ``layout`` (GridChase) always swaps to
    one of the alternate levels when enabled.
    """

    gravity: tuple[float, float] = (0.5, 4.0)
    wind: tuple[float, float] = (0.0, 1.0)
    friction: tuple[float, float] = (0.1, 50.0)
    body_scale: tuple[float, float] = (1.5, 2.5)
    targets: tuple[str, ...] = PHYSICS_TARGETS
    include_prob: float = 0.5
    min_one: bool = False
    n_layouts: int = len(LAYOUTS)

    def __post_init__(self):
        for name in PHYSICS_TARGETS:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: {(lo, hi)}")
        unknown = set(self.targets) - set(PHYSICS_TARGETS) - {"layout"}
        if unknown:
            raise ValueError(f"unknown perturbation targets {sorted(unknown)}")


def perturb(base: EnvParams, config: PerturbationConfig, rng: np.random.Generator) -> EnvParams:
    changes = {}
    enabled = [name for name in PHYSICS_TARGETS if name in config.targets]
    values = {}
    for name in PHYSICS_TARGETS:
        # draw coin and value for every factor so streams do not depend on targets
        coin = rng.random() < config.include_prob
        lo, hi = getattr(config, name)
        if name == "body_scale":
            value = tuple(float(v) for v in rng.uniform(lo, hi, len(base.body_scale)))
        else:
            value = float(rng.uniform(lo, hi))
        values[name] = value
        if coin and name in config.targets:
            changes[name] = value
    fallback = int(rng.integers(max(len(enabled), 1)))
    if config.min_one and enabled and not changes:
        changes[enabled[fallback]] = values[enabled[fallback]]
    layout_draw = int(rng.integers(1, max(config.n_layouts, 2)))
    if "layout" in config.targets:
        changes["layout"] = (base.layout + layout_draw) % config.n_layouts
    return replace(base, **changes)


# --------------------------------------------------------------------------- vectorised

@dataclass
class EpisodeRecord:
    env_index: int
    ret: float
    length: int


def vec_reset(envs: list[Env]) -> np.ndarray:
    return np.stack([env.reset() for env in envs])


def vec_step(envs: list[Env], actions) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[EpisodeRecord]]:
    """Step every env; finished episodes are recorded and the env auto-resets."""
    if len(actions) != len(envs):
        raise ValueError(f"{len(actions)} actions for {len(envs)} envs")
    obs, rewards, dones, finished = [], [], [], []
    for i, (env, action) in enumerate(zip(envs, actions)):
        o, r, d = env.step(action)
        if d:
            finished.append(EpisodeRecord(i, env.episode_return, env.t))
            o = env.reset()
        obs.append(o)
        rewards.append(r)
        dones.append(d)
    return np.stack(obs), np.array(rewards), np.array(dones), finished
