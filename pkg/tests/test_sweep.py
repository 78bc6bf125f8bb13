import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oodppo.layers import ConfigError
from oodppo.ppo import PpoConfig
from oodppo.rng import make_rng
from oodppo.sweep import (ParetoPoint, SweepSpace, dominates, mark_dominated, pareto_front, run_sweep, worker_count,
                          write_sweep)
from oodppo.tables import read_csv

from . import oracles


def pts(pairs):
    return [ParetoPoint(i, r, a) for i, (r, a) in enumerate(pairs)]


def test_hand_example():
    front = pareto_front(pts([(1, 0.5), (0.5, 1), (0.4, 0.4)]))
    assert [(p.reward, p.auc) for p in front] == [(1, 0.5), (0.5, 1)]


def test_identical_points_all_kept():
    assert len(pareto_front(pts([(0.3, 0.3)] * 4))) == 4


def test_single_point_is_front():
    assert len(pareto_front(pts([(0.1, 0.9)]))) == 1


def test_diverged_points_excluded():
    points = pts([(1.0, 0.5), (math.nan, math.nan)])
    points[1].diverged = True
    mark_dominated(points)
    assert [p.config_id for p in pareto_front(points)] == [0]
    assert points[1].dominated


coords = st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=40)


@given(coords)
def test_front_matches_brute_force(pairs):
    front = {p.config_id for p in pareto_front(pts(pairs))}
    assert front == oracles.pareto_brute_force(pairs)


@given(coords, st.randoms(use_true_random=False))
def test_front_invariant_to_order_and_duplication(pairs, rnd):
    key = lambda ps: sorted((p.reward, p.auc) for p in ps)  # noqa: E731
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert set(key(pareto_front(pts(pairs)))) == set(key(pareto_front(pts(shuffled + shuffled))))


@given(coords)
def test_every_dropped_point_is_dominated_by_front(pairs):
    points = pts(pairs)
    front = pareto_front(points)
    ids = {p.config_id for p in front}
    for p in points:
        if p.config_id not in ids:
            assert any(dominates(f, p) for f in front)
    rewards = [p.reward for p in front]
    assert rewards == sorted(rewards, reverse=True)


# --------------------------------------------------------------------------- space

def test_space_validation():
    with pytest.raises(ConfigError):
        SweepSpace(p=(0.1, 1.0))
    with pytest.raises(ConfigError):
        SweepSpace(p=(-0.1, 0.5))
    with pytest.raises(ConfigError):
        SweepSpace(k=(1, 2))
    with pytest.raises(ConfigError):
        SweepSpace(learning_rate=(0.0, 1e-3))


@given(st.integers(0, 10_000), st.sampled_from(["none", "masksembles", "dropout", "ensembles"]),
       st.sampled_from([4, 6, 8]))
def test_samples_satisfy_preconditions(seed, method, num_envs):
    space = SweepSpace(k=(2, 3, 4))
    hp = space.sample(make_rng(seed), method, num_envs)
    assert num_envs % hp["k"] == 0
    assert (hp["k"] == 1) == (method == "none")
    assert 1.0 <= hp["scale"] <= max(hp["k"], 1)
    assert 1e-4 <= hp["learning_rate"] <= 3e-3


def test_worker_count_env_cap(monkeypatch):
    monkeypatch.setenv("OODPPO_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.delenv("OODPPO_THREADS")
    assert worker_count(1) == 1


# --------------------------------------------------------------------------- end to end

SMALL = dict(budget=256, ppo=PpoConfig(n_steps=16, num_envs=4, batch_size=32), hidden_layers=2,
             eval_episodes=3, n_id_steps=50)


def test_sweep_rows_and_determinism(tmp_path):
    a = run_sweep("masksembles", "bandit2", n_configs=2, seed=5, workers=1, **SMALL)
    b = run_sweep("masksembles", "bandit2", n_configs=2, seed=5, workers=1, **SMALL)
    assert [(p.reward, p.auc, p.hyperparameters) for p in a] == [(p.reward, p.auc, p.hyperparameters) for p in b]
    write_sweep(tmp_path, "masksembles", a)
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 2 and rows[0]["method"] == "masksembles"
    assert len(read_csv(tmp_path / "pareto.csv")) >= 1


def test_single_config_is_non_dominated():
    (p,) = run_sweep("none", "bandit2", n_configs=1, seed=0, workers=1, **SMALL)
    assert not p.dominated and 0.0 <= p.auc <= 1.0 and np.isfinite(p.reward)


@pytest.mark.slow
def test_pooled_and_serial_sweeps_agree():
    serial = run_sweep("dropout", "bandit2", n_configs=2, seed=1, workers=1, **SMALL)
    pooled = run_sweep("dropout", "bandit2", n_configs=2, seed=1, workers=2, **SMALL)
    assert [(p.reward, p.auc) for p in serial] == [(p.reward, p.auc) for p in pooled]
