import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oodppo.agent import Agent, AgentConfig
from oodppo.envs import make_env
from oodppo.obsnorm import RunningMeanStd, normalize_obs
from oodppo import ppo as ppo_module
from oodppo.ppo import ContractError, PpoConfig, RolloutBuffer, Trainer, compute_gae, ppo_loss, train
from oodppo.rng import make_rng

from . import oracles


def bandit_factory(i, s):
    return make_env("bandit2", seed=s)


def pointmass_factory(i, s):
    return make_env("pointmass", seed=s)


# --------------------------------------------------------------------------- GAE

def test_gae_examples():
    adv, ret = compute_gae(np.zeros(5), np.zeros(5), np.zeros(5, bool), 0.0, 0.99, 0.95)
    assert (adv == 0).all() and (ret == 0).all()
    adv, ret = compute_gae([1.0], [0.0], [True], 0.0, 0.9, 0.95)
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]
    with pytest.raises(ContractError):
        compute_gae([1.0], [0.0], [False], None, 0.9, 0.95)


def test_gae_sixteen_steps_matches_double_sum():
    rng = np.random.default_rng(16)
    r, v = rng.normal(size=16), rng.normal(size=16)
    d = rng.random(16) < 0.2
    adv, ret = compute_gae(r, v, d, 0.7, 0.97, 0.9)
    oa, orr = oracles.gae_brute_force(r.tolist(), v.tolist(), d.tolist(), 0.7, 0.97, 0.9)
    assert np.max(np.abs(adv - oa)) <= 1e-10
    assert np.max(np.abs(ret - orr)) <= 1e-10


def test_gae_batched_over_envs():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(3, 10)), rng.normal(size=(3, 10))
    d = rng.random((3, 10)) < 0.3
    last = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, last, 0.99, 0.95)
    for e in range(3):
        assert np.allclose(adv[e], compute_gae(r[e], v[e], d[e], last[e], 0.99, 0.95)[0], atol=1e-14)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_gae_reward_to_go_at_unit_discount(rewards):
    r = np.array(rewards)
    adv, _ = compute_gae(r, np.zeros_like(r), np.zeros(len(r), bool), 0.0, 1.0, 1.0)
    assert np.allclose(adv, np.cumsum(r[::-1])[::-1], atol=1e-9)


# --------------------------------------------------------------------------- loss

def _batch(agent, n=6, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, agent.config.obs_dim))
    sub = np.arange(n) % agent.k
    logits = agent.policy.forward(obs, sub).data
    actions = rng.integers(0, agent.config.n_actions, size=n)
    logp = logits[np.arange(n), actions] - np.log(np.exp(logits).sum(axis=1))
    return {"obs": obs, "actions": actions, "logprobs": logp, "advantages": rng.normal(size=n),
            "returns": rng.normal(size=n), "sub_idx": sub}


def test_ratio_one_gives_negative_mean_advantage():
    agent = Agent.build(AgentConfig(3, 4, True, hidden=(8, 8), method="masksembles", k=2))
    batch = _batch(agent)
    cfg = PpoConfig(vf_coef=0.0, ent_coef=0.0, normalize_advantage=False)
    loss, diag = ppo_loss(agent, batch, cfg)
    assert diag["policy_loss"] == pytest.approx(-batch["advantages"].mean(), abs=1e-12)
    assert float(loss.data) == pytest.approx(diag["policy_loss"], abs=1e-15)
    assert diag["clip_fraction"] == 0.0


def test_ratio_two_is_clipped():
    agent = Agent.build(AgentConfig(3, 4, True, hidden=(8, 8)))
    batch = _batch(agent, n=1)
    batch["logprobs"] = batch["logprobs"] - math.log(2.0)
    batch["advantages"] = np.array([1.0])
    loss, diag = ppo_loss(agent, batch, PpoConfig(vf_coef=0.0, ent_coef=0.0, clip_range=0.2))
    assert float(loss.data) == pytest.approx(-1.2, abs=1e-12)
    assert diag["clip_fraction"] == 1.0


def test_value_loss_covers_every_submodel_when_enabled():
    agent = Agent.build(AgentConfig(3, 4, True, hidden=(8, 8), method="ensembles", k=2))
    batch = _batch(agent)
    _, shared = ppo_loss(agent, batch, PpoConfig())
    _, own = ppo_loss(agent, batch, PpoConfig(value_all_submodels=False))
    vals = agent.value.forward_all(batch["obs"])[..., 0]
    assert shared["value_loss"] == pytest.approx(np.mean((vals - batch["returns"]) ** 2), abs=1e-12)
    mine = vals[batch["sub_idx"], np.arange(len(batch["sub_idx"]))]
    assert own["value_loss"] == pytest.approx(np.mean((mine - batch["returns"]) ** 2), abs=1e-12)


def test_buffer_requires_advantages():
    buf = RolloutBuffer.empty(2, 3, 4, ())
    with pytest.raises(ContractError):
        buf.flat()
    assert len(buf) == 6


# --------------------------------------------------------------------------- obs normalisation

def test_first_observation_normalises_to_zero():
    stats = RunningMeanStd(3)
    out = normalize_obs(stats, np.array([[4.0, -1.0, 2.0]]), update=True)
    assert np.array_equal(out, np.zeros((1, 3)))


def test_constant_stream_converges_to_zero():
    stats = RunningMeanStd(2)
    for _ in range(50):
        out = normalize_obs(stats, np.array([[3.0, 3.0]]), update=True)
    assert np.allclose(out, 0.0)


def test_gaussian_stream_normalises_to_unit_std():
    stats = RunningMeanStd(1)
    xs = np.random.default_rng(0).normal(5.0, 2.0, size=(10_000, 1))
    for chunk in np.split(xs, 100):
        stats.update(chunk)
    assert abs(normalize_obs(stats, xs).std() - 1.0) <= 0.05


def test_normalisation_without_update_leaves_stats():
    stats = RunningMeanStd(1)
    stats.update(np.array([[1.0], [3.0]]))
    before = (stats.mean.copy(), stats.var.copy(), stats.count)
    normalize_obs(stats, np.array([[10.0]]))
    assert np.array_equal(stats.mean, before[0]) and stats.count == before[2]


# --------------------------------------------------------------------------- training

def test_config_contracts():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PpoConfig(gae_lambda=1.5)
    with pytest.raises(ValueError):
        PpoConfig(clip_range=0.0)


def test_zero_budget_returns_agent_unchanged():
    acfg = AgentConfig(1, 2, True, hidden=(8, 8))
    result = train(bandit_factory, acfg, PpoConfig(total_timesteps=0, num_envs=2), seed=0)
    fresh = Agent.build(acfg)
    for name, p in result.agent.named_parameters().items():
        assert np.array_equal(p.data, fresh.named_parameters()[name].data)
    assert result.curve == []


def test_minibatches_partition_each_epoch(monkeypatch):
    acfg = AgentConfig(1, 2, True, hidden=(8, 8))
    trainer = Trainer(bandit_factory, Agent.build(acfg), PpoConfig(n_steps=8, num_envs=4, batch_size=5,
                                                                   total_timesteps=32), seed=0)
    seen = []

    def spy(agent, batch, config, rng=None):
        seen.append(batch["obs"].shape[0])
        return ppo_loss(agent, batch, config, rng)

    monkeypatch.setattr(ppo_module, "ppo_loss", spy)
    buf, _ = trainer.collect(8)
    trainer.optimize(buf, 1e-3)
    per_epoch = len(seen) // trainer.config.n_epochs
    assert sum(seen[:per_epoch]) == 32 and len(seen) % trainer.config.n_epochs == 0


def test_rollout_uses_env_partition():
    acfg = AgentConfig(4, 2, False, hidden=(8, 8), method="masksembles", k=4)
    trainer = Trainer(pointmass_factory, Agent.build(acfg), PpoConfig(n_steps=5, num_envs=8, total_timesteps=40), 0)
    buf, _ = trainer.collect(5)
    assert (buf.sub_idx == (np.arange(8) // 2)[:, None]).all()
    assert np.isfinite(buf.logprobs).all()
    assert buf.advantages is not None


def test_rollout_indivisible_partition_rejected():
    acfg = AgentConfig(4, 2, False, hidden=(8, 8), method="masksembles", k=4)
    with pytest.raises(ValueError):
        Trainer(pointmass_factory, Agent.build(acfg), PpoConfig(num_envs=6, total_timesteps=60), 0)


def test_training_is_deterministic():
    acfg = AgentConfig(1, 2, True, hidden=(8, 8), method="dropout", k=2)
    cfg = PpoConfig(total_timesteps=256, n_steps=32, num_envs=4, batch_size=32, n_epochs=2)
    a = train(bandit_factory, acfg, cfg, seed=3)
    b = train(bandit_factory, acfg, cfg, seed=3)
    assert a.curve == b.curve
    for name, p in a.agent.named_parameters().items():
        assert p.data.tobytes() == b.agent.named_parameters()[name].data.tobytes()


def test_budget_is_hit_exactly_with_short_final_rollout():
    acfg = AgentConfig(1, 2, True, hidden=(8, 8))
    result = train(bandit_factory, acfg, PpoConfig(total_timesteps=40, n_steps=3, num_envs=4), seed=0)
    assert result.env_steps == [40]
    assert [row["timesteps"] for row in result.curve] == [12, 24, 36, 40]


def test_independent_mode_splits_budget():
    acfg = AgentConfig(1, 2, True, hidden=(8, 8), method="ensembles", k=4)
    cfg = PpoConfig(total_timesteps=320, n_steps=10, num_envs=2, batch_size=10, n_epochs=1)
    result = train(bandit_factory, acfg, cfg, seed=0, mode="independent")
    assert result.env_steps == [80] * 4
    assert result.epochs == [4 * 4] * 4  # 4 iterations of 4 epochs each
    assert result.agent.k == 4 and result.agent.config.method == "ensembles"


def test_independent_mode_contracts():
    cfg = PpoConfig(total_timesteps=320, num_envs=2)
    with pytest.raises(ValueError):
        train(bandit_factory, AgentConfig(1, 2, True, hidden=(8, 8), method="dropout", k=4), cfg, 0, "independent")
    with pytest.raises(ValueError):
        train(bandit_factory, AgentConfig(1, 2, True, hidden=(8, 8), method="ensembles", k=4),
              PpoConfig(total_timesteps=100, num_envs=2), 0, "independent")


@pytest.mark.slow
def test_bandit_learning_trend():
    improved = 0
    for seed in range(5):
        curve = train(bandit_factory, AgentConfig(1, 2, True), PpoConfig(total_timesteps=20_000, n_steps=64,
                                                                         num_envs=8, batch_size=128), seed).curve
        r = [row["mean_episode_reward"] for row in curve]
        improved += np.mean(r[-10:]) > np.mean(r[:10])
    assert improved >= 4
