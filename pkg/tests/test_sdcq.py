from pathlib import Path
import math
import sys

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from skyway.funcapprox import CheckpointFormatError, DenseNet, forward
from skyway.sdcq import (
    AgentConfig,
    Batch,
    InsufficientDataError,
    ReplayBuffer,
    SDCQAgent,
    bin_centers,
    boltzmann_probabilities,
    critic_loss,
    discrete_loss,
    discrete_to_continuous,
    entropy,
    greedy_policy,
    make_transition,
    sample_bins,
    temperature_update,
)


def _tiny_config(**changes) -> AgentConfig:
    values = {"observation_size": 2, "bins": 4, "hidden": (16,), "batch_size": 8, "capacity": 64, "seed": 3}
    values.update(changes)
    return AgentConfig(**values)


def test_bin_centres_are_symmetric_midpoints():
    assert np.allclose(bin_centers(4), [-0.75, -0.25, 0.25, 0.75])
    assert np.allclose(discrete_to_continuous([0, 3, 1], 4), [-0.75, 0.75, -0.25])
    with pytest.raises(ValueError, match="outside"):
        discrete_to_continuous([4], 4)


def test_boltzmann_limits():
    q = np.array([[0.0, 1.0, 3.0, 2.0]])

    assert np.allclose(boltzmann_probabilities(q, 0.0), 0.25)
    assert boltzmann_probabilities(q, 50.0)[0, 2] == pytest.approx(1.0)
    assert boltzmann_probabilities(q * 1000.0, 1.0).sum() == pytest.approx(1.0)


@pytest.mark.parametrize("kappa", [0.5, 1.0, 4.0])
def test_two_bin_boltzmann_matches_the_closed_form(kappa):
    q = np.array([0.0, math.log(3.0) / kappa])

    assert np.allclose(boltzmann_probabilities(q, kappa), [0.25, 0.75], atol=1e-12)

def test_sample_bins_follows_the_distribution():
    probabilities = np.array([0.1, 0.2, 0.3, 0.4])
    draws = 20_000
    rng = np.random.default_rng(9)

    picks = sample_bins(np.tile(probabilities, (draws, 1)), rng)
    counts = np.bincount(picks, minlength=4)
    expected = probabilities * draws

    assert float(np.sum((counts - expected) ** 2 / expected)) < 27.88


def test_entropy_of_a_uniform_factored_policy():
    uniform = np.full((3, 5), 0.2)
    point = np.zeros((3, 5))
    point[:, 1] = 1.0

    assert entropy(uniform) == pytest.approx(3 * math.log(5))
    assert entropy(point) == pytest.approx(0.0)


def test_greedy_ties_pick_the_lowest_bin():
    net = DenseNet.zeros((2, 4, 3 * 4))

    assert greedy_policy(net, np.zeros(2), 4).tolist() == [0, 0, 0]


def test_replay_buffer_wraps_and_guards_batches():
    buffer = ReplayBuffer(4, 2)
    rng = np.random.default_rng(0)

    with pytest.raises(InsufficientDataError, match="holds 0"):
        buffer.sample(1, rng)
    for i in range(6):
        buffer.append(make_transition([i, 0], [0, 0, 0], float(i), [i + 1, 0], i == 5))

    assert len(buffer) == 4
    assert buffer.inserted == 6
    batch = buffer.sample(4, rng)
    assert set(batch.rewards.tolist()) <= {2.0, 3.0, 4.0, 5.0}
    assert len(batch) == 4


def test_replay_sampling_is_uniform_after_wrapping():
    buffer = ReplayBuffer(100, 2)
    for i in range(150):
        buffer.append(make_transition([i, 0], [0, 0, 0], float(i), [i + 1, 0], False))
    rng = np.random.default_rng(21)

    picks = np.concatenate([buffer.sample_indices(1000, rng) for _ in range(100)])
    counts = np.bincount(picks, minlength=100)

    assert picks.size == 100_000
    assert counts.size == 100
    # chi-square, 99 degrees of freedom, p = 0.001
    assert float(np.sum((counts - 1000.0) ** 2 / 1000.0)) < 148.23

def test_critic_targets_stop_bootstrapping_at_episode_end():
    obs_size, bins, kappa, gamma = 2, 4, 0.5, 0.9
    zeros = DenseNet.zeros((obs_size + 3, 5, 1))
    discrete = DenseNet.zeros((obs_size, 5, 3 * bins))
    batch = Batch(
        observations=np.zeros((2, obs_size)),
        actions=np.zeros((2, 3)),
        rewards=np.array([1.0, 2.0]),
        next_observations=np.ones((2, obs_size)),
        dones=np.array([False, True]),
    )

    loss, grads, stats = critic_loss(zeros, zeros, discrete, batch, kappa, gamma, bins, next_bins=np.zeros((2, 3), int))

    bonus = kappa * 3 * math.log(bins)
    targets = np.array([1.0 + gamma * bonus, 2.0])
    assert stats["target_mean"] == pytest.approx(targets.mean())
    assert stats["q_mean"] == 0.0
    assert loss == pytest.approx(np.mean(targets**2))
    assert len(grads) == len(zeros.params)


def test_discrete_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    bins = 3
    discrete = DenseNet.create((2, 4, 3 * bins), rng)
    critic = DenseNet.create((5, 4, 1), rng)
    observations = rng.normal(size=(3, 2))
    companions = rng.integers(0, bins, size=(3, 3))

    loss, grads = discrete_loss(discrete, critic, observations, 1.0, bins, companions=companions)
    h = 1e-6
    bias = discrete.params[-1]
    for i in range(bias.size):
        saved = bias[i]
        bias[i] = saved + h
        up, _ = discrete_loss(discrete, critic, observations, 1.0, bins, companions=companions)
        bias[i] = saved - h
        down, _ = discrete_loss(discrete, critic, observations, 1.0, bins, companions=companions)
        bias[i] = saved
        assert grads[-1][i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-6)
    assert loss > 0


def test_critic_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    bins, kappa, gamma = 3, 0.7, 0.9
    critic = DenseNet.create((5, 4, 1), rng)
    target = DenseNet.create((5, 4, 1), rng)
    discrete = DenseNet.create((2, 4, 3 * bins), rng)
    batch = Batch(
        observations=rng.normal(size=(4, 2)),
        actions=rng.uniform(-1.0, 1.0, size=(4, 3)),
        rewards=rng.normal(size=4),
        next_observations=rng.normal(size=(4, 2)),
        dones=np.array([False, True, False, False]),
    )
    next_bins = rng.integers(0, bins, size=(4, 3))

    def loss() -> float:
        return critic_loss(critic, target, discrete, batch, kappa, gamma, bins, next_bins=next_bins)[0]

    _, grads, _ = critic_loss(critic, target, discrete, batch, kappa, gamma, bins, next_bins=next_bins)
    h = 1e-6
    for param, grad in zip(critic.params, grads):
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up = loss()
            param[idx] = saved - h
            down = loss()
            param[idx] = saved
            assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-3, abs=1e-7)


def test_bandit_value_converges_to_the_reward():
    agent = SDCQAgent(_tiny_config(learning_rate=1e-3, batch_size=32, capacity=64, adapt_temperature=False))
    buffer = ReplayBuffer(64, 2)
    rng = np.random.default_rng(4)
    state = np.array([1.0, 0.0])
    for _ in range(64):
        buffer.append(make_transition(state, rng.uniform(-1, 1, 3), 0.7, state, True))

    for _ in range(3000):
        agent.train_step(buffer)

    actions = rng.uniform(-1, 1, size=(20, 3))
    values = forward(agent.nets.critic, np.hstack([np.tile(state, (20, 1)), actions]))
    assert np.all(np.abs(values - 0.7) < 1e-2)

def test_temperature_moves_towards_the_entropy_target():
    low_entropy = temperature_update(0.0, mean_entropy=0.5, target_entropy=2.0, learning_rate=0.1)
    high_entropy = temperature_update(0.0, mean_entropy=3.0, target_entropy=2.0, learning_rate=0.1)

    assert low_entropy < 0.0 < high_entropy
    assert temperature_update(math.log(1e3), 10.0, 0.0, 1.0) == pytest.approx(math.log(1e3))


def test_agent_config_validation():
    with pytest.raises(ValueError, match="bins"):
        AgentConfig(bins=1)
    with pytest.raises(ValueError, match="gamma"):
        AgentConfig(gamma=1.0)
    with pytest.raises(ValueError, match="capacity"):
        AgentConfig(batch_size=10, capacity=5)


def test_agent_outputs_three_m_scores_and_bounded_actions():
    agent = SDCQAgent(_tiny_config())
    obs = np.array([0.3, -0.2])

    assert forward(agent.nets.discrete, obs).shape == (12,)
    action = agent.act_boltzmann(obs, np.random.default_rng(0))
    assert action.shape == (3,)
    assert np.all(np.abs(action) < 1.0)
    assert np.allclose(agent.snapshot().act_greedy(obs), agent.act_greedy(obs))


def test_dry_run_train_step_leaves_the_agent_untouched():
    agent = SDCQAgent(_tiny_config())
    buffer = ReplayBuffer(64, 2)
    rng = np.random.default_rng(1)
    for _ in range(16):
        buffer.append(make_transition(rng.normal(size=2), rng.uniform(-1, 1, 3), 1.0, rng.normal(size=2), False))
    before = [p.copy() for p in agent.nets.critic.params]

    stats = agent.train_step(buffer, apply=False)

    assert agent.steps == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.nets.critic.params))
    assert set(stats) == {"critic_loss", "discrete_loss", "entropy", "kappa", "q_mean", "target_mean"}


def test_published_snapshots_do_not_follow_training():
    agent = SDCQAgent(_tiny_config())
    buffer = ReplayBuffer(64, 2)
    rng = np.random.default_rng(1)
    for _ in range(16):
        buffer.append(make_transition(rng.normal(size=2), rng.uniform(-1, 1, 3), 1.0, rng.normal(size=2), False))
    old = agent.snapshot()
    frozen_weights = old.discrete.params[0].copy()

    for _ in range(5):
        agent.train_step(buffer)
    new = agent.publish()

    assert agent.steps == 5
    assert np.array_equal(old.discrete.params[0], frozen_weights)
    assert new.version == 5 and old.version == 0


def test_two_state_chain_values_converge():
    config = _tiny_config(
        gamma=0.9, learning_rate=3e-3, batch_size=32, capacity=256, polyak=0.02,
        initial_kappa=1e-3, adapt_temperature=False,
    )
    agent = SDCQAgent(config)
    buffer = ReplayBuffer(256, 2)
    rng = np.random.default_rng(0)
    first, second = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    for _ in range(64):
        buffer.append(make_transition(first, rng.uniform(-1, 1, 3), 0.0, second, False))
        buffer.append(make_transition(second, rng.uniform(-1, 1, 3), 1.0, first, True))

    for _ in range(1500):
        agent.train_step(buffer)

    bonus = 1e-3 * 3 * math.log(4)
    actions = rng.uniform(-1, 1, size=(20, 3))
    q_second = forward(agent.nets.critic, np.hstack([np.tile(second, (20, 1)), actions]))
    q_first = forward(agent.nets.critic, np.hstack([np.tile(first, (20, 1)), actions]))
    assert agent.kappa == pytest.approx(1e-3)
    assert np.allclose(q_second, 1.0, atol=0.1)
    assert np.allclose(q_first, 0.9 * (1.0 + bonus), atol=0.1)
    assert np.allclose(forward(agent.nets.discrete, second), 1.0, atol=0.2)


def test_checkpoint_restores_the_agent(tmp_path):
    agent = SDCQAgent(_tiny_config())
    agent.nets.log_kappa = math.log(0.25)
    obs = np.array([0.1, 0.7])

    path = agent.save(tmp_path / "agent.skw", {"v_max": 7.0})
    restored = SDCQAgent.load(path)

    assert restored.kappa == pytest.approx(0.25)
    assert restored.config.bins == 4
    assert restored.config.hidden == (16,)
    assert np.allclose(restored.act_greedy(obs), agent.act_greedy(obs))
    (tmp_path / "junk.skw").write_bytes(b"\x00" * 64)
    with pytest.raises(CheckpointFormatError):
        SDCQAgent.load(tmp_path / "junk.skw")
