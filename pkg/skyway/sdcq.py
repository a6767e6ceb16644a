"""Soft decomposed critic Q-learning.

A discrete net scores M bins per action dimension (3M outputs). A continuous
critic Q(s, a) is trained by TD with an entropy bonus; the discrete net is
regressed onto the critic one dimension at a time. kappa is the inverse
temperature of the Boltzmann policy and also weights the entropy bonus.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .funcapprox import (
    AdamState,
    DenseNet,
    adam_step,
    backward,
    forward,
    forward_with_cache,
    load_checkpoint,
    save_checkpoint,
    soft_update,
)

LOGGER = logging.getLogger("skyway.sdcq")

ACTION_DIMS = 3
KAPPA_RANGE = (1e-3, 1e3)


class InsufficientDataError(RuntimeError):
    """Raised when the replay buffer holds fewer transitions than a batch."""


@dataclass(frozen=True)
class AgentConfig:
    observation_size: int = 66
    bins: int = 60
    gamma: float = 0.98
    learning_rate: float = 3e-4
    batch_size: int = 256
    capacity: int = 200_000
    polyak: float = 0.005
    target_entropy: float = 0.0
    hidden: tuple[int, ...] = (256, 256)
    seed: int = 0
    initial_kappa: float = 1.0
    kappa_learning_rate: float = 3e-4
    adapt_temperature: bool = True

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError("bins must be at least 2")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.batch_size < 1 or self.capacity < self.batch_size:
            raise ValueError("capacity must hold at least one batch")
        if not KAPPA_RANGE[0] <= self.initial_kappa <= KAPPA_RANGE[1]:
            raise ValueError(f"initial_kappa must lie in {KAPPA_RANGE}")


@dataclass(frozen=True, eq=False)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    done: bool


@dataclass
class Batch:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity ring of transitions shared by sampler threads."""

    def __init__(self, capacity: int, observation_size: int) -> None:
        self.capacity = int(capacity)
        self._obs = np.zeros((self.capacity, observation_size))
        self._next = np.zeros((self.capacity, observation_size))
        self._actions = np.zeros((self.capacity, ACTION_DIMS))
        self._rewards = np.zeros(self.capacity)
        self._dones = np.zeros(self.capacity, dtype=bool)
        self._cursor = 0
        self._size = 0
        self.inserted = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return self._size

    def _put(self, transition: Transition) -> None:
        slot = self._cursor
        self._obs[slot] = transition.observation
        self._actions[slot] = transition.action
        self._rewards[slot] = transition.reward
        self._next[slot] = transition.next_observation
        self._dones[slot] = transition.done
        self._cursor = (slot + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.inserted += 1

    def append(self, transition: Transition) -> None:
        with self._lock:
            self._put(transition)

    def extend(self, transitions: Sequence[Transition]) -> None:
        with self._lock:
            for transition in transitions:
                self._put(transition)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        with self._lock:
            if self._size < batch_size:
                raise InsufficientDataError(f"buffer holds {self._size} transitions, batch needs {batch_size}")
            return rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        with self._lock:
            if self._size < batch_size:
                raise InsufficientDataError(f"buffer holds {self._size} transitions, batch needs {batch_size}")
            idx = rng.integers(0, self._size, size=batch_size)
            return Batch(
                self._obs[idx].copy(), self._actions[idx].copy(), self._rewards[idx].copy(),
                self._next[idx].copy(), self._dones[idx].copy(),
            )


def bin_centers(bins: int) -> np.ndarray:
    return (2.0 * np.arange(bins) + 1.0) / bins - 1.0


def discrete_to_continuous(indices: Sequence[int] | np.ndarray, bins: int) -> np.ndarray:
    array = np.asarray(indices)
    if np.any(array < 0) or np.any(array >= bins):
        raise ValueError(f"bin indices {array.tolist()} outside [0, {bins - 1}]")
    return (2.0 * array + 1.0) / bins - 1.0


def _q_table(net: DenseNet, observations: np.ndarray, bins: int) -> np.ndarray:
    q = forward(net, observations)
    return q.reshape(q.shape[:-1] + (ACTION_DIMS, bins))


def greedy_policy(net: DenseNet, observation: np.ndarray, bins: int) -> np.ndarray:
    """Per-dimension argmax; np.argmax keeps the lowest index on ties."""
    return np.argmax(_q_table(net, observation, bins), axis=-1)


def boltzmann_probabilities(q: np.ndarray, kappa: float) -> np.ndarray:
    logits = kappa * np.asarray(q, dtype=float)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def boltzmann_policy(net: DenseNet, observation: np.ndarray, kappa: float, bins: int) -> np.ndarray:
    return boltzmann_probabilities(_q_table(net, observation, bins), kappa)


def sample_bins(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per distribution along the last axis."""
    cdf = np.cumsum(probabilities, axis=-1)
    u = rng.random(probabilities.shape[:-1] + (1,))
    choice = (u * cdf[..., -1:] > cdf).sum(axis=-1)
    return np.minimum(choice, probabilities.shape[-1] - 1)


def entropy(probabilities: np.ndarray) -> np.ndarray:
    """Joint entropy of the factored policy: sum of per-dimension entropies."""
    p = np.asarray(probabilities, dtype=float)
    terms = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return terms.sum(axis=(-1, -2))


def _critic_inputs(observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([observations, actions], axis=-1)


def discrete_loss(
    discrete: DenseNet,
    critic: DenseNet,
    observations: np.ndarray,
    kappa: float,
    bins: int,
    rng: np.random.Generator | None = None,
    companions: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean over the batch of the summed squared gaps between every bin score and the critic."""
    obs = np.atleast_2d(observations)
    count = len(obs)
    q_out, cache = forward_with_cache(discrete, obs)
    q = q_out.reshape(count, ACTION_DIMS, bins)
    if companions is None:
        companions = sample_bins(boltzmann_probabilities(q, kappa), rng or np.random.default_rng())
    base = discrete_to_continuous(companions, bins)
    centers = bin_centers(bins)
    # swept[b, d, k] = companion action of sample b with dimension d set to bin k
    swept = np.repeat(np.repeat(base[:, None, None, :], ACTION_DIMS, axis=1), bins, axis=2)
    for dim in range(ACTION_DIMS):
        swept[:, dim, :, dim] = centers
    rows = _critic_inputs(
        np.repeat(obs, ACTION_DIMS * bins, axis=0), swept.reshape(count * ACTION_DIMS * bins, ACTION_DIMS)
    )
    target = forward(critic, rows).reshape(count, ACTION_DIMS, bins)
    gap = q - target
    loss = float(np.sum(gap**2) / count)
    grads, _ = backward(discrete, obs, (2.0 * gap / count).reshape(count, ACTION_DIMS * bins), cache)
    return loss, grads


def critic_loss(
    critic: DenseNet,
    target_critic: DenseNet,
    discrete: DenseNet,
    batch: Batch,
    kappa: float,
    gamma: float,
    bins: int,
    rng: np.random.Generator | None = None,
    next_bins: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray], dict[str, float]]:
    count = len(batch)
    probabilities = boltzmann_policy(discrete, batch.next_observations, kappa, bins)
    if next_bins is None:
        next_bins = sample_bins(probabilities, rng or np.random.default_rng())
    next_actions = discrete_to_continuous(next_bins, bins)
    bonus = kappa * entropy(probabilities)
    bootstrap = forward(target_critic, _critic_inputs(batch.next_observations, next_actions))[:, 0] + bonus
    targets = batch.rewards + gamma * np.where(batch.dones, 0.0, bootstrap)
    inputs = _critic_inputs(batch.observations, batch.actions)
    q_out, cache = forward_with_cache(critic, inputs)
    error = q_out[:, 0] - targets
    loss = float(np.mean(error**2))
    grads, _ = backward(critic, inputs, (2.0 * error / count)[:, None], cache)
    return loss, grads, {"q_mean": float(q_out.mean()), "target_mean": float(targets.mean())}


def temperature_update(
    log_kappa: float, mean_entropy: float, target_entropy: float, learning_rate: float
) -> float:
    """One gradient step on log kappa for the dual loss kappa * (target - entropy)."""
    kappa = math.exp(log_kappa)
    updated = log_kappa - learning_rate * kappa * (target_entropy - mean_entropy)
    return min(max(updated, math.log(KAPPA_RANGE[0])), math.log(KAPPA_RANGE[1]))


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    """Immutable policy published to sampler threads."""

    discrete: DenseNet
    kappa: float
    bins: int
    version: int = 0

    def greedy_bins(self, observation: np.ndarray) -> np.ndarray:
        return greedy_policy(self.discrete, observation, self.bins)

    def act_greedy(self, observation: np.ndarray) -> np.ndarray:
        return discrete_to_continuous(self.greedy_bins(observation), self.bins)

    def act_boltzmann(self, observation: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        probabilities = boltzmann_policy(self.discrete, observation, self.kappa, self.bins)
        return discrete_to_continuous(sample_bins(probabilities, rng), self.bins)


@dataclass
class AgentNetworks:
    discrete: DenseNet
    critic: DenseNet
    target_critic: DenseNet
    log_kappa: float
    bins: int
    gamma: float

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)


class SDCQAgent:
    """Networks, optimizers and temperature; mutated only by the trainer thread."""

    def __init__(self, config: AgentConfig | None = None) -> None:
        self.config = config or AgentConfig()
        init_rng = np.random.default_rng([self.config.seed, 1])
        self.rng = np.random.default_rng([self.config.seed, 2])
        obs, bins = self.config.observation_size, self.config.bins
        critic = DenseNet.create((obs + ACTION_DIMS, *self.config.hidden, 1), init_rng)
        self.nets = AgentNetworks(
            discrete=DenseNet.create((obs, *self.config.hidden, ACTION_DIMS * bins), init_rng),
            critic=critic,
            target_critic=critic.copy(),
            log_kappa=math.log(self.config.initial_kappa),
            bins=bins,
            gamma=self.config.gamma,
        )
        self.discrete_opt = AdamState.for_params(self.nets.discrete.params, self.config.learning_rate)
        self.critic_opt = AdamState.for_params(self.nets.critic.params, self.config.learning_rate)
        self.steps = 0
        self._published: PolicySnapshot | None = None
        self._publish_lock = threading.Lock()
        self.publish()

    @property
    def kappa(self) -> float:
        return self.nets.kappa

    def publish(self) -> PolicySnapshot:
        snapshot = PolicySnapshot(self.nets.discrete.frozen(), self.kappa, self.nets.bins, self.steps)
        with self._publish_lock:
            self._published = snapshot
        return snapshot

    def snapshot(self) -> PolicySnapshot:
        with self._publish_lock:
            assert self._published is not None
            return self._published

    def act_greedy(self, observation: np.ndarray) -> np.ndarray:
        return discrete_to_continuous(greedy_policy(self.nets.discrete, observation, self.nets.bins), self.nets.bins)

    def act_boltzmann(self, observation: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        probabilities = boltzmann_policy(self.nets.discrete, observation, self.kappa, self.nets.bins)
        return discrete_to_continuous(sample_bins(probabilities, rng), self.nets.bins)

    def train_step(self, buffer: ReplayBuffer, batch_size: int | None = None, *, apply: bool = True) -> dict[str, float]:
        size = batch_size or self.config.batch_size
        batch = buffer.sample(size, self.rng)
        nets = self.nets
        kappa = nets.kappa
        q_loss, q_grads, q_stats = critic_loss(
            nets.critic, nets.target_critic, nets.discrete, batch, kappa, nets.gamma, nets.bins, self.rng
        )
        if apply:
            adam_step(nets.critic.params, q_grads, self.critic_opt)
        d_loss, d_grads = discrete_loss(nets.discrete, nets.critic, batch.observations, kappa, nets.bins, self.rng)
        mean_entropy = float(entropy(boltzmann_policy(nets.discrete, batch.observations, kappa, nets.bins)).mean())
        if apply:
            adam_step(nets.discrete.params, d_grads, self.discrete_opt)
            soft_update(nets.target_critic, nets.critic, self.config.polyak)
            if self.config.adapt_temperature:
                nets.log_kappa = temperature_update(
                    nets.log_kappa, mean_entropy, self.config.target_entropy, self.config.kappa_learning_rate
                )
            self.steps += 1
        return {
            "critic_loss": q_loss,
            "discrete_loss": d_loss,
            "entropy": mean_entropy,
            "kappa": nets.kappa,
            **q_stats,
        }

    def save(self, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
        metadata = {
            "kappa": self.kappa,
            "log_kappa": self.nets.log_kappa,
            "steps": self.steps,
            "bins": self.nets.bins,
            "gamma": self.nets.gamma,
            "observation_size": self.config.observation_size,
            **(extra or {}),
        }
        nets = {"discrete": self.nets.discrete, "critic": self.nets.critic, "target_critic": self.nets.target_critic}
        return save_checkpoint(path, nets, metadata)

    @classmethod
    def load(cls, path: str | Path, config: AgentConfig | None = None) -> "SDCQAgent":
        checkpoint = load_checkpoint(path)
        meta = checkpoint.metadata
        discrete = checkpoint.nets["discrete"]
        base = config or AgentConfig()
        config = AgentConfig(
            **{
                **base.__dict__,
                "observation_size": discrete.widths[0],
                "bins": int(meta.get("bins", discrete.widths[-1] // ACTION_DIMS)),
                "gamma": float(meta.get("gamma", base.gamma)),
                "hidden": tuple(discrete.widths[1:-1]),
            }
        )
        agent = cls(config)
        agent.nets.discrete = discrete
        agent.nets.critic = checkpoint.nets["critic"]
        agent.nets.target_critic = checkpoint.nets["target_critic"]
        agent.nets.log_kappa = float(meta.get("log_kappa", math.log(meta.get("kappa", 1.0))))
        agent.discrete_opt = AdamState.for_params(agent.nets.discrete.params, config.learning_rate)
        agent.critic_opt = AdamState.for_params(agent.nets.critic.params, config.learning_rate)
        agent.steps = int(meta.get("steps", 0))
        agent.publish()
        return agent


def make_transition(
    observation: np.ndarray, action: np.ndarray, reward: float, next_observation: np.ndarray, done: bool
) -> Transition:
    return Transition(np.asarray(observation, dtype=float), np.asarray(action, dtype=float), float(reward),
                      np.asarray(next_observation, dtype=float), bool(done))


__all__ = [
    "AgentConfig", "AgentNetworks", "Batch", "InsufficientDataError", "PolicySnapshot", "ReplayBuffer",
    "SDCQAgent", "Transition", "bin_centers", "boltzmann_policy", "boltzmann_probabilities", "critic_loss",
    "discrete_loss", "discrete_to_continuous", "entropy", "greedy_policy", "make_transition", "sample_bins",
    "temperature_update",
]
