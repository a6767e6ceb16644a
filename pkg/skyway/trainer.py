"""Training orchestration: sampler workers, decoupled exploration, evaluation.

Each sampler cycle executes one greedy plan segment (which advances the
episode) and branches `exploration_per_cycle` Boltzmann rollouts from the
same start state without touching the executed state. With `threads == 1`
sampling and updates interleave on the calling thread and the whole run is
reproducible from its seeds.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .common import log_event, write_table
from .planner_env import EnvConfig, PlannerEnv, with_speed
from .run_metrics import DashboardThresholds, MetricsCollector, MetricsDashboard, TrainingMetrics
from .sdcq import AgentConfig, InsufficientDataError, PolicySnapshot, ReplayBuffer, SDCQAgent, Transition, make_transition
from .worldmap import Scenario, ScenarioSpec, generate_scenario, named_scenario

LOGGER = logging.getLogger("skyway.trainer")

LOG_COLUMNS = [
    "wall_clock", "steps", "transitions", "episodes", "mean_return", "success_rate",
    "episode_time", "critic_loss", "discrete_loss", "kappa", "entropy",
]


@dataclass(frozen=True)
class TrainConfig:
    scenario: ScenarioSpec | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    v_max_set: tuple[float, ...] = (4.0,)
    threads: int = 9
    exploration_per_cycle: int = 20
    plan_length: int = 12
    updates_per_cycle: int = 1
    publish_every: int = 1
    eval_period: int = 500
    eval_episodes: int = 3
    total_steps: int = 5_000
    time_budget_s: float | None = None
    curriculum: bool = True
    curriculum_off_kind: str = "uniform_walls"
    scenario_seed: int = 0
    exploration_seed: int = 1
    eval_seed: int = 1_000_000
    out_dir: str = "runs"

    def validate(self) -> None:
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.exploration_per_cycle < 0:
            raise ValueError("exploration_per_cycle must be non-negative")
        if self.eval_period <= 0 or self.total_steps <= 0:
            raise ValueError("eval_period and total_steps must be positive")
        if self.plan_length < 1 or self.updates_per_cycle < 1:
            raise ValueError("plan_length and updates_per_cycle must be positive")
        if self.curriculum_off_kind not in {"uniform_walls", "forest"}:
            raise ValueError("curriculum_off_kind must be uniform_walls or forest")
        if not self.v_max_set:
            raise ValueError("v_max_set must name at least one speed")

    def training_spec(self) -> ScenarioSpec:
        if self.curriculum:
            return self.scenario or named_scenario("curriculum")
        if self.curriculum_off_kind == "forest":
            return named_scenario("uniform_forest")
        return named_scenario("uniform")

    def evaluation_spec(self) -> ScenarioSpec:
        """Held-out easy half of the curriculum course."""
        return (self.scenario or named_scenario("curriculum")).with_changes(goal_fraction=0.5)


@dataclass(frozen=True)
class EpisodeRecord:
    scenario_seed: int
    success: bool
    cause: str
    steps: int
    cumulative_reward: float
    final_index: int
    wall_clock: float
    progress: float = 0.0


@dataclass
class CycleResult:
    executed: list[Transition]
    explored: list[list[Transition]]
    episode: EpisodeRecord | None = None

    @property
    def stored(self) -> int:
        return len(self.executed) + sum(len(branch) for branch in self.explored)


def _roll(env: PlannerEnv, act: Callable[[np.ndarray], np.ndarray], steps: int) -> list[Transition]:
    transitions: list[Transition] = []
    observation = env.observe()
    for _ in range(steps):
        action = np.asarray(act(observation), dtype=float)
        outcome = env.step(action)
        transitions.append(make_transition(observation, action, outcome.reward, outcome.observation, outcome.done))
        observation = outcome.observation
        if env.finished is not None:
            break
    return transitions


def sampling_cycle(
    env: PlannerEnv,
    policy: PolicySnapshot,
    exploration_per_cycle: int,
    buffer: ReplayBuffer | None,
    explore_rng: np.random.Generator,
    plan_length: int = 12,
) -> CycleResult:
    origin = env.clone_state()
    executed = _roll(env, policy.act_greedy, plan_length)
    after = env.clone_state()
    explored = []
    for _ in range(exploration_per_cycle):
        env.restore_state(origin)
        explored.append(_roll(env, lambda obs: policy.act_boltzmann(obs, explore_rng), plan_length))
    env.restore_state(after)
    if buffer is not None:
        buffer.extend(executed)
        for branch in explored:
            buffer.extend(branch)
    return CycleResult(executed, explored)


def _progress(env: PlannerEnv) -> float:
    corridor = env.corridor
    done = float(corridor.lengths[: max(0, env.state.index - 1)].sum())
    total = float(corridor.lengths.sum())
    return done / total if total > 0 else 1.0


class SamplerWorker:
    """Owns one environment and its scenario/exploration/noise RNG streams."""

    def __init__(self, worker_id: int, config: TrainConfig, env_config: EnvConfig) -> None:
        self.worker_id = worker_id
        self.config = config
        self.spec = config.training_spec()
        streams = np.random.SeedSequence([config.scenario_seed, worker_id]).spawn(2)
        self.scenario_rng = np.random.default_rng(streams[0])
        self.explore_rng = np.random.default_rng([config.exploration_seed, worker_id])
        self.env = PlannerEnv(env_config, np.random.default_rng(streams[1]))
        self.episode_started = time.perf_counter()
        self.scenario: Scenario | None = None

    def _next_scenario(self) -> None:
        seed = int(self.scenario_rng.integers(0, 2**63 - 1))
        self.scenario = generate_scenario(self.spec.with_changes(rng_seed=seed))
        self.env.reset(self.scenario)
        self.episode_started = time.perf_counter()

    def cycle(self, policy: PolicySnapshot, buffer: ReplayBuffer) -> CycleResult:
        if self.scenario is None or self.env.finished is not None:
            self._next_scenario()
        result = sampling_cycle(
            self.env, policy, self.config.exploration_per_cycle, buffer, self.explore_rng, self.config.plan_length
        )
        if self.env.finished is not None:
            result.episode = EpisodeRecord(
                scenario_seed=self.scenario.seed,
                success=self.env.finished == "success",
                cause=self.env.finished,
                steps=self.env.steps_taken,
                cumulative_reward=self.env.cumulative_reward,
                final_index=self.env.state.index,
                wall_clock=time.perf_counter() - self.episode_started,
                progress=_progress(self.env),
            )
        return result


@dataclass
class EvaluationResult:
    success_rate: float
    mean_episode_time: float | None
    mean_return: float
    records: list[EpisodeRecord]


def evaluate(
    policy: PolicySnapshot | SDCQAgent,
    scenarios: Iterable[ScenarioSpec | Scenario],
    episodes: int,
    env_config: EnvConfig | None = None,
) -> EvaluationResult:
    """Greedy episodes without exploration or buffer writes."""
    snapshot = policy.snapshot() if isinstance(policy, SDCQAgent) else policy
    env = PlannerEnv(replace(env_config or EnvConfig(), noise_enabled=False))
    pool = list(scenarios)
    if not pool:
        raise ValueError("evaluation needs at least one scenario")
    records: list[EpisodeRecord] = []
    for episode in range(episodes):
        item = pool[episode % len(pool)]
        scenario = item if isinstance(item, Scenario) else generate_scenario(item)
        began = time.perf_counter()
        observation = env.reset(scenario)
        while env.finished is None:
            observation = env.step(snapshot.act_greedy(observation)).observation
        records.append(
            EpisodeRecord(scenario.seed, env.finished == "success", env.finished, env.steps_taken,
                          env.cumulative_reward, env.state.index, time.perf_counter() - began, _progress(env))
        )
    successes = [r for r in records if r.success]
    dt = env.cfg.knot_interval
    return EvaluationResult(
        success_rate=len(successes) / len(records),
        mean_episode_time=float(np.mean([r.steps * dt for r in successes])) if successes else None,
        mean_return=float(np.mean([r.cumulative_reward for r in records])),
        records=records,
    )


@dataclass
class TrainingRun:
    run_id: str
    agent: SDCQAgent
    log_rows: list[list]
    checkpoints: list[Path]
    metrics: MetricsCollector
    log_path: Path | None = None

    @property
    def final_success(self) -> float:
        return float(self.log_rows[-1][LOG_COLUMNS.index("success_rate")]) if self.log_rows else 0.0


class Trainer:
    """Runs sampler workers against one shared buffer and a single learner."""

    def __init__(self, config: TrainConfig, v_max: float | None = None, metrics: TrainingMetrics | None = None) -> None:
        config.validate()
        self.config = config
        self.v_max = float(v_max if v_max is not None else config.v_max_set[0])
        self.env_config = with_speed(config.env, self.v_max)
        agent_config = replace(config.agent, observation_size=self.env_config.observation_size)
        self.agent = SDCQAgent(agent_config)
        self.buffer = ReplayBuffer(agent_config.capacity, agent_config.observation_size)
        self.metrics = metrics or MetricsCollector()
        self.run_id = f"vmax{self.v_max:g}-{uuid.uuid4().hex[:8]}"
        self.out_dir = Path(config.out_dir) / self.run_id
        self.eval_scenarios = [
            config.evaluation_spec().with_changes(rng_seed=config.eval_seed + i) for i in range(config.eval_episodes)
        ]
        self._stop = threading.Event()
        self._errors: queue.SimpleQueue[BaseException] = queue.SimpleQueue()
        self._last_diag: dict[str, float] = {}
        self.log_rows: list[list] = []
        self.checkpoints: list[Path] = []
        self.alerts: list[dict] = []
        self.started = 0.0

    def _record_cycle(self, result: CycleResult) -> None:
        self.metrics.record_transitions(result.stored)
        if result.episode is not None:
            self.metrics.record_episode(result.episode)

    def _worker_loop(self, worker: SamplerWorker) -> None:
        try:
            while not self._stop.is_set():
                self._record_cycle(worker.cycle(self.agent.snapshot(), self.buffer))
        except BaseException as error:  # surfaced on the trainer thread
            LOGGER.exception("Sampler %s failed", worker.worker_id)
            self._errors.put(error)
            self._stop.set()

    def _update(self) -> bool:
        try:
            self._last_diag = self.agent.train_step(self.buffer)
        except InsufficientDataError:
            return False
        self.metrics.record_update(self._last_diag)
        if self.agent.steps % self.config.publish_every == 0:
            self.agent.publish()
        if self.agent.steps % self.config.eval_period == 0:
            self._evaluate()
        return True

    def _budget_left(self) -> bool:
        if self.agent.steps >= self.config.total_steps:
            return False
        if self.config.time_budget_s is not None and time.perf_counter() - self.started >= self.config.time_budget_s:
            return False
        return not self._stop.is_set()

    def _watch(self, result: EvaluationResult) -> None:
        # no success floor while training
        dashboard = MetricsDashboard(DashboardThresholds(min_success_rate=0.0))
        dt = self.env_config.knot_interval
        for record in result.records:
            dashboard.ingest_episode(cause=record.cause, episode_time=record.steps * dt, steps=record.steps,
                                     run_id=self.run_id)
        dashboard.ingest_kappa(self.agent.kappa)
        for alert in dashboard.snapshot()["alerts"]:
            LOGGER.warning("Run %s alert %s at step %s: %s (threshold %s)", self.run_id, alert["type"],
                           self.agent.steps, alert["value"], alert["threshold"])
            self.alerts.append({**alert, "steps": self.agent.steps})

    def _evaluate(self) -> None:
        result = evaluate(self.agent.snapshot(), self.eval_scenarios, self.config.eval_episodes, self.env_config)
        self.metrics.record_evaluation(result.success_rate, result.mean_episode_time)
        self._watch(result)
        wall_clock = time.perf_counter() - self.started
        snapshot = self.metrics.snapshot()
        row = [
            round(wall_clock, 3), self.agent.steps, snapshot["transitions"], snapshot["episodes"],
            result.mean_return, result.success_rate, result.mean_episode_time,
            self._last_diag.get("critic_loss"), self._last_diag.get("discrete_loss"),
            self.agent.kappa, self._last_diag.get("entropy"),
        ]
        if self.config.threads == 1:
            row[0] = None
        self.log_rows.append(row)
        path = self.agent.save(self.out_dir / "checkpoints" / f"step_{self.agent.steps:07d}.skw", {"v_max": self.v_max})
        self.checkpoints.append(path)
        log_event(
            "train.eval", run_id=self.run_id, steps=self.agent.steps, success_rate=result.success_rate,
            episode_time=result.mean_episode_time, checkpoint=str(path),
        )

    def run(self) -> TrainingRun:
        self.started = time.perf_counter()
        self.metrics.start_run(self.run_id)
        log_event("train.start", run_id=self.run_id, v_max=self.v_max, threads=self.config.threads,
                  exploration=self.config.exploration_per_cycle)
        if self.config.threads == 1:
            self._run_inline()
        else:
            self._run_threaded()
        if not self._errors.empty():
            error = self._errors.get_nowait()
            raise RuntimeError(f"sampler worker failed: {error}") from error
        if not self.log_rows or self.log_rows[-1][1] != self.agent.steps:
            self._evaluate()
        log_path = write_table(
            self.out_dir / "training_log.txt", LOG_COLUMNS, self.log_rows,
            [f"run_id {self.run_id}", f"v_max {self.v_max}", f"threads {self.config.threads}",
             f"exploration_per_cycle {self.config.exploration_per_cycle}", f"curriculum {self.config.curriculum}"],
        )
        log_event("train.finished", run_id=self.run_id, steps=self.agent.steps, log=str(log_path))
        return TrainingRun(self.run_id, self.agent, self.log_rows, self.checkpoints, self.metrics, log_path)

    def _run_inline(self) -> None:
        worker = SamplerWorker(0, self.config, self.env_config)
        while self._budget_left():
            self._record_cycle(worker.cycle(self.agent.snapshot(), self.buffer))
            for _ in range(self.config.updates_per_cycle):
                if not self._update() or not self._budget_left():
                    break

    def _run_threaded(self) -> None:
        workers = [SamplerWorker(i, self.config, self.env_config) for i in range(self.config.threads)]
        threads = [
            threading.Thread(target=self._worker_loop, args=(worker,), name=f"sampler-{worker.worker_id}", daemon=True)
            for worker in workers
        ]
        for thread in threads:
            thread.start()
        try:
            while self._budget_left():
                if not self._update():
                    time.sleep(0.01)
        finally:
            self._stop.set()
            for thread in threads:
                thread.join(timeout=60)


def train(config: TrainConfig, v_max: float | None = None) -> TrainingRun:
    return Trainer(config, v_max).run()


def train_many(config: TrainConfig, v_max_set: Sequence[float] | None = None) -> dict[float, TrainingRun]:
    return {float(v): train(config, v) for v in (v_max_set or config.v_max_set)}


ABLATION_KNOBS = ("curriculum", "exploration_per_cycle", "bins")


def sweep_ablation(
    config: TrainConfig, knob: str, values: Sequence, seeds: Sequence[int] = (0, 1, 2)
) -> dict[str, list[float]]:
    """Short trainings per knob value and seed; returns final greedy success per value."""
    if knob not in ABLATION_KNOBS:
        raise ValueError(f"unknown ablation knob {knob!r}; expected one of {', '.join(ABLATION_KNOBS)}")
    results: dict[str, list[float]] = {}
    for value in values:
        scores = []
        for seed in seeds:
            variant = replace(config, scenario_seed=seed, exploration_seed=seed + 1,
                              agent=replace(config.agent, seed=seed))
            if knob == "bins":
                variant = replace(variant, agent=replace(variant.agent, bins=int(value)))
            else:
                variant = replace(variant, **{knob: value})
            variant.validate()
            scores.append(train(variant).final_success)
        results[str(value)] = scores
        log_event("ablation.value", knob=knob, value=value, mean_success=float(np.mean(scores)))
    return results


def write_ablation(results: dict[str, list[float]], knob: str, path: str | Path) -> Path:
    rows = [[value, float(np.mean(scores)), float(np.min(scores)), float(np.max(scores)), len(scores)]
            for value, scores in results.items()]
    return write_table(path, [knob, "mean_success", "min", "max", "seeds"], rows, [f"knob {knob}"])


__all__ = [
    "CycleResult", "EpisodeRecord", "EvaluationResult", "SamplerWorker", "TrainConfig", "Trainer", "TrainingRun",
    "evaluate", "sampling_cycle", "sweep_ablation", "train", "train_many", "write_ablation",
]
