"""Benchmark suites, single-shot planning and post-hoc safety audits."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .bspline import BSplineTrajectory, KinematicState, eval_position, export_samples, sample_path
from .common import log_event, write_table
from .corridor import SafeFlightCorridor, inside_any
from .planner_env import EnvConfig, PlannerEnv, RewardConfig, with_speed
from .run_metrics import MetricsDashboard
from .sdcq import SDCQAgent
from .worldmap import OccupancyGrid, Scenario, generate_scenario, import_map, named_scenario

LOGGER = logging.getLogger("skyway.bench")

BENCH_SCENARIOS = ("forest", "sparse_walls", "dense_walls", "curriculum")
PROFILES = {
    "corb_f": RewardConfig(k_p=-30.0, k_f=8.0, k_s=50.0),
    "corb_s": RewardConfig(k_p=-50.0, k_f=3.0, k_s=50.0),
    "default": RewardConfig(),
    "train": RewardConfig(),
}
PROFILE_ALIASES = {"fast": "corb_f", "safe": "corb_s"}

# Published comparison numbers, carried verbatim as annotations: (successes out of 20, mean episode time s).
EXTERNAL_REFERENCE = {
    "forest": {
        15: {"corb_f": (17, 6.7), "corb_s": (19, 9.3), "ego_planner": (19, 11.4)},
        10: {"corb_f": (19, 8.2), "corb_s": (19, 10.2), "ego_planner": (20, 11.4)},
        7: {"corb_f": (20, 13.2), "corb_s": (20, 13.1), "ego_planner": (20, 14.1)},
    },
    "sparse_walls": {
        15: {"corb_f": (18, 7.5), "corb_s": (20, 7.7), "ego_planner": (18, 10.4)},
        10: {"corb_f": (17, 9.3), "corb_s": (20, 9.6), "ego_planner": (20, 13.2)},
        7: {"corb_f": (20, 10.4), "corb_s": (20, 12.7), "ego_planner": (20, 15.6)},
    },
    "dense_walls": {
        15: {"corb_f": (10, 7.9), "corb_s": (18, 8.9), "ego_planner": (3, 13.6)},
        10: {"corb_f": (15, 9.4), "corb_s": (19, 11.1), "ego_planner": (7, 16.3)},
        7: {"corb_f": (20, 13.3), "corb_s": (20, 13.9), "ego_planner": (13, 17.9)},
    },
}


class UnknownProfileError(ValueError):
    """Raised for reward profile names outside PROFILES."""


class CheckpointMismatchError(ValueError):
    """Raised when a checkpoint's network shape does not fit the environment."""


def profile_rewards(name: str) -> RewardConfig:
    key = str(name).strip().lower()
    key = PROFILE_ALIASES.get(key, key)
    if key not in PROFILES:
        raise UnknownProfileError(f"unknown reward profile {name!r}; expected one of {', '.join(PROFILES)}")
    return PROFILES[key]


@dataclass(frozen=True)
class BenchmarkSuite:
    scenario: str = "sparse_walls"
    v_max: float = 7.0
    checkpoint: str | None = None
    episodes: int = 20
    seed: int = 0
    profile: str = "corb_f"
    out_dir: str = "runs/bench"
    workers: int = 1
    reward: RewardConfig | None = None
    echo: dict[str, Any] = field(default_factory=dict, compare=False)

    def validate(self) -> None:
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if self.scenario not in BENCH_SCENARIOS:
            raise ValueError(f"unknown benchmark scenario {self.scenario!r}; expected one of {', '.join(BENCH_SCENARIOS)}")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.profile.lower() != "custom":
            profile_rewards(self.profile)
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise ValueError(f"checkpoint not found: {self.checkpoint}")

    def rewards(self) -> RewardConfig:
        if self.reward is not None:
            return self.reward
        return profile_rewards(self.profile) if self.profile.lower() != "custom" else RewardConfig()

    def episode_seed(self, episode: int) -> int:
        return int(np.random.SeedSequence([self.seed, episode]).generate_state(1, dtype=np.uint64)[0]) >> 1

    @classmethod
    def from_echo(cls, echo: Mapping[str, Any]) -> "BenchmarkSuite":
        from .settings import suite_from_config

        return suite_from_config(echo)


@dataclass
class EpisodeResult:
    episode: int
    seed: int
    cause: str
    steps: int
    episode_time: float
    peak_speed: float
    path_length: float
    audit_ok: bool | None
    trajectory_file: str | None = None

    @property
    def success(self) -> bool:
        return self.cause == "success"

    def as_dict(self) -> dict[str, Any]:
        return {
            "episode": self.episode,
            "seed": self.seed,
            "cause": self.cause,
            "success": self.success,
            "steps": self.steps,
            "episode_time": round(self.episode_time, 6),
            "peak_speed": round(self.peak_speed, 6),
            "path_length": round(self.path_length, 6),
            "audit_ok": self.audit_ok,
            "trajectory_file": self.trajectory_file,
        }


@dataclass
class BenchmarkReport:
    suite: BenchmarkSuite
    episodes: list[EpisodeResult]
    path: Path | None = None
    alerts: list[dict[str, Any]] = field(default_factory=list)

    @property
    def success_count(self) -> int:
        return sum(1 for record in self.episodes if record.success)

    @property
    def mean_episode_time(self) -> float | None:
        times = [record.episode_time for record in self.episodes if record.success]
        return float(np.mean(times)) if times else None

    @property
    def mean_peak_speed(self) -> float:
        return float(np.mean([record.peak_speed for record in self.episodes])) if self.episodes else 0.0

    def summary(self) -> dict[str, Any]:
        causes: dict[str, int] = {}
        for record in self.episodes:
            causes[record.cause] = causes.get(record.cause, 0) + 1
        return {
            "scenario": self.suite.scenario,
            "v_max": self.suite.v_max,
            "profile": self.suite.profile,
            "episodes": len(self.episodes),
            "successes": self.success_count,
            "success_rate": self.success_count / len(self.episodes) if self.episodes else 0.0,
            "mean_episode_time": None if self.mean_episode_time is None else round(self.mean_episode_time, 6),
            "mean_peak_speed": round(self.mean_peak_speed, 6),
            "causes": causes,
        }

    def reference(self) -> dict[str, Any]:
        rows = EXTERNAL_REFERENCE.get(self.suite.scenario, {}).get(int(round(self.suite.v_max)))
        if rows is None:
            return {"source": "external", "available": False}
        return {
            "source": "external",
            "available": True,
            "note": "published numbers for comparison only; not produced by this run",
            "planners": {name: {"successes": s, "out_of": 20, "episode_time": t} for name, (s, t) in rows.items()},
        }

    def as_document(self) -> dict[str, Any]:
        return {
            "config": self.suite.echo,
            "summary": self.summary(),
            "episodes": [record.as_dict() for record in self.episodes],
            "reference": self.reference(),
            "alerts": self.alerts,
        }


def audit_trajectory(traj: BSplineTrajectory, sfc: SafeFlightCorridor, per_knot: int = 100) -> bool:
    """Dense re-sampling of the whole valid span against the union of sub-corridors."""
    start, end = traj.valid_span()
    count = max(2, int(round((end - start) / traj.knot_interval)) * per_knot + 1)
    points = np.array([eval_position(traj, tau) for tau in np.linspace(start, end, count)])
    return bool(inside_any(sfc, points).all())


def load_agent(checkpoint: str | Path, env_config: EnvConfig) -> SDCQAgent:
    agent = SDCQAgent.load(checkpoint)
    if agent.config.observation_size != env_config.observation_size:
        raise CheckpointMismatchError(
            f"{checkpoint}: network expects {agent.config.observation_size} observation values, "
            f"environment produces {env_config.observation_size}"
        )
    return agent


def suite_env_config(suite: BenchmarkSuite) -> EnvConfig:
    from .settings import env_config_from_config

    base = env_config_from_config(suite.echo) if suite.echo else EnvConfig()
    return replace(with_speed(base, suite.v_max), reward=suite.rewards(), noise_enabled=False)


def _run_episode(suite: BenchmarkSuite, agent: SDCQAgent, env_config: EnvConfig, episode: int, out_dir: Path) -> EpisodeResult:
    seed = suite.episode_seed(episode)
    scenario = generate_scenario(named_scenario(suite.scenario, seed))
    env = PlannerEnv(env_config)
    policy = agent.snapshot()
    observation = env.reset(scenario)
    while env.finished is None:
        observation = env.step(policy.act_greedy(observation)).observation
    traj = env.trajectory()
    success = env.finished == "success"
    samples = sample_path(traj, traj.knot_interval / 10.0) if len(traj.control_points) >= 4 else np.zeros((0, 6))
    path_length = float(np.linalg.norm(np.diff(samples[:, 1:4], axis=0), axis=1).sum()) if len(samples) > 1 else 0.0
    trajectory_file = None
    if len(traj.control_points) >= 4:
        target = export_samples(traj, out_dir / f"episode_{episode:03d}.txt")
        trajectory_file = target.name
    result = EpisodeResult(
        episode=episode,
        seed=seed,
        cause=env.finished,
        steps=env.steps_taken,
        episode_time=env.episode_time(),
        peak_speed=float(samples[:, 4].max()) if len(samples) else 0.0,
        path_length=path_length,
        audit_ok=audit_trajectory(traj, env.corridor) if success else None,
        trajectory_file=trajectory_file,
    )
    log_event("bench.episode", episode=episode, seed=seed, cause=result.cause, steps=result.steps)
    return result


def run_benchmark(suite: BenchmarkSuite, agent: SDCQAgent | None = None) -> BenchmarkReport:
    suite.validate()
    env_config = suite_env_config(suite)
    if agent is None:
        if suite.checkpoint is None:
            raise ValueError("benchmark needs a checkpoint or an agent")
        agent = load_agent(suite.checkpoint, env_config)
    elif agent.config.observation_size != env_config.observation_size:
        raise CheckpointMismatchError(
            f"agent expects {agent.config.observation_size} observation values, environment produces {env_config.observation_size}"
        )
    out_dir = Path(suite.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(suite.episodes)
    if suite.workers > 1:
        with ThreadPoolExecutor(max_workers=suite.workers) as pool:
            episodes = list(pool.map(lambda i: _run_episode(suite, agent, env_config, i, out_dir), indices))
    else:
        episodes = [_run_episode(suite, agent, env_config, i, out_dir) for i in indices]
    dashboard = MetricsDashboard()
    for record in episodes:
        dashboard.ingest_episode(cause=record.cause, episode_time=record.episode_time, steps=record.steps)
    report = BenchmarkReport(suite, episodes, alerts=dashboard.snapshot()["alerts"])
    for alert in report.alerts:
        LOGGER.warning("Benchmark alert %s: %s (threshold %s)", alert["type"], alert["value"], alert["threshold"])
    report.path = write_report(report, out_dir / "report.yaml")
    write_table(
        out_dir / "episodes.txt",
        ["episode", "seed", "cause", "steps", "episode_time", "peak_speed", "path_length", "audit_ok"],
        [[r.episode, r.seed, r.cause, r.steps, r.episode_time, r.peak_speed, r.path_length, r.audit_ok] for r in episodes],
        [f"scenario {suite.scenario}", f"v_max {suite.v_max}", f"profile {suite.profile}"],
    )
    log_event("bench.finished", scenario=suite.scenario, v_max=suite.v_max, successes=report.success_count,
              episodes=len(episodes), report=str(report.path))
    return report


def write_report(report: BenchmarkReport, path: str | Path) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8") as handle:
            handle.write("# skyway benchmark report\n")
            yaml.safe_dump(report.as_document(), handle, sort_keys=False)
    except OSError as error:
        raise OSError(f"could not write report {target}: {error}") from error
    return target


def read_report(path: str | Path) -> dict[str, Any]:
    source = Path(path)
    try:
        return yaml.safe_load(source.read_text(encoding="utf-8"))
    except OSError as error:
        raise OSError(f"could not read report {source}: {error}") from error


@dataclass(frozen=True, eq=False)
class PlanResult:
    trajectory: BSplineTrajectory
    corridor: SafeFlightCorridor
    cause: str
    timings: dict[str, float]
    trajectory_file: Path | None = None


def plan_once(
    grid: OccupancyGrid | str | Path,
    start: Sequence[float],
    goal: Sequence[float],
    agent: SDCQAgent | str | Path,
    env_config: EnvConfig | None = None,
    out: str | Path | None = None,
) -> PlanResult:
    """A*, corridor and one greedy rollout with per-stage wall-clock in milliseconds."""
    env_config = env_config or EnvConfig()
    if not isinstance(grid, OccupancyGrid):
        grid = import_map(grid)
    if not isinstance(agent, SDCQAgent):
        agent = load_agent(agent, env_config)
    env = PlannerEnv(env_config)
    scenario = Scenario(grid, np.asarray(start, dtype=float), np.asarray(goal, dtype=float))
    policy = agent.snapshot()
    began = time.perf_counter()
    observation = env.reset(scenario, KinematicState.at_rest(start))
    planned = time.perf_counter()
    while env.finished is None:
        observation = env.step(policy.act_greedy(observation)).observation
    finished = time.perf_counter()
    timings = {
        **env.plan.timings,
        "rollout_ms": (finished - planned) * 1000.0,
        "total_ms": (finished - began) * 1000.0,
    }
    traj = env.trajectory()
    target = export_samples(traj, out) if out is not None and len(traj.control_points) >= 4 else None
    log_event("plan.timing", cause=env.finished, **{k: round(v, 3) for k, v in timings.items()})
    return PlanResult(traj, env.corridor, env.finished, timings, target)


__all__ = [
    "BENCH_SCENARIOS", "BenchmarkReport", "BenchmarkSuite", "CheckpointMismatchError", "EpisodeResult", "load_agent",
    "PROFILES", "PlanResult", "UnknownProfileError", "audit_trajectory", "plan_once", "profile_rewards",
    "read_report", "run_benchmark", "suite_env_config", "write_report",
]
