"""Planning MDP: observations, action mapping, spline stepping and rewards.

One step appends a control point p_{t+1}; the knot-to-knot segment
[tau_t, tau_{t+1}] it completes is checked against the corridor at ten
evenly spaced samples, the last of which is the new knot position.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bspline import BSplineTrajectory, KinematicState, basis_weights, init_from_state, knot_position
from .common import log_event, write_table
from .corridor import (
    CorridorBuilder,
    CorridorConfig,
    SafeFlightCorridor,
    build_corridor,
    inside_any,
    locate,
    observation_window,
)
from .pathsearch import ReferencePolyline, VoxelPath, astar_3d, segment_collision, simplify_polyline, split_long_segments
from .worldmap import OccupancyGrid, Scenario, inflate

LOGGER = logging.getLogger("skyway.planner_env")

CAUSES = ("success", "corridor_exit", "jerk_violation", "horizon")
OBSERVATION_EXTRA = 10


@dataclass(frozen=True)
class ActionSpec:
    v_max: float = 4.0
    a_max: float | None = None
    j_max: float | None = None
    az_max: float | None = None
    vz_max: float | None = None
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.v_max > 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        a_max = self.a_max if self.a_max is not None else 2.0 * self.v_max
        defaults = {
            "a_max": a_max,
            "j_max": self.j_max if self.j_max is not None else 50.0 + 10.0 * self.v_max,
            "az_max": self.az_max if self.az_max is not None else min(a_max, 6.0),
            "vz_max": self.vz_max if self.vz_max is not None else self.v_max / 2.0,
        }
        for name, value in defaults.items():
            object.__setattr__(self, name, float(value))
        if self.az_max >= 9.8:
            raise ValueError(f"az_max must stay below 9.8 m/s^2, got {self.az_max}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class RewardConfig:
    k_p: float = -30.0
    k_f: float = 5.0
    k_s: float = 50.0

    def as_dict(self) -> dict[str, float]:
        return {"k_p": self.k_p, "k_f": self.k_f, "k_s": self.k_s}


@dataclass(frozen=True)
class EnvConfig:
    action: ActionSpec = field(default_factory=ActionSpec)
    reward: RewardConfig = field(default_factory=RewardConfig)
    corridor: CorridorConfig = field(default_factory=CorridorConfig)
    knot_interval: float = 0.3
    horizon: int = 100
    window: int = 9
    position_scale: float = 10.0
    collision_samples: int = 10
    inflation_voxels: int = 1
    noise_enabled: bool = False
    noise_position: float = 0.05
    noise_velocity: float = 0.1

    def __post_init__(self) -> None:
        if not self.knot_interval > 0:
            raise ValueError("knot_interval must be positive")
        if self.horizon < 3:
            raise ValueError("horizon must allow at least one step")
        if self.window < 1 or self.collision_samples < 1:
            raise ValueError("window and collision_samples must be positive")

    @property
    def observation_size(self) -> int:
        return 6 * self.window + 2 + OBSERVATION_EXTRA


@dataclass(frozen=True, eq=False)
class PlannerState:
    points: np.ndarray
    velocity: np.ndarray
    index: int
    tau: float
    t: int

    @property
    def knot(self) -> np.ndarray:
        return knot_position(*self.points)


@dataclass(frozen=True)
class RewardParts:
    r_p: float
    r_f_raw: float
    r_f: float
    r_s: float
    jerk: float

    def total(self, weights: RewardConfig) -> float:
        return abs(weights.k_p) * self.r_p + weights.k_f * self.r_f + weights.k_s * self.r_s


@dataclass(frozen=True, eq=False)
class StepOutcome:
    observation: np.ndarray
    reward: float
    terminated: bool
    success: bool
    cause: str | None
    parts: RewardParts
    control_point: np.ndarray
    samples: np.ndarray

    @property
    def done(self) -> bool:
        return self.terminated or self.success


def transform_action(alpha: Sequence[float], spec: ActionSpec) -> np.ndarray:
    """Map the action cube onto a cylinder of horizontal radius a_max."""
    ax, ay, az = (float(v) for v in alpha)
    radius = math.hypot(ax, ay)
    scale = max(abs(ax), abs(ay)) / (radius + spec.epsilon)
    return np.array([ax * scale * spec.a_max, ay * scale * spec.a_max, az * spec.az_max])


def clamp_velocity(v: Sequence[float], spec: ActionSpec) -> np.ndarray:
    vx, vy, vz = (float(c) for c in v)
    speed = math.hypot(vx, vy)
    factor = spec.v_max / max(spec.v_max, speed)
    return np.array([vx * factor, vy * factor, min(max(vz, -spec.vz_max), spec.vz_max)])


def reward_follow(m: int, n: int, lengths: SafeFlightCorridor | Sequence[float]) -> float:
    """Signed corridor progress from SFC_m to SFC_n (1-based)."""
    values = lengths.lengths if isinstance(lengths, SafeFlightCorridor) else np.asarray(lengths, dtype=float)
    if n >= m:
        return float(np.sum(values[m - 1 : n - 1]))
    return -float(np.sum(values[n - 1 : m - 1]))


def jerk_discount(r_f: float, jerk: float, j_max: float) -> float:
    if jerk <= j_max / 2.0:
        return r_f
    if jerk <= j_max:
        return r_f * 2.0 * (j_max - jerk) / j_max
    return 0.0


def segment_samples(window: np.ndarray, count: int = 10) -> np.ndarray:
    """Positions p(tau_t + k dt / count), k = 1..count, from p_{t-2}..p_{t+1}."""
    return np.array([basis_weights(3, k / count) @ window for k in range(1, count + 1)])


def reward_collision(samples: np.ndarray, sfc: SafeFlightCorridor) -> float:
    return 0.0 if bool(np.all(inside_any(sfc, samples))) else -1.0


def reward_success(next_index: int | None, k_last: int) -> float:
    return 1.0 if next_index is not None and next_index == k_last else 0.0


def observe(state: PlannerState, sfc: SafeFlightCorridor, cfg: EnvConfig) -> np.ndarray:
    origin = state.knot
    scale = cfg.position_scale
    own = ((state.points - origin) / scale).ravel()
    window = observation_window(sfc, state.index, cfg.window, origin)
    split = 2 * (cfg.window + 1)
    xy = window[:split] / scale
    bands = window[split:].reshape(cfg.window, 4) / np.array(
        [cfg.corridor.max_width, cfg.corridor.max_width, scale, scale]
    )
    clock = state.tau / (cfg.horizon * cfg.knot_interval)
    return np.concatenate([own, xy, bands.ravel(), [clock]])


def initial_state(kinematics: KinematicState, sfc: SafeFlightCorridor, cfg: EnvConfig) -> PlannerState:
    points = init_from_state(kinematics, cfg.knot_interval)
    velocity = (points[2] - points[1]) / cfg.knot_interval
    index = locate(sfc, knot_position(*points)) or 1
    return PlannerState(points, velocity, index, 2 * cfg.knot_interval, 2)


def step(state: PlannerState, alpha: Sequence[float], sfc: SafeFlightCorridor, cfg: EnvConfig) -> tuple[StepOutcome, PlannerState]:
    spec = cfg.action
    dt = cfg.knot_interval
    acceleration = transform_action(alpha, spec)
    velocity = clamp_velocity(state.velocity + acceleration * dt, spec)
    new_point = state.points[2] + velocity * dt
    window = np.vstack([state.points, new_point])
    jerk = float(np.linalg.norm(window[3] - 3.0 * window[2] + 3.0 * window[1] - window[0])) / dt**3
    samples = segment_samples(window, cfg.collision_samples)
    r_p = reward_collision(samples, sfc)
    located = locate(sfc, samples[-1])
    next_index = located if located is not None else state.index
    r_f_raw = reward_follow(state.index, next_index, sfc)
    r_f = jerk_discount(r_f_raw, jerk, spec.j_max)
    r_s = reward_success(located, len(sfc)) if r_p == 0.0 else 0.0
    parts = RewardParts(r_p, r_f_raw, r_f, r_s, jerk)
    terminated = r_p == -1.0 or jerk > spec.j_max
    success = r_s == 1.0 and not terminated
    next_state = PlannerState(window[1:].copy(), velocity, next_index, state.tau + dt, state.t + 1)
    if r_p == -1.0:
        cause = "corridor_exit"
    elif jerk > spec.j_max:
        cause = "jerk_violation"
    elif success:
        cause = "success"
    elif next_state.t > cfg.horizon:
        cause = "horizon"
    else:
        cause = None
    outcome = StepOutcome(
        observation=observe(next_state, sfc, cfg),
        reward=parts.total(cfg.reward),
        terminated=terminated,
        success=success,
        cause=cause,
        parts=parts,
        control_point=new_point,
        samples=samples,
    )
    return outcome, next_state


@dataclass(frozen=True, eq=False)
class ReferencePlan:
    grid: OccupancyGrid
    path: VoxelPath
    polyline: ReferencePolyline
    corridor: SafeFlightCorridor
    timings: dict[str, float]


def plan_reference(
    grid: OccupancyGrid,
    start: Sequence[float],
    goal: Sequence[float],
    cfg: EnvConfig,
    *,
    inflated: OccupancyGrid | None = None,
    path: VoxelPath | None = None,
) -> ReferencePlan:
    """A* path, simplified polyline and corridor on the inflated map."""
    began = time.perf_counter()
    searched = inflated if inflated is not None else inflate(grid, cfg.inflation_voxels)
    if path is None:
        path = astar_3d(searched, start, goal)
    after_search = time.perf_counter()
    vertices = simplify_polyline(searched, path).vertices.copy()
    if len(vertices) >= 2:
        for end, exact in ((0, start), (-1, goal)):
            neighbor = vertices[1] if end == 0 else vertices[-2]
            if not segment_collision(searched, exact, neighbor):
                vertices[end] = np.asarray(exact, dtype=float)
    polyline = split_long_segments(ReferencePolyline(vertices), cfg.corridor.split_length)
    corridor = build_corridor(searched, polyline, cfg.corridor, CorridorBuilder(searched, cfg.corridor))
    finished = time.perf_counter()
    timings = {
        "search_ms": (after_search - began) * 1000.0,
        "corridor_ms": (finished - after_search) * 1000.0,
    }
    return ReferencePlan(searched, path, polyline, corridor, timings)


@dataclass
class StepRecord:
    step: int
    alpha: np.ndarray
    parts: RewardParts
    reward: float
    position: np.ndarray
    index: int


@dataclass
class EnvSnapshot:
    state: PlannerState
    points: tuple[np.ndarray, ...]
    records: tuple[StepRecord, ...]
    finished: str | None


class PlannerEnv:
    """Stateful episode wrapper: one instance per sampler thread."""

    def __init__(self, cfg: EnvConfig | None = None, rng: np.random.Generator | None = None) -> None:
        self.cfg = cfg or EnvConfig()
        self.rng = rng or np.random.default_rng()
        self.plan: ReferencePlan | None = None
        self.state: PlannerState | None = None
        self.scenario: Scenario | None = None
        self.points: list[np.ndarray] = []
        self.records: list[StepRecord] = []
        self.cumulative_reward = 0.0
        self.finished: str | None = None

    @property
    def corridor(self) -> SafeFlightCorridor:
        if self.plan is None:
            raise RuntimeError("environment has not been reset")
        return self.plan.corridor

    def reset(self, scenario: Scenario, kinematics: KinematicState | None = None) -> np.ndarray:
        self.scenario = scenario
        self.plan = plan_reference(
            scenario.grid, scenario.start, scenario.goal, self.cfg, inflated=scenario.inflated, path=scenario.reference
        )
        start = kinematics or KinematicState.at_rest(scenario.start)
        if self.cfg.noise_enabled:
            start = KinematicState(
                start.position + self.rng.normal(0.0, self.cfg.noise_position, 3),
                start.velocity + self.rng.normal(0.0, self.cfg.noise_velocity, 3),
                start.acceleration,
            )
        self.state = initial_state(start, self.plan.corridor, self.cfg)
        self.points = [p.copy() for p in self.state.points]
        self.records = []
        self.cumulative_reward = 0.0
        self.finished = None
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.state is None:
            raise RuntimeError("environment has not been reset")
        return observe(self.state, self.corridor, self.cfg)

    def step(self, alpha: Sequence[float]) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("environment has not been reset")
        if self.finished is not None:
            raise RuntimeError(f"episode already finished ({self.finished}); call reset")
        outcome, self.state = step(self.state, alpha, self.corridor, self.cfg)
        self.points.append(outcome.control_point)
        self.cumulative_reward += outcome.reward
        self.records.append(
            StepRecord(self.state.t - 1, np.asarray(alpha, dtype=float), outcome.parts, outcome.reward, self.state.knot, self.state.index)
        )
        self.finished = outcome.cause
        return outcome

    def clone_state(self) -> EnvSnapshot:
        if self.state is None:
            raise RuntimeError("environment has not been reset")
        return EnvSnapshot(self.state, tuple(self.points), tuple(self.records), self.finished)

    def restore_state(self, snapshot: EnvSnapshot) -> None:
        self.state = snapshot.state
        self.points = list(snapshot.points)
        self.records = list(snapshot.records)
        self.cumulative_reward = sum(record.reward for record in self.records)
        self.finished = snapshot.finished

    def trajectory(self) -> BSplineTrajectory:
        return BSplineTrajectory(np.asarray(self.points), self.cfg.knot_interval)

    @property
    def steps_taken(self) -> int:
        return len(self.records)

    def episode_time(self) -> float:
        return self.steps_taken * self.cfg.knot_interval


Policy = Callable[[np.ndarray], Sequence[float]]


@dataclass(frozen=True, eq=False)
class RolloutResult:
    trajectory: BSplineTrajectory
    records: tuple[StepRecord, ...]
    cause: str
    cumulative_reward: float
    plan: ReferencePlan

    @property
    def success(self) -> bool:
        return self.cause == "success"

    @property
    def episode_time(self) -> float:
        return len(self.records) * self.trajectory.knot_interval


def rollout(
    grid: OccupancyGrid,
    start: KinematicState,
    goal: Sequence[float],
    policy: Policy,
    cfg: EnvConfig | None = None,
    rng: np.random.Generator | None = None,
    *,
    scenario: Scenario | None = None,
) -> RolloutResult:
    """Plan the reference, then step the policy until it finishes or hits the horizon."""
    env = PlannerEnv(cfg, rng)
    if scenario is None:
        scenario = Scenario(grid, start.position, np.asarray(goal, dtype=float))
    observation = env.reset(scenario, start)
    outcome = None
    while env.finished is None:
        outcome = env.step(policy(observation))
        observation = outcome.observation
    log_event("episode.finished", cause=env.finished, steps=env.steps_taken, reward=round(env.cumulative_reward, 4))
    return RolloutResult(env.trajectory(), tuple(env.records), env.finished, env.cumulative_reward, env.plan)


def export_episode(records: Sequence[StepRecord], path: str | Path, header: Sequence[str] = ()) -> Path:
    columns = ["step", "ax", "ay", "az", "r_p", "r_f_raw", "r_f", "r_s", "reward", "jerk", "x", "y", "z", "index"]
    rows = [
        [r.step, *r.alpha, r.parts.r_p, r.parts.r_f_raw, r.parts.r_f, r.parts.r_s, r.reward, r.parts.jerk, *r.position, r.index]
        for r in records
    ]
    return write_table(path, columns, rows, header)


def with_speed(cfg: EnvConfig, v_max: float) -> EnvConfig:
    return replace(cfg, action=ActionSpec(v_max=v_max))
