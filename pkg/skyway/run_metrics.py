from __future__ import annotations

import threading
from dataclasses import dataclass, field
from statistics import quantiles
from typing import Any, Mapping, Protocol


class TrainingMetrics(Protocol):
    """Instrumentation contract shared by the learner and sampler threads."""

    def start_run(self, run_id: str | None = None) -> None: ...

    def record_transitions(self, count: int) -> None: ...

    def record_episode(self, episode: Any) -> None: ...

    def record_update(self, diagnostics: Mapping[str, float]) -> None: ...

    def record_evaluation(self, success_rate: float, episode_time: float | None) -> None: ...

    def snapshot(self) -> dict: ...


@dataclass
class MetricsCollector:
    run_id: str | None = None
    transitions: int = 0
    episodes: int = 0
    successes: int = 0
    updates: int = 0
    frontier: float = 0.0
    last_critic_loss: float | None = None
    last_kappa: float | None = None
    last_entropy: float | None = None
    last_success_rate: float | None = None
    last_episode_time: float | None = None
    causes: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def start_run(self, run_id: str | None = None) -> None:
        with self._lock:
            self.run_id = run_id
            self.transitions = 0
            self.episodes = 0
            self.successes = 0
            self.updates = 0
            self.frontier = 0.0
            self.last_critic_loss = None
            self.last_kappa = None
            self.last_entropy = None
            self.last_success_rate = None
            self.last_episode_time = None
            self.causes = {}

    def record_transitions(self, count: int) -> None:
        with self._lock:
            self.transitions += max(0, count)

    def record_episode(self, episode: Any) -> None:
        """Counts an episode; the frontier only moves forward."""
        with self._lock:
            self.episodes += 1
            self.successes += int(bool(episode.success))
            self.causes[episode.cause] = self.causes.get(episode.cause, 0) + 1
            self.frontier = max(self.frontier, float(getattr(episode, "progress", 0.0)))

    def record_update(self, diagnostics: Mapping[str, float]) -> None:
        with self._lock:
            self.updates += 1
            self.last_critic_loss = diagnostics.get("critic_loss")
            self.last_kappa = diagnostics.get("kappa")
            self.last_entropy = diagnostics.get("entropy")

    def record_evaluation(self, success_rate: float, episode_time: float | None) -> None:
        with self._lock:
            self.last_success_rate = float(success_rate)
            self.last_episode_time = episode_time

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "run_id": self.run_id,
                "transitions": self.transitions,
                "episodes": self.episodes,
                "successes": self.successes,
                "updates": self.updates,
                "frontier": round(self.frontier, 4),
                "critic_loss": self.last_critic_loss,
                "kappa": self.last_kappa,
                "entropy": self.last_entropy,
                "success_rate": self.last_success_rate,
                "episode_time": self.last_episode_time,
                "causes": dict(self.causes),
            }


@dataclass
class DashboardThresholds:
    min_success_rate: float = 0.5
    corridor_exit_rate: float = 0.3
    p95_episode_time: float = 30.0
    min_kappa: float = 2e-3


class MetricsDashboard:
    """Aggregates benchmark or evaluation episodes into rates and alerting rules."""

    def __init__(self, thresholds: DashboardThresholds | None = None) -> None:
        self.thresholds = thresholds or DashboardThresholds()
        self._episode_rows: list[dict] = []
        self._kappa: float | None = None

    def ingest_episode(self, *, cause: str, episode_time: float, steps: int, run_id: str | None = None) -> None:
        self._episode_rows.append(
            {"cause": cause, "episode_time": max(0.0, episode_time), "steps": max(0, steps), "run_id": run_id}
        )

    def ingest_kappa(self, kappa: float) -> None:
        self._kappa = float(kappa)

    def snapshot(self) -> dict:
        total = len(self._episode_rows)
        if total == 0:
            return {
                "episode_count": 0,
                "success_rate": 0.0,
                "corridor_exit_rate": 0.0,
                "p95_episode_time": 0.0,
                "causes": {},
                "alerts": [],
            }

        causes: dict[str, int] = {}
        for row in self._episode_rows:
            causes[row["cause"]] = causes.get(row["cause"], 0) + 1
        success_rate = causes.get("success", 0) / total
        exit_rate = causes.get("corridor_exit", 0) / total
        # episode time only means something for episodes that reached the goal
        times = [row["episode_time"] for row in self._episode_rows if row["cause"] == "success"]
        if len(times) > 1:
            p95 = quantiles(times, n=100, method="inclusive")[94]
        else:
            p95 = times[0] if times else 0.0

        alerts: list[dict[str, str | float]] = []
        if success_rate < self.thresholds.min_success_rate:
            alerts.append({"type": "success_rate", "value": round(success_rate, 4), "threshold": self.thresholds.min_success_rate})
        if exit_rate >= self.thresholds.corridor_exit_rate:
            alerts.append({"type": "corridor_exit_rate", "value": round(exit_rate, 4), "threshold": self.thresholds.corridor_exit_rate})
        if p95 >= self.thresholds.p95_episode_time:
            alerts.append({"type": "p95_episode_time", "value": round(p95, 3), "threshold": self.thresholds.p95_episode_time})
        if self._kappa is not None and self._kappa <= self.thresholds.min_kappa:
            alerts.append({"type": "kappa_collapse", "value": self._kappa, "threshold": self.thresholds.min_kappa})

        return {
            "episode_count": total,
            "success_rate": round(success_rate, 4),
            "corridor_exit_rate": round(exit_rate, 4),
            "p95_episode_time": round(p95, 3),
            "causes": causes,
            "alerts": alerts,
        }
