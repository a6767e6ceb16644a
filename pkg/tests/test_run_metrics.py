from pathlib import Path
from types import SimpleNamespace
import sys
import threading

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from skyway.run_metrics import DashboardThresholds, MetricsCollector, MetricsDashboard


def _episode(cause: str, progress: float = 0.0):
    return SimpleNamespace(success=cause == "success", cause=cause, progress=progress)


def test_collector_counts_and_resets_per_run():
    metrics = MetricsCollector()
    metrics.start_run("first")
    metrics.record_transitions(12)
    metrics.record_transitions(-3)
    metrics.record_episode(_episode("success", 1.0))
    metrics.record_episode(_episode("corridor_exit", 0.4))
    metrics.record_update({"critic_loss": 0.5, "kappa": 0.1, "entropy": 2.0})
    metrics.record_evaluation(0.5, 6.3)

    snapshot = metrics.snapshot()

    assert snapshot["run_id"] == "first"
    assert snapshot["transitions"] == 12
    assert (snapshot["episodes"], snapshot["successes"], snapshot["updates"]) == (2, 1, 1)
    assert snapshot["frontier"] == 1.0
    assert snapshot["causes"] == {"success": 1, "corridor_exit": 1}
    assert (snapshot["kappa"], snapshot["success_rate"], snapshot["episode_time"]) == (0.1, 0.5, 6.3)

    metrics.start_run("second")
    assert metrics.snapshot()["transitions"] == 0
    assert metrics.snapshot()["causes"] == {}


def test_collector_frontier_never_moves_back():
    metrics = MetricsCollector()
    metrics.record_episode(_episode("horizon", 0.7))
    metrics.record_episode(_episode("corridor_exit", 0.2))

    assert metrics.snapshot()["frontier"] == 0.7


def test_collector_is_safe_across_sampler_threads():
    metrics = MetricsCollector()

    def sample() -> None:
        for _ in range(500):
            metrics.record_transitions(1)

    threads = [threading.Thread(target=sample) for _ in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert metrics.snapshot()["transitions"] == 2000


def test_dashboard_alerts_for_success_exits_time_and_kappa():
    dashboard = MetricsDashboard(
        DashboardThresholds(min_success_rate=0.6, corridor_exit_rate=0.25, p95_episode_time=10.0, min_kappa=1e-2)
    )
    dashboard.ingest_episode(cause="success", episode_time=8.0, steps=27)
    dashboard.ingest_episode(cause="success", episode_time=12.0, steps=40)
    dashboard.ingest_episode(cause="corridor_exit", episode_time=2.1, steps=7)
    dashboard.ingest_episode(cause="horizon", episode_time=30.0, steps=100)
    dashboard.ingest_kappa(5e-3)

    snapshot = dashboard.snapshot()

    assert snapshot["episode_count"] == 4
    assert snapshot["success_rate"] == 0.5
    assert snapshot["corridor_exit_rate"] == 0.25
    assert snapshot["p95_episode_time"] == pytest.approx(11.8)
    assert snapshot["causes"] == {"success": 2, "corridor_exit": 1, "horizon": 1}
    alert_types = {alert["type"] for alert in snapshot["alerts"]}
    assert alert_types == {"success_rate", "corridor_exit_rate", "p95_episode_time", "kappa_collapse"}


def test_dashboard_stays_quiet_for_healthy_runs():
    dashboard = MetricsDashboard()
    for _ in range(3):
        dashboard.ingest_episode(cause="success", episode_time=7.0, steps=23)
    dashboard.ingest_kappa(0.05)

    snapshot = dashboard.snapshot()

    assert snapshot["success_rate"] == 1.0
    assert snapshot["p95_episode_time"] == 7.0
    assert snapshot["alerts"] == []


def test_empty_dashboard_reports_zeros():
    snapshot = MetricsDashboard().snapshot()

    assert snapshot == {
        "episode_count": 0,
        "success_rate": 0.0,
        "corridor_exit_rate": 0.0,
        "p95_episode_time": 0.0,
        "causes": {},
        "alerts": [],
    }


def test_single_success_is_its_own_p95():
    dashboard = MetricsDashboard()
    dashboard.ingest_episode(cause="success", episode_time=9.5, steps=32)
    dashboard.ingest_episode(cause="jerk_violation", episode_time=-1.0, steps=-2)

    snapshot = dashboard.snapshot()

    assert snapshot["p95_episode_time"] == 9.5
    assert snapshot["causes"]["jerk_violation"] == 1
