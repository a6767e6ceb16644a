from pathlib import Path
import sys

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from skyway.bspline import (
    BSplineTrajectory,
    KinematicState,
    SplineDomainError,
    basis_weights,
    eval_acceleration,
    eval_jerk,
    eval_position,
    eval_velocity,
    export_control_points,
    export_samples,
    init_from_state,
    knot_position,
    max_jerk_between_knots,
    sample_path,
)
from skyway.common import read_table

DT = 0.3


def _de_boor(points: np.ndarray, dt: float, tau: float) -> np.ndarray:
    """Uniform cubic de Boor recursion with knots at multiples of dt, starting 3 below index 0."""
    knots = (np.arange(len(points) + 4) - 1) * dt
    # points p_i live on knots[i]..knots[i+4]; the span index is the largest k with knots[k] <= tau
    k = int(np.searchsorted(knots, tau, side="right") - 1)
    k = min(k, len(points) - 1)
    d = [points[j].copy() for j in range(k - 3, k + 1)]
    for r in range(1, 4):
        for j in range(3, r - 1, -1):
            i = j + k - 3
            alpha = (tau - knots[i]) / (knots[i + 4 - r] - knots[i])
            d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j]
    return d[3]


def _random_traj(seed: int, count: int = 9) -> BSplineTrajectory:
    rng = np.random.default_rng(seed)
    return BSplineTrajectory(rng.uniform(-3.0, 3.0, size=(count, 3)), DT)


def test_basis_weights_partition_unity():
    for u in np.linspace(0.0, 1.0, 11):
        for degree in (1, 2, 3):
            assert basis_weights(degree, u).sum() == pytest.approx(1.0)


def test_position_matches_de_boor_recursion():
    for seed in range(5):
        traj = _random_traj(seed)
        start, end = traj.valid_span()
        for tau in np.linspace(start, end - 1e-9, 37):
            expected = _de_boor(traj.control_points, DT, tau)
            assert np.allclose(eval_position(traj, tau), expected, atol=1e-9)


def test_knots_are_weighted_control_point_averages():
    traj = _random_traj(7)
    p = traj.control_points

    for t in range(2, traj.last_index):
        assert np.allclose(eval_position(traj, t * DT), knot_position(p[t - 2], p[t - 1], p[t]))


def test_valid_span_and_short_curves():
    traj = _random_traj(1, count=6)

    assert traj.valid_span() == (pytest.approx(2 * DT), pytest.approx(5 * DT))
    with pytest.raises(SplineDomainError, match="outside valid span"):
        eval_position(traj, 0.1)
    with pytest.raises(SplineDomainError, match="at least 4"):
        BSplineTrajectory(np.zeros((3, 3)), DT).valid_span()
    with pytest.raises(SplineDomainError, match="shape"):
        BSplineTrajectory(np.zeros((5, 2)), DT)


def test_derivatives_match_finite_differences():
    traj = _random_traj(3)
    h = 1e-5
    for tau in (0.65, 0.8, 1.1, 1.7):
        numeric_v = (eval_position(traj, tau + h) - eval_position(traj, tau - h)) / (2 * h)
        numeric_a = (eval_velocity(traj, tau + h) - eval_velocity(traj, tau - h)) / (2 * h)
        numeric_j = (eval_acceleration(traj, tau + h) - eval_acceleration(traj, tau - h)) / (2 * h)
        assert np.allclose(eval_velocity(traj, tau), numeric_v, atol=1e-5)
        assert np.allclose(eval_acceleration(traj, tau), numeric_a, atol=1e-4)
        assert np.allclose(eval_jerk(traj, tau), numeric_j, atol=1e-3)


def test_jerk_is_constant_between_knots():
    traj = _random_traj(4)
    t = 3
    inside = [eval_jerk(traj, t * DT + f * DT) for f in (0.1, 0.5, 0.9)]

    assert np.allclose(inside[0], inside[1]) and np.allclose(inside[1], inside[2])
    assert max_jerk_between_knots(traj, t) == pytest.approx(float(np.linalg.norm(inside[0])))
    with pytest.raises(SplineDomainError):
        max_jerk_between_knots(traj, traj.last_index)


def test_moving_one_point_only_changes_four_segments():
    traj = _random_traj(5, count=12)
    moved = traj.control_points.copy()
    i = 6
    moved[i] += np.array([0.5, -0.2, 0.3])
    other = BSplineTrajectory(moved, DT)

    start, end = traj.valid_span()
    lo, hi = (i - 1) * DT, (i + 3) * DT
    for tau in np.linspace(start, end, 200):
        change = float(np.linalg.norm(eval_position(traj, tau) - eval_position(other, tau)))
        if tau <= lo - 1e-9 or tau >= hi + 1e-9:
            assert change == 0.0
        elif lo + 0.05 * DT < tau < hi - 0.05 * DT:
            assert change > 1e-9


def test_init_from_state_reproduces_kinematics():
    state = KinematicState(np.array([1.0, -2.0, 1.2]), np.array([3.0, 0.5, -0.4]), np.array([-1.0, 2.0, 0.3]))
    points = init_from_state(state, DT)
    traj = BSplineTrajectory(np.vstack([points, points[-1] + 1.0]), DT)

    assert np.allclose(eval_position(traj, 2 * DT), state.position)
    assert np.allclose(eval_velocity(traj, 2 * DT), state.velocity)
    assert np.allclose(eval_acceleration(traj, 2 * DT), state.acceleration)

    rest = init_from_state(KinematicState.at_rest((0.0, 1.0, 1.0)), DT)
    assert np.allclose(rest, [[0.0, 1.0, 1.0]] * 3)


def test_sample_path_and_exports(tmp_path):
    traj = _random_traj(6, count=7)
    rows = sample_path(traj, DT / 10.0)

    assert rows[0, 0] == pytest.approx(2 * DT)
    assert rows[-1, 0] == pytest.approx(6 * DT)
    assert len(rows) == 41
    assert np.all(rows[:, 4] >= 0)

    columns, body, header = read_table(export_samples(traj, tmp_path / "samples.txt"))
    assert columns == ["tau", "x", "y", "z", "speed", "accel"]
    assert len(body) == 41
    assert header == [f"knot_interval {DT}"]

    columns, body, _ = read_table(export_control_points(traj, tmp_path / "points.txt"))
    assert columns == ["index", "x", "y", "z"]
    assert float(body[3][1]) == pytest.approx(traj.control_points[3, 0], abs=1e-6)
