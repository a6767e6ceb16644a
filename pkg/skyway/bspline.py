"""Uniform cubic B-splines on knots tau_t = t * dt.

Control points p_0..p_n define the curve on [tau_2, tau_n]. On the segment
[tau_m, tau_{m+1}] the active points are p_{m-2}..p_{m+1}, so the value at a
knot is (p_{m-2} + 4 p_{m-1} + p_m) / 6. Derivatives are lower-order splines
on the difference points, evaluated on the same segments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import write_table

_KNOT_TOL = 1e-9


class SplineDomainError(ValueError):
    """Raised for evaluation outside the valid span or too few points."""


@dataclass(frozen=True)
class KinematicState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    def __post_init__(self) -> None:
        for name in ("position", "velocity", "acceleration"):
            value = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def at_rest(cls, position: Sequence[float]) -> "KinematicState":
        return cls(np.asarray(position, dtype=float), np.zeros(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class BSplineTrajectory:
    control_points: np.ndarray
    knot_interval: float

    def __post_init__(self) -> None:
        points = np.array(self.control_points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise SplineDomainError(f"control points must have shape (n, 3), got {points.shape}")
        if not self.knot_interval > 0:
            raise SplineDomainError(f"knot_interval must be positive, got {self.knot_interval}")
        points.setflags(write=False)
        object.__setattr__(self, "control_points", points)

    @property
    def last_index(self) -> int:
        return len(self.control_points) - 1

    def valid_span(self) -> tuple[float, float]:
        if len(self.control_points) < 4:
            raise SplineDomainError(f"need at least 4 control points, got {len(self.control_points)}")
        return 2 * self.knot_interval, self.last_index * self.knot_interval

    def knot_count(self) -> int:
        """Number of knots tau_2..tau_n the curve passes through."""
        return max(0, self.last_index - 1)


# Rows: weights of the active points for powers (1, u, u^2, u^3).
_CUBIC = np.array([[1, 4, 1, 0], [-3, 0, 3, 0], [3, -6, 3, 0], [-1, 3, -3, 1]], dtype=float) / 6.0
_QUADRATIC = np.array([[1, 1, 0], [-2, 2, 0], [1, -2, 1]], dtype=float) / 2.0
_LINEAR = np.array([[1, 0], [-1, 1]], dtype=float)
_BASIS = {3: _CUBIC, 2: _QUADRATIC, 1: _LINEAR}


def basis_weights(degree: int, u: float) -> np.ndarray:
    powers = np.array([u**k for k in range(degree + 1)])
    return powers @ _BASIS[degree]


def derivative_points(points: np.ndarray | Sequence[Sequence[float]], knot_interval: float) -> np.ndarray:
    array = np.asarray(points, dtype=float)
    if len(array) < 2:
        raise SplineDomainError(f"derivative needs at least 2 points, got {len(array)}")
    return np.diff(array, axis=0) / knot_interval


def _segment(traj: BSplineTrajectory, tau: float) -> tuple[int, float]:
    start, end = traj.valid_span()
    if tau < start - _KNOT_TOL or tau > end + _KNOT_TOL:
        raise SplineDomainError(f"tau={tau} outside valid span [{start}, {end}]")
    scaled = min(max(tau, start), end) / traj.knot_interval
    m = min(max(int(math.floor(scaled)), 2), traj.last_index - 1)
    return m, scaled - m


def _evaluate(points: np.ndarray, degree: int, m: int, u: float) -> np.ndarray:
    # Degree d spline on points shifted by (3 - d) differences: segment m uses q_{m-2}..q_{m-2+d}.
    window = points[m - 2 : m - 1 + degree]
    return basis_weights(degree, u) @ window


def eval_position(traj: BSplineTrajectory, tau: float) -> np.ndarray:
    m, u = _segment(traj, tau)
    return _evaluate(traj.control_points, 3, m, u)


def eval_velocity(traj: BSplineTrajectory, tau: float) -> np.ndarray:
    m, u = _segment(traj, tau)
    return _evaluate(derivative_points(traj.control_points, traj.knot_interval), 2, m, u)


def eval_acceleration(traj: BSplineTrajectory, tau: float) -> np.ndarray:
    m, u = _segment(traj, tau)
    velocity = derivative_points(traj.control_points, traj.knot_interval)
    return _evaluate(derivative_points(velocity, traj.knot_interval), 1, m, u)


def jerk_points(points: np.ndarray, knot_interval: float) -> np.ndarray:
    result = np.asarray(points, dtype=float)
    for _ in range(3):
        result = derivative_points(result, knot_interval)
    return result


def eval_jerk(traj: BSplineTrajectory, tau: float) -> np.ndarray:
    m, _ = _segment(traj, tau)
    return jerk_points(traj.control_points, traj.knot_interval)[m - 2]


def max_jerk_between_knots(traj: BSplineTrajectory, t: int) -> float:
    """Jerk magnitude on [tau_t, tau_{t+1}], where it is constant."""
    if not 2 <= t <= traj.last_index - 1:
        raise SplineDomainError(f"knot index {t} outside [2, {traj.last_index - 1}]")
    window = traj.control_points[t - 2 : t + 2]
    return float(np.linalg.norm(jerk_points(window, traj.knot_interval)[0]))


def knot_position(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    return (np.asarray(p0) + 4.0 * np.asarray(p1) + np.asarray(p2)) / 6.0


_INIT_MATRIX_CACHE: dict[float, np.ndarray] = {}


def _init_matrix(knot_interval: float) -> np.ndarray:
    matrix = _INIT_MATRIX_CACHE.get(knot_interval)
    if matrix is None:
        dt = knot_interval
        matrix = np.array(
            [
                [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
                [-1.0 / (2.0 * dt), 0.0, 1.0 / (2.0 * dt)],
                [1.0 / dt**2, -2.0 / dt**2, 1.0 / dt**2],
            ]
        )
        _INIT_MATRIX_CACHE[knot_interval] = matrix
    return matrix


def init_from_state(state: KinematicState, knot_interval: float) -> np.ndarray:
    """First three control points reproducing position, velocity and acceleration at tau_2."""
    rhs = np.vstack([state.position, state.velocity, state.acceleration])
    return np.linalg.solve(_init_matrix(knot_interval), rhs)


def sample_path(traj: BSplineTrajectory, step: float) -> np.ndarray:
    """Rows (tau, x, y, z, |v|, |a|) from tau_2 to the end of the span."""
    start, end = traj.valid_span()
    count = max(1, int(math.floor((end - start) / step + _KNOT_TOL))) + 1
    rows = []
    for tau in np.linspace(start, start + (count - 1) * step, count):
        tau = min(float(tau), end)
        position = eval_position(traj, tau)
        rows.append(
            [tau, *position, np.linalg.norm(eval_velocity(traj, tau)), np.linalg.norm(eval_acceleration(traj, tau))]
        )
    return np.asarray(rows)


def export_control_points(traj: BSplineTrajectory, path: str | Path) -> Path:
    rows = [[i, *point] for i, point in enumerate(traj.control_points)]
    header = [f"knot_interval {traj.knot_interval}", f"control_points {len(rows)}"]
    return write_table(path, ["index", "x", "y", "z"], rows, header)


def export_samples(traj: BSplineTrajectory, path: str | Path, step: float | None = None) -> Path:
    rows = sample_path(traj, step or traj.knot_interval / 10.0)
    header = [f"knot_interval {traj.knot_interval}"]
    return write_table(path, ["tau", "x", "y", "z", "speed", "accel"], rows.tolist(), header)
