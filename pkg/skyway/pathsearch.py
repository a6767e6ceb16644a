"""3D A* over occupancy grids, polyline simplification and segment checks.

Diagonal moves may not cut corners: every voxel of the block spanned by a
move must be free, which is the same rule `segment_collision` applies to a
segment passing exactly through shared voxel edges or corners.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import write_table
from .worldmap import OccupancyGrid

_TIE_TOL = 1e-12


class NoPathError(RuntimeError):
    """Raised when the goal is unreachable from the start."""


class InvalidEndpointError(ValueError):
    """Raised when start or goal is occupied or outside the grid."""


@dataclass(frozen=True, eq=False)
class VoxelPath:
    waypoints: np.ndarray
    voxels: tuple[tuple[int, int, int], ...]
    cost: float


@dataclass(frozen=True, eq=False)
class ReferencePolyline:
    vertices: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(vertices) < 2:
            raise ValueError("a polyline needs at least two vertices")
        vertices.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)

    @property
    def segment_count(self) -> int:
        return len(self.vertices) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    @property
    def lengths_xy(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.vertices[:, :2], axis=0), axis=1)

    def total_length(self) -> float:
        return float(self.lengths.sum())


def _moves() -> list[tuple[tuple[int, int, int], float, tuple[tuple[int, int, int], ...]]]:
    moves = []
    for delta in itertools.product((-1, 0, 1), repeat=3):
        if delta == (0, 0, 0):
            continue
        axes = [a for a in range(3) if delta[a]]
        grazed = []
        for size in range(1, len(axes)):
            for subset in itertools.combinations(axes, size):
                grazed.append(tuple(delta[a] if a in subset else 0 for a in range(3)))
        moves.append((delta, math.sqrt(len(axes)), tuple(grazed)))
    return moves


MOVES = _moves()
MOVE_STEPS = np.array([step for _, step, _ in MOVES])
_OCTILE = np.array([1.0, math.sqrt(2.0) - 1.0, math.sqrt(3.0) - math.sqrt(2.0)])


def path_length(points: np.ndarray | Sequence[Sequence[float]]) -> float:
    array = np.asarray(points, dtype=float)
    if len(array) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(array, axis=0), axis=1).sum())


def _move_offsets(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Flat neighbour offsets and, per move, the offsets of the voxels its corner would graze."""
    sx, sy = shape[1] * shape[2], shape[2]

    def offset(delta: tuple[int, int, int]) -> int:
        return delta[0] * sx + delta[1] * sy + delta[2]

    offsets = np.array([offset(delta) for delta, _, _ in MOVES], dtype=np.int64)
    # unused slots point at the voxel itself, which is always free when expanded
    corners = np.zeros((len(MOVES), max(len(grazed) for _, _, grazed in MOVES)), dtype=np.int64)
    for m, (_, _, grazed) in enumerate(MOVES):
        corners[m, : len(grazed)] = [offset(corner) for corner in grazed]
    return offsets, corners


def _octile_heuristic(shape: tuple[int, int, int], goal: tuple[int, int, int]) -> np.ndarray:
    dx, dy, dz = (np.abs(np.arange(n) - g).astype(float) for n, g in zip(shape, goal))
    dx, dy, dz = np.broadcast_arrays(dx[:, None, None], dy[None, :, None], dz[None, None, :])
    high = np.maximum(np.maximum(dx, dy), dz)
    low = np.minimum(np.minimum(dx, dy), dz)
    middle = dx + dy + dz - high - low
    return (_OCTILE[0] * high + _OCTILE[1] * middle + _OCTILE[2] * low).ravel()


def astar_3d(grid: OccupancyGrid, start: Sequence[float], goal: Sequence[float]) -> VoxelPath:
    s_idx, g_idx = grid.world_to_voxel(start), grid.world_to_voxel(goal)
    for label, idx in (("start", s_idx), ("goal", g_idx)):
        if grid.occupied_voxel(idx):
            where = "outside the grid" if not grid.in_bounds(idx) else "in an occupied voxel"
            raise InvalidEndpointError(f"{label} {tuple(np.round(np.asarray(start if label == 'start' else goal), 3))} is {where}")
    # one blocked voxel of padding on every face keeps neighbour offsets in range
    blocked = np.pad(np.asarray(grid.cells, dtype=bool), 1, constant_values=True)
    shape = blocked.shape
    free = ~blocked.ravel()
    offsets, corners = _move_offsets(shape)
    source = int(np.ravel_multi_index(tuple(i + 1 for i in s_idx), shape))
    target = int(np.ravel_multi_index(tuple(i + 1 for i in g_idx), shape))
    h = _octile_heuristic(shape, tuple(i + 1 for i in g_idx))

    best = np.full(blocked.size, np.inf)
    parent = np.full(blocked.size, -1, dtype=np.int64)
    closed = np.zeros(blocked.size, dtype=bool)
    best[source] = 0.0
    # ties on f go to the voxel closer to the goal
    frontier = [(h[source], h[source], source)]
    reached = False
    while frontier:
        _, _, node = heapq.heappop(frontier)
        if closed[node]:
            continue
        if node == target:
            reached = True
            break
        closed[node] = True
        legal = free[node + offsets] & free[node + corners].all(axis=1)
        neighbors = node + offsets[legal]
        g_new = best[node] + MOVE_STEPS[legal]
        better = (g_new < best[neighbors]) & ~closed[neighbors]
        if not better.any():
            continue
        neighbors, g_new = neighbors[better], g_new[better]
        best[neighbors] = g_new
        parent[neighbors] = node
        h_new = h[neighbors]
        for item in zip((g_new + h_new).tolist(), h_new.tolist(), neighbors.tolist()):
            heapq.heappush(frontier, item)
    if not reached:
        raise NoPathError(f"goal {tuple(np.round(np.asarray(goal), 3))} unreachable from start")
    chain = [target]
    while parent[chain[-1]] != -1:
        chain.append(int(parent[chain[-1]]))
    voxels = np.column_stack(np.unravel_index(np.asarray(chain[::-1]), shape)) - 1
    waypoints = grid.origin + (voxels + 0.5) * grid.resolution
    return VoxelPath(waypoints, tuple(tuple(int(i) for i in v) for v in voxels), float(best[target]) * grid.resolution)


def segment_collision(grid: OccupancyGrid, a: Sequence[float], b: Sequence[float]) -> bool:
    """Exact voxel traversal; touching an occupied voxel edge or corner counts as a hit."""
    cells = grid.cells
    dims = grid.dims

    def hit(idx: Sequence[int]) -> bool:
        for i, n in zip(idx, dims):
            if not 0 <= i < n:
                return True
        return bool(cells[idx[0], idx[1], idx[2]])

    start = ((np.asarray(a, dtype=float) - grid.origin) / grid.resolution).tolist()
    end = ((np.asarray(b, dtype=float) - grid.origin) / grid.resolution).tolist()
    current = [math.floor(c) for c in start]
    if hit(current):
        return True
    step = [0, 0, 0]
    t_max = [math.inf] * 3
    t_delta = [math.inf] * 3
    for axis in range(3):
        delta = end[axis] - start[axis]
        if delta > 0:
            step[axis] = 1
            t_max[axis] = (current[axis] + 1 - start[axis]) / delta
            t_delta[axis] = 1.0 / delta
        elif delta < 0:
            step[axis] = -1
            t_max[axis] = (start[axis] - current[axis]) / -delta
            t_delta[axis] = -1.0 / delta
    while True:
        t_next = min(t_max)
        if t_next > 1.0:
            return False
        tied = [axis for axis in range(3) if t_max[axis] - t_next <= _TIE_TOL]
        for size in range(1, len(tied)):
            for subset in itertools.combinations(tied, size):
                corner = list(current)
                for axis in subset:
                    corner[axis] += step[axis]
                if hit(corner):
                    return True
        for axis in tied:
            current[axis] += step[axis]
            t_max[axis] += t_delta[axis]
        if hit(current):
            return True


def simplify_polyline(grid: OccupancyGrid, path: VoxelPath | np.ndarray) -> ReferencePolyline:
    """Greedy longest collision-free segments from a moving local start."""
    points = path.waypoints if isinstance(path, VoxelPath) else np.asarray(path, dtype=float)
    last = len(points) - 1
    vertices = [points[0]]
    anchor = 0
    for i in range(2, last + 1):
        if segment_collision(grid, points[anchor], points[i]):
            vertices.append(points[i - 1])
            anchor = i - 1
    vertices.append(points[last])
    return ReferencePolyline(np.asarray(vertices))


def split_long_segments(poly: ReferencePolyline, max_len: float) -> ReferencePolyline:
    if not max_len > 0:
        raise ValueError(f"max_len must be positive, got {max_len}")
    vertices = [poly.vertices[0]]
    for a, b, length_xy in zip(poly.vertices[:-1], poly.vertices[1:], poly.lengths_xy):
        pieces = max(1, int(math.ceil(length_xy / max_len - 1e-12)))
        for k in range(1, pieces):
            vertices.append(a + (b - a) * (k / pieces))
        vertices.append(b)
    return ReferencePolyline(np.asarray(vertices))


def export_polyline(poly: ReferencePolyline, path: str | Path) -> Path:
    rows = [[i, *vertex] for i, vertex in enumerate(poly.vertices)]
    header = [f"vertices {len(rows)}", f"length {poly.total_length():.6f}"]
    return write_table(path, ["index", "x", "y", "z"], rows, header)
