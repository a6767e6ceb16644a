from pathlib import Path
import heapq
import itertools
import math
import sys

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from skyway.common import read_table
from skyway.pathsearch import (
    InvalidEndpointError,
    NoPathError,
    ReferencePolyline,
    astar_3d,
    export_polyline,
    path_length,
    segment_collision,
    simplify_polyline,
    split_long_segments,
)
from skyway.worldmap import OccupancyGrid

RES = 0.5


def _grid(cells: np.ndarray) -> OccupancyGrid:
    return OccupancyGrid(np.zeros(3), RES, cells)


def _random_cells(seed: int, dims=(9, 9, 4), density: float = 0.25) -> np.ndarray:
    return np.random.default_rng(seed).random(dims) < density


def _dijkstra(cells: np.ndarray, source, target) -> float:
    """Same 26-neighbour graph with the no-corner-cutting rule, searched without a heuristic."""
    dims = cells.shape
    best = {source: 0.0}
    queue = [(0.0, source)]
    while queue:
        cost, node = heapq.heappop(queue)
        if node == target:
            return cost
        if cost > best[node]:
            continue
        for delta in itertools.product((-1, 0, 1), repeat=3):
            if delta == (0, 0, 0):
                continue
            nxt = tuple(n + d for n, d in zip(node, delta))
            if not all(0 <= c < s for c, s in zip(nxt, dims)) or cells[nxt]:
                continue
            axes = [a for a in range(3) if delta[a]]
            corner_blocked = False
            for size in range(1, len(axes)):
                for subset in itertools.combinations(axes, size):
                    corner = tuple(node[a] + (delta[a] if a in subset else 0) for a in range(3))
                    corner_blocked |= bool(cells[corner])
            if corner_blocked:
                continue
            step = cost + math.sqrt(len(axes))
            if step < best.get(nxt, math.inf):
                best[nxt] = step
                heapq.heappush(queue, (step, nxt))
    return math.inf


def _center(idx) -> np.ndarray:
    return (np.asarray(idx, dtype=float) + 0.5) * RES


def test_straight_line_in_empty_grid():
    grid = _grid(np.zeros((10, 3, 3), dtype=bool))

    path = astar_3d(grid, _center((0, 1, 1)), _center((9, 1, 1)))

    assert path.cost == pytest.approx(9 * RES)
    assert path.voxels[0] == (0, 1, 1) and path.voxels[-1] == (9, 1, 1)
    assert len(path.voxels) == 10


def test_astar_cost_matches_dijkstra_on_random_grids():
    checked = 0
    for seed in range(12):
        cells = _random_cells(seed)
        source, target = (0, 0, 0), (8, 8, 3)
        cells[source] = cells[target] = False
        expected = _dijkstra(cells, source, target)
        grid = _grid(cells)
        if math.isinf(expected):
            with pytest.raises(NoPathError):
                astar_3d(grid, _center(source), _center(target))
            continue
        path = astar_3d(grid, _center(source), _center(target))
        assert path.cost == pytest.approx(expected * RES)
        for a, b in zip(path.voxels[:-1], path.voxels[1:]):
            assert max(abs(i - j) for i, j in zip(a, b)) == 1
            assert not cells[b]
        checked += 1
    assert checked >= 4


def test_no_corner_cutting_between_diagonal_blocks():
    cells = np.zeros((2, 2, 1), dtype=bool)
    cells[1, 0, 0] = cells[0, 1, 0] = True
    grid = _grid(cells)

    with pytest.raises(NoPathError):
        astar_3d(grid, _center((0, 0, 0)), _center((1, 1, 0)))


def test_invalid_endpoints_are_rejected():
    cells = np.zeros((4, 4, 2), dtype=bool)
    cells[3, 3, 1] = True
    grid = _grid(cells)

    with pytest.raises(InvalidEndpointError, match="goal .* occupied"):
        astar_3d(grid, _center((0, 0, 0)), _center((3, 3, 1)))
    with pytest.raises(InvalidEndpointError, match="start .* outside"):
        astar_3d(grid, (-1.0, 0.2, 0.2), _center((1, 1, 1)))


def test_sealed_wall_has_no_path():
    cells = np.zeros((6, 6, 3), dtype=bool)
    cells[3, :, :] = True

    with pytest.raises(NoPathError):
        astar_3d(_grid(cells), _center((0, 2, 1)), _center((5, 2, 1)))


def _dense_hits(grid: OccupancyGrid, a: np.ndarray, b: np.ndarray, count: int) -> bool:
    points = a + (b - a) * np.linspace(0.0, 1.0, count)[:, None]
    idx = np.floor((points - grid.origin) / grid.resolution).astype(int)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    if not inside.all():
        return True
    return bool(grid.cells[idx[:, 0], idx[:, 1], idx[:, 2]].any())


def test_segment_collision_agrees_with_dense_sampling():
    rng = np.random.default_rng(5)
    agree = total = 0
    for seed in range(6):
        grid = _grid(_random_cells(seed, (8, 8, 4), 0.15))
        upper = np.asarray(grid.dims) * RES
        for _ in range(40):
            a = rng.uniform(0.01, upper - 0.01)
            b = rng.uniform(0.01, upper - 0.01)
            count = int(np.linalg.norm(b - a) / (RES / 1000.0)) + 2
            exact = segment_collision(grid, a, b)
            sampled = _dense_hits(grid, a, b, count)
            if sampled:
                assert exact
            agree += exact == sampled
            total += 1
    assert agree / total >= 0.99


def test_segment_collision_counts_grazed_corners():
    cells = np.zeros((2, 2, 1), dtype=bool)
    cells[1, 0, 0] = True
    grid = _grid(cells)

    assert segment_collision(grid, (0.25, 0.25, 0.25), (0.75, 0.75, 0.25))
    assert not segment_collision(grid, (0.1, 0.25, 0.25), (0.1, 0.9, 0.25))
    assert segment_collision(grid, (0.25, 0.25, 0.25), (0.25, 1.5, 0.25))


def test_simplify_keeps_endpoints_and_stays_collision_free():
    for seed in range(8):
        cells = _random_cells(seed + 20, (10, 10, 3), 0.2)
        cells[0, 0, 1] = cells[9, 9, 1] = False
        grid = _grid(cells)
        try:
            path = astar_3d(grid, _center((0, 0, 1)), _center((9, 9, 1)))
        except NoPathError:
            continue
        poly = simplify_polyline(grid, path)
        assert np.allclose(poly.vertices[0], path.waypoints[0])
        assert np.allclose(poly.vertices[-1], path.waypoints[-1])
        assert len(poly.vertices) <= len(path.waypoints)
        for a, b in zip(poly.vertices[:-1], poly.vertices[1:]):
            assert not segment_collision(grid, a, b)
        assert poly.total_length() <= path_length(path.waypoints) + 1e-9


def test_simplify_collapses_straight_paths():
    grid = _grid(np.zeros((10, 3, 3), dtype=bool))
    path = astar_3d(grid, _center((0, 1, 1)), _center((9, 1, 1)))

    poly = simplify_polyline(grid, path)

    assert poly.segment_count == 1
    assert poly.total_length() == pytest.approx(9 * RES)


def test_split_long_segments_bounds_horizontal_length():
    poly = ReferencePolyline(np.array([[0.0, 0.0, 1.0], [7.0, 0.0, 1.0], [7.0, 2.0, 2.0], [7.0, 2.0, 2.5]]))

    split = split_long_segments(poly, 3.0)

    assert np.all(split.lengths_xy <= 3.0 + 1e-9)
    assert split.segment_count == 3 + 1 + 1
    assert split.total_length() == pytest.approx(poly.total_length())
    with pytest.raises(ValueError, match="max_len"):
        split_long_segments(poly, 0.0)


def test_polyline_needs_two_vertices_and_exports(tmp_path):
    with pytest.raises(ValueError, match="two vertices"):
        ReferencePolyline(np.zeros((1, 3)))

    poly = ReferencePolyline(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]))
    columns, rows, header = read_table(export_polyline(poly, tmp_path / "poly.txt"))

    assert columns == ["index", "x", "y", "z"]
    assert len(rows) == 2
    assert header == ["vertices 2", "length 5.000000"]


def test_simplify_accepts_raw_waypoints():
    grid = _grid(np.zeros((6, 6, 2), dtype=bool))
    points = np.array([_center((0, 0, 0)), _center((1, 1, 0)), _center((2, 2, 0))])

    poly = simplify_polyline(grid, points)

    assert poly.segment_count == 1
