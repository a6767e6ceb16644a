"""Occupancy grids, procedural scenarios and the map file format.

Grids are immutable once built. Every query outside the grid bounds reports
occupied, so nothing downstream can plan its way out of the arena.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .common import log_event

LOGGER = logging.getLogger("skyway.worldmap")

MAP_MAGIC = b"SKYMAP"
MAP_VERSION = 1
TEXT_MAGIC = "# skyway-map"
_HEADER = struct.Struct("<6sH4d3I")

SCENARIO_KINDS = ("curriculum_walls", "benchmark_walls", "uniform_walls", "forest")


class MapFormatError(ValueError):
    """Raised when a map file is truncated or not a skyway map."""


class ScenarioInfeasibleError(RuntimeError):
    """Raised when no feasible map is found within the retry budget."""


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    origin: np.ndarray
    resolution: float
    cells: np.ndarray

    def __post_init__(self) -> None:
        origin = np.array(self.origin, dtype=float).reshape(3)
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 3 or min(cells.shape) < 1:
            raise ValueError(f"cells must be a non-empty 3D array, got shape {cells.shape}")
        if not (math.isfinite(self.resolution) and self.resolution > 0):
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        origin.setflags(write=False)
        cells.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "resolution", float(self.resolution))

    @classmethod
    def empty(cls, dims: Sequence[int], resolution: float, origin: Sequence[float] = (0.0, 0.0, 0.0)) -> "OccupancyGrid":
        return cls(np.asarray(origin, dtype=float), resolution, np.zeros(tuple(int(d) for d in dims), dtype=bool))

    @classmethod
    def from_extent(cls, lower: Sequence[float], upper: Sequence[float], resolution: float) -> "OccupancyGrid":
        lo = np.asarray(lower, dtype=float)
        span = np.asarray(upper, dtype=float) - lo
        dims = np.maximum(1, np.ceil(span / resolution - 1e-9).astype(int))
        return cls.empty(dims, resolution, lo)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.cells.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims, dtype=float) * self.resolution

    def world_to_voxel(self, p: Sequence[float]) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(int)
        return int(idx[0]), int(idx[1]), int(idx[2])

    def voxel_to_world(self, idx: Sequence[int]) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def in_bounds(self, idx: Sequence[int]) -> bool:
        return all(0 <= int(i) < n for i, n in zip(idx, self.dims))

    def occupied_voxel(self, idx: Sequence[int]) -> bool:
        if not self.in_bounds(idx):
            return True
        return bool(self.cells[int(idx[0]), int(idx[1]), int(idx[2])])

    def is_occupied(self, p: Sequence[float]) -> bool:
        return self.occupied_voxel(self.world_to_voxel(p))

    def with_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.origin, self.resolution, cells)

    def same_as(self, other: "OccupancyGrid") -> bool:
        return (
            self.dims == other.dims
            and self.resolution == other.resolution
            and bool(np.array_equal(self.origin, other.origin))
            and bool(np.array_equal(self.cells, other.cells))
        )


def is_occupied(grid: OccupancyGrid, p: Sequence[float]) -> bool:
    return grid.is_occupied(p)


def inflate(grid: OccupancyGrid, voxels: int = 1) -> OccupancyGrid:
    """Dilate obstacles by a cubic structuring element of half-width `voxels`."""
    if voxels <= 0:
        return grid
    structure = np.ones((2 * voxels + 1,) * 3, dtype=bool)
    return grid.with_cells(ndimage.binary_dilation(grid.cells, structure=structure))


def random_free_point(grid: OccupancyGrid, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    for _ in range(max_tries):
        idx = tuple(int(rng.integers(0, n)) for n in grid.dims)
        if not grid.cells[idx]:
            return grid.voxel_to_world(idx)
    raise ScenarioInfeasibleError("no free voxel found; grid is (nearly) fully occupied")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    extent: tuple[tuple[float, float, float], tuple[float, float, float]]
    spacing_near: float = 4.5
    spacing_far: float = 2.75
    gap_size_range: tuple[float, float] = (0.8, 1.6)
    obstacle_count: int = 200
    rng_seed: int = 0
    resolution: float = 0.15
    start: tuple[float, float, float] | None = None
    goal: tuple[float, float, float] | None = None
    inflation_voxels: int = 1
    goal_fraction: float = 1.0
    window_height_min: float = 1.8
    clear_radius: float = 1.0
    course_margin: float = 2.0
    max_retries: int = 20

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {', '.join(SCENARIO_KINDS)}")
        lo, hi = (np.asarray(corner, dtype=float) for corner in self.extent)
        if np.any(hi <= lo):
            raise ValueError(f"extent upper corner must exceed lower corner, got {self.extent}")
        if self.spacing_far > self.spacing_near:
            raise ValueError("spacing_far must not exceed spacing_near")
        if self.spacing_far <= 0:
            raise ValueError("wall spacing must be positive")
        gap_lo, gap_hi = self.gap_size_range
        if not 0 < gap_lo <= gap_hi:
            raise ValueError(f"invalid gap_size_range {self.gap_size_range}")
        if self.obstacle_count < 0:
            raise ValueError("obstacle_count must be non-negative")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not 0 < self.goal_fraction <= 1:
            raise ValueError("goal_fraction must lie in (0, 1]")

    def with_changes(self, **changes: Any) -> "ScenarioSpec":
        return replace(self, **changes)

    def endpoints(self, full_course: bool = False) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = (np.asarray(corner, dtype=float) for corner in self.extent)
        mid = (lo + hi) / 2.0
        z = min(hi[2] - 0.5, lo[2] + 1.2)
        start = np.asarray(self.start, dtype=float) if self.start is not None else np.array([mid[0], lo[1] + 1.0, z])
        goal = np.asarray(self.goal, dtype=float) if self.goal is not None else np.array([mid[0], hi[1] - 1.0, z])
        if not full_course:
            goal = start + (goal - start) * self.goal_fraction
        return start, goal


@dataclass(frozen=True, eq=False)
class Scenario:
    grid: OccupancyGrid
    start: np.ndarray
    goal: np.ndarray
    spec: ScenarioSpec | None = None
    seed: int = -1
    footprints: tuple[dict[str, Any], ...] = ()
    wall_rows: tuple[int, ...] = ()
    inflated: OccupancyGrid | None = field(default=None, repr=False)
    reference: Any = field(default=None, repr=False)


def named_scenario(name: str, seed: int = 0) -> ScenarioSpec:
    """Preset scenario specs used by training and the benchmark."""
    course = ((-10.0, -33.0, 0.0), (10.0, 33.0, 3.0))
    training = ((-5.0, 0.0, 0.0), (5.0, 40.0, 3.0))
    bench_start, bench_goal = (0.0, -32.0, 1.0), (0.0, 32.0, 1.0)
    presets = {
        "forest": ScenarioSpec("forest", course, obstacle_count=200, start=bench_start, goal=bench_goal),
        "sparse_walls": ScenarioSpec("benchmark_walls", course, 5.0, 3.5, start=bench_start, goal=bench_goal),
        "dense_walls": ScenarioSpec("benchmark_walls", course, 4.0, 2.0, start=bench_start, goal=bench_goal),
        "curriculum": ScenarioSpec("curriculum_walls", training, 4.5, 2.75),
        "uniform": ScenarioSpec("uniform_walls", training, 2.75, 2.75),
        "uniform_forest": ScenarioSpec("forest", training, obstacle_count=60),
    }
    key = name.strip().lower()
    if key not in presets:
        raise ValueError(f"unknown scenario {name!r}; expected one of {', '.join(sorted(presets))}")
    return presets[key].with_changes(rng_seed=int(seed))


def _derived_seed(seed: int, attempt: int) -> int:
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), attempt]).generate_state(1, dtype=np.uint64)[0])


def _wall_rows(spec: ScenarioSpec, grid: OccupancyGrid, start: np.ndarray, goal: np.ndarray) -> list[int]:
    res = grid.resolution
    first = grid.world_to_voxel((start[0], start[1] + spec.course_margin, start[2]))[1]
    last = grid.world_to_voxel((goal[0], goal[1] - spec.course_margin, goal[2]))[1]
    last = min(last, grid.dims[1] - 1)
    if spec.kind == "uniform_walls":
        near = far = spec.spacing_far
    else:
        near, far = spec.spacing_near, spec.spacing_far
    rows: list[int] = []
    row = first
    while row <= last:
        rows.append(row)
        fraction = (row - first) / max(1, last - first)
        spacing = near + (far - near) * fraction
        row += max(1, int(round(spacing / res)))
    return rows


def _carve_walls(spec: ScenarioSpec, grid: OccupancyGrid, rows: list[int], rng: np.random.Generator):
    cells = np.zeros(grid.dims, dtype=bool)
    res = grid.resolution
    nx, _, nz = grid.dims
    lo, hi = grid.origin, grid.upper
    xs = grid.origin[0] + (np.arange(nx) + 0.5) * res
    zs = grid.origin[2] + (np.arange(nz) + 0.5) * res
    footprints: list[dict[str, Any]] = []
    for row in rows:
        slab = np.ones((nx, nz), dtype=bool)
        gaps = []
        for _ in range(int(rng.integers(1, 4))):
            width = float(rng.uniform(*spec.gap_size_range))
            cx = float(rng.uniform(lo[0] + width / 2 + 0.5, hi[0] - width / 2 - 0.5))
            if rng.random() < 0.5:
                z_lo, z_hi = lo[2], hi[2]
            else:
                height = float(rng.uniform(min(spec.window_height_min, hi[2] - lo[2]), hi[2] - lo[2]))
                cz = float(rng.uniform(lo[2] + height / 2, hi[2] - height / 2))
                z_lo, z_hi = cz - height / 2, cz + height / 2
            open_x = np.abs(xs - cx) <= width / 2
            open_z = (zs >= z_lo) & (zs <= z_hi)
            slab[np.ix_(open_x, open_z)] = False
            gaps.append({"x": cx, "width": width, "z_lo": z_lo, "z_hi": z_hi})
        cells[:, row, :] = slab
        footprints.append({"shape": "wall", "y": float(grid.voxel_to_world((0, row, 0))[1]), "gaps": gaps})
    return cells, footprints


def _plant_forest(spec: ScenarioSpec, grid: OccupancyGrid, start: np.ndarray, goal: np.ndarray, rng: np.random.Generator):
    nx, ny, nz = grid.dims
    res = grid.resolution
    xs = grid.origin[0] + (np.arange(nx) + 0.5) * res
    ys = grid.origin[1] + (np.arange(ny) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    plan = np.zeros((nx, ny), dtype=bool)
    lo, hi = grid.origin, grid.upper
    footprints: list[dict[str, Any]] = []
    attempts = 0
    while len(footprints) < spec.obstacle_count:
        attempts += 1
        if attempts > 200 * max(1, spec.obstacle_count):
            raise ScenarioInfeasibleError(f"could only place {len(footprints)} of {spec.obstacle_count} obstacles")
        if rng.random() < 0.7:
            shape, inner, outer = "cylinder", 0.0, float(rng.uniform(0.3, 0.8))
        else:
            inner = float(rng.uniform(0.6, 1.0))
            shape, outer = "ring", inner + 0.25
        center = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
        keep_out = outer + spec.clear_radius
        if min(np.linalg.norm(center - start[:2]), np.linalg.norm(center - goal[:2])) < keep_out:
            continue
        distance = np.hypot(gx - center[0], gy - center[1])
        plan |= (distance <= outer) & (distance >= inner)
        footprints.append({"shape": shape, "x": float(center[0]), "y": float(center[1]), "inner": inner, "outer": outer})
    cells = np.repeat(plan[:, :, None], nz, axis=2)
    return cells, footprints


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """Build a feasible scenario; retries with derived seeds until A* succeeds."""
    from .pathsearch import InvalidEndpointError, NoPathError, astar_3d

    spec.validate()
    lo, hi = spec.extent
    base = OccupancyGrid.from_extent(lo, hi, spec.resolution)
    start, goal = spec.endpoints()
    for attempt in range(spec.max_retries):
        seed = _derived_seed(spec.rng_seed, attempt)
        rng = np.random.default_rng(seed)
        rows: list[int] = []
        if spec.kind == "forest":
            cells, footprints = _plant_forest(spec, base, start, goal, rng)
        else:
            rows = _wall_rows(spec, base, start, spec.endpoints(full_course=True)[1])
            cells, footprints = _carve_walls(spec, base, rows, rng)
        grid = base.with_cells(cells)
        inflated = inflate(grid, spec.inflation_voxels)
        try:
            path = astar_3d(inflated, start, goal)
        except (NoPathError, InvalidEndpointError) as error:
            LOGGER.warning("Scenario %s seed %s infeasible (attempt %s): %s", spec.kind, seed, attempt + 1, error)
            continue
        log_event("scenario.generated", kind=spec.kind, seed=seed, attempt=attempt + 1, obstacles=len(footprints))
        return Scenario(grid, start, goal, spec, seed, tuple(footprints), tuple(rows), inflated, path)
    raise ScenarioInfeasibleError(f"no feasible {spec.kind} map after {spec.max_retries} attempts (seed {spec.rng_seed})")


def export_map(grid: OccupancyGrid, path: str | Path, *, text: bool = False) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        if text:
            target.write_text(_to_text(grid), encoding="utf-8")
        else:
            header = _HEADER.pack(MAP_MAGIC, MAP_VERSION, *grid.origin, grid.resolution, *grid.dims)
            target.write_bytes(header + np.packbits(grid.cells.ravel()).tobytes())
    except OSError as error:
        raise OSError(f"could not write map {target}: {error}") from error
    return target


def _to_text(grid: OccupancyGrid) -> str:
    nx, ny, nz = grid.dims
    lines = [
        f"{TEXT_MAGIC} v{MAP_VERSION}",
        "origin " + " ".join(repr(float(v)) for v in grid.origin),
        f"resolution {grid.resolution!r}",
        f"dims {nx} {ny} {nz}",
    ]
    for k in range(nz):
        lines.append(f"z {k}")
        for j in range(ny):
            lines.append("".join("#" if grid.cells[i, j, k] else "." for i in range(nx)))
    return "\n".join(lines) + "\n"


def _from_text(source: Path, content: str) -> OccupancyGrid:
    lines = content.splitlines()
    try:
        origin = [float(v) for v in lines[1].split()[1:4]]
        resolution = float(lines[2].split()[1])
        nx, ny, nz = (int(v) for v in lines[3].split()[1:4])
        cells = np.zeros((nx, ny, nz), dtype=bool)
        cursor = 4
        for k in range(nz):
            if lines[cursor].split() != ["z", str(k)]:
                raise MapFormatError(f"{source}: expected slice header 'z {k}'")
            for j in range(ny):
                row = lines[cursor + 1 + j]
                if len(row) != nx:
                    raise MapFormatError(f"{source}: slice {k} row {j} has {len(row)} cells, expected {nx}")
                cells[:, j, k] = [ch == "#" for ch in row]
            cursor += ny + 1
    except (IndexError, ValueError) as error:
        if isinstance(error, MapFormatError):
            raise
        raise MapFormatError(f"{source}: malformed text map ({error})") from error
    return OccupancyGrid(np.asarray(origin), resolution, cells)


def import_map(path: str | Path) -> OccupancyGrid:
    source = Path(path)
    try:
        payload = source.read_bytes()
    except OSError as error:
        raise OSError(f"could not read map {source}: {error}") from error
    if payload.startswith(TEXT_MAGIC.encode()):
        try:
            text = payload.decode("utf-8")
        except UnicodeDecodeError as error:
            raise MapFormatError(f"{source}: text map is not valid UTF-8 ({error.reason} at byte {error.start})") from error
        return _from_text(source, text)
    if len(payload) < _HEADER.size:
        raise MapFormatError(f"{source}: truncated header ({len(payload)} bytes)")
    magic, version, ox, oy, oz, resolution, nx, ny, nz = _HEADER.unpack_from(payload)
    if magic != MAP_MAGIC:
        raise MapFormatError(f"{source}: not a skyway map (magic {magic!r})")
    if version != MAP_VERSION:
        raise MapFormatError(f"{source}: unsupported map version {version}")
    count = nx * ny * nz
    body = payload[_HEADER.size:]
    if len(body) < (count + 7) // 8:
        raise MapFormatError(f"{source}: truncated occupancy payload ({len(body)} of {(count + 7) // 8} bytes)")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=count).astype(bool)
    try:
        return OccupancyGrid(np.array([ox, oy, oz]), resolution, bits.reshape((nx, ny, nz)))
    except ValueError as error:
        raise MapFormatError(f"{source}: {error}") from error
