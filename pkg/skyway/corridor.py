"""Safe flight corridors around the reference polyline.

Each sub-corridor is a horizontal slab (z_inf, z_sup) around one polyline
segment, split by the segment's vertical plane into a left part of width
`width_left` and a right part of width `width_right`. Sub-corridor indices
are 1-based: SFC_i spans vertices i-1 and i.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .common import write_table
from .pathsearch import ReferencePolyline
from .worldmap import OccupancyGrid

LOGGER = logging.getLogger("skyway.corridor")

_XY_EPS = 1e-9
_BAND_EPS = 1e-9
_HALF_DIAGONAL = math.sqrt(2.0) / 2.0


class CorridorError(RuntimeError):
    """Raised for degenerate segments or when no z-band yields positive widths."""


@dataclass(frozen=True)
class CorridorConfig:
    flight_band: tuple[float, float] = (0.2, 3.0)
    band_heights: tuple[float, ...] = (2.0, 1.5, 1.0)
    band_step: float = 0.25
    max_width: float = 4.0
    fallback_width: float = 0.05
    split_length: float = 3.0
    window: int = 9

    def validate(self) -> None:
        lo, hi = self.flight_band
        if not lo < hi:
            raise ValueError(f"flight band must be increasing, got {self.flight_band}")
        if self.max_width <= 0 or self.fallback_width <= 0 or self.band_step <= 0:
            raise ValueError("corridor widths and band step must be positive")
        if self.window < 1:
            raise ValueError("window must cover at least one sub-corridor")


@dataclass(frozen=True, eq=False)
class SubCorridor:
    start: np.ndarray
    end: np.ndarray
    normal: np.ndarray
    width_left: float
    width_right: float
    z_inf: float
    z_sup: float
    fallback: bool = False

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    def distance_xy(self, p: Sequence[float]) -> float:
        return float(_distance_xy(np.asarray(p, dtype=float)[None, :2], self.start[:2], self.end[:2])[0])

    def contains(self, p: Sequence[float]) -> bool:
        point = np.asarray(p, dtype=float)
        if not self.z_inf < point[2] < self.z_sup:
            return False
        side = float(np.dot(point[:2] - self.end[:2], self.normal[:2]))
        width = self.width_left if side >= 0 else self.width_right
        return self.distance_xy(point) < width

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        side = (pts[:, :2] - self.end[:2]) @ self.normal[:2]
        width = np.where(side >= 0, self.width_left, self.width_right)
        inside_z = (pts[:, 2] > self.z_inf) & (pts[:, 2] < self.z_sup)
        return inside_z & (_distance_xy(pts[:, :2], self.start[:2], self.end[:2]) < width)


@dataclass(frozen=True, eq=False)
class SafeFlightCorridor:
    sub_corridors: tuple[SubCorridor, ...]
    polyline: ReferencePolyline
    config: CorridorConfig = field(default_factory=CorridorConfig)

    def __len__(self) -> int:
        return len(self.sub_corridors)

    def get(self, index: int) -> SubCorridor:
        if not 1 <= index <= len(self.sub_corridors):
            raise IndexError(f"sub-corridor index {index} outside [1, {len(self.sub_corridors)}]")
        return self.sub_corridors[index - 1]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([sc.length for sc in self.sub_corridors])

    @property
    def fallback_count(self) -> int:
        return sum(1 for sc in self.sub_corridors if sc.fallback)


def _distance_xy(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    direction = b - a
    span = float(direction @ direction)
    if span <= _XY_EPS**2:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip(((points - a) @ direction) / span, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * direction), axis=1)


def segment_normal(a: Sequence[float], b: Sequence[float]) -> np.ndarray:
    """Horizontal left normal of the segment a -> b."""
    start, end = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    length_xy = math.hypot(end[0] - start[0], end[1] - start[1])
    if length_xy <= _XY_EPS:
        raise CorridorError(f"segment {start.tolist()} -> {end.tolist()} is vertical; normal undefined")
    return np.array([start[1] - end[1], end[0] - start[0], 0.0]) / length_xy


class CorridorBuilder:
    """Per-map width queries; caches one KD-tree of obstacle columns per z-band."""

    def __init__(self, grid: OccupancyGrid, config: CorridorConfig | None = None) -> None:
        self.grid = grid
        self.config = config or CorridorConfig()
        self.config.validate()
        self.bands = self._candidate_bands()
        self._trees: dict[tuple[float, float], cKDTree] = {}
        self._ring = self._boundary_ring()

    def _candidate_bands(self) -> list[tuple[float, float]]:
        grid_lo, grid_hi = self.grid.origin[2], self.grid.upper[2]
        lo = max(self.config.flight_band[0], grid_lo)
        hi = min(self.config.flight_band[1], grid_hi)
        if not lo < hi:
            raise CorridorError(f"flight band {self.config.flight_band} does not intersect grid z range")
        bands = [(lo, hi)]
        for height in self.config.band_heights:
            if height >= hi - lo:
                continue
            z = lo
            while z + height <= hi + _BAND_EPS:
                bands.append((z, min(z + height, hi)))
                z += self.config.band_step
        return bands

    def _boundary_ring(self) -> np.ndarray:
        nx, ny, _ = self.grid.dims
        xs = np.arange(-1, nx + 1)
        ys = np.arange(-1, ny + 1)
        ring = np.concatenate(
            [
                np.stack([xs, np.full_like(xs, -1)], axis=1),
                np.stack([xs, np.full_like(xs, ny)], axis=1),
                np.stack([np.full_like(ys, -1), ys], axis=1),
                np.stack([np.full_like(ys, nx), ys], axis=1),
            ]
        )
        return self.grid.origin[:2] + (ring + 0.5) * self.grid.resolution

    def band_voxels(self, band: tuple[float, float]) -> tuple[int, int]:
        """Index range [k_lo, k_hi] of voxel layers whose cubes overlap the open band."""
        oz, res = self.grid.origin[2], self.grid.resolution
        k_lo = int(math.floor((band[0] - oz) / res - _BAND_EPS))
        k_hi = int(math.ceil((band[1] - oz) / res + _BAND_EPS)) - 1
        return max(0, k_lo), min(self.grid.dims[2] - 1, k_hi)

    def obstacle_columns(self, band: tuple[float, float]) -> np.ndarray:
        k_lo, k_hi = self.band_voxels(band)
        mask = self.grid.cells[:, :, k_lo : k_hi + 1].any(axis=2)
        ix, iy = np.nonzero(mask)
        centers = self.grid.origin[:2] + (np.stack([ix, iy], axis=1) + 0.5) * self.grid.resolution
        return np.concatenate([centers, self._ring])

    def _tree(self, band: tuple[float, float]) -> cKDTree:
        tree = self._trees.get(band)
        if tree is None:
            tree = cKDTree(self.obstacle_columns(band))
            self._trees[band] = tree
        return tree

    def widths(self, a: np.ndarray, b: np.ndarray, normal: np.ndarray, band: tuple[float, float]) -> tuple[float, float]:
        res, cap = self.grid.resolution, self.config.max_width
        tree = self._tree(band)
        mid = (a[:2] + b[:2]) / 2.0
        radius = float(np.linalg.norm(b[:2] - a[:2])) / 2.0 + cap + res
        hits = tree.query_ball_point(mid, radius)
        if not hits:
            return cap, cap
        columns = tree.data[hits]
        distance = _distance_xy(columns, a[:2], b[:2])
        side = (columns - b[:2]) @ normal[:2]
        # a column whose cube straddles the plane bounds both sides
        reach = res * _HALF_DIAGONAL
        return (
            _clearance(distance[side >= -reach], res, cap),
            _clearance(distance[side <= reach], res, cap),
        )

    def build(self, a: Sequence[float], b: Sequence[float], normal: np.ndarray | None = None) -> SubCorridor:
        start, end = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if normal is None:
            normal = segment_normal(start, end)
        z_min, z_max = min(start[2], end[2]), max(start[2], end[2])
        best: tuple[float, tuple[float, float], tuple[float, float]] | None = None
        for band in self.bands:
            if not band[0] < z_min or not z_max < band[1]:
                continue
            left, right = self.widths(start, end, normal, band)
            if left <= 0 or right <= 0:
                continue
            score = (band[1] - band[0]) * (left + right)
            if best is None or score > best[0]:
                best = (score, band, (left, right))
        if best is None:
            raise CorridorError(f"no z-band gives positive widths around {start.tolist()} -> {end.tolist()}")
        _, band, (left, right) = best
        return SubCorridor(start, end, normal, left, right, band[0], band[1])

    def fallback(self, a: Sequence[float], b: Sequence[float], normal: np.ndarray) -> SubCorridor:
        start, end = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        margin = self.grid.resolution / 2.0
        width = self.config.fallback_width
        return SubCorridor(
            start, end, normal, width, width,
            min(start[2], end[2]) - margin, max(start[2], end[2]) + margin, fallback=True,
        )


def _clearance(distances: np.ndarray, resolution: float, cap: float) -> float:
    # Widths stop at the nearest column cube; zero rejects the band.
    if distances.size == 0:
        return cap
    return max(0.0, min(cap, float(distances.min()) - resolution * _HALF_DIAGONAL))


def build_subcorridor(
    grid: OccupancyGrid,
    a: Sequence[float],
    b: Sequence[float],
    config: CorridorConfig | None = None,
    builder: CorridorBuilder | None = None,
) -> SubCorridor:
    return (builder or CorridorBuilder(grid, config)).build(a, b)


def build_corridor(
    grid: OccupancyGrid,
    poly: ReferencePolyline,
    config: CorridorConfig | None = None,
    builder: CorridorBuilder | None = None,
) -> SafeFlightCorridor:
    builder = builder or CorridorBuilder(grid, config)
    normal = np.array([0.0, 1.0, 0.0])
    parts: list[SubCorridor] = []
    for a, b in zip(poly.vertices[:-1], poly.vertices[1:]):
        try:
            normal = segment_normal(a, b)
        except CorridorError:
            pass
        try:
            parts.append(builder.build(a, b, normal))
        except CorridorError as error:
            LOGGER.warning("Falling back to minimum-width sub-corridor %s: %s", len(parts) + 1, error)
            parts.append(builder.fallback(a, b, normal))
    return SafeFlightCorridor(tuple(parts), poly, builder.config)


def contains(sc: SubCorridor, p: Sequence[float]) -> bool:
    return sc.contains(p)


def locate(sfc: SafeFlightCorridor, p: Sequence[float]) -> int | None:
    """Largest 1-based index whose sub-corridor contains p."""
    for index in range(len(sfc.sub_corridors), 0, -1):
        if sfc.sub_corridors[index - 1].contains(p):
            return index
    return None


def inside_any(sfc: SafeFlightCorridor, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for sc in sfc.sub_corridors:
        inside |= sc.contains_many(pts)
    return inside


def observation_window(
    sfc: SafeFlightCorridor, index: int, count: int | None = None, origin: Sequence[float] | None = None
) -> np.ndarray:
    """Egocentric features of SFC_index..SFC_{index+count-1}: vertex xy, then (wl, wr, z_sup, z_inf)."""
    count = count or sfc.config.window
    total = len(sfc.sub_corridors)
    if not 1 <= index <= total:
        raise IndexError(f"window start {index} outside [1, {total}]")
    center = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    vertices = sfc.polyline.vertices
    last = sfc.sub_corridors[-1]
    xy = []
    bands = []
    for j in range(index, index + count):
        vertex = vertices[min(j - 1, total)]
        xy.extend(vertex[:2] - center[:2])
        sc = sfc.sub_corridors[j - 1] if j <= total else last
        bands.extend([sc.width_left, sc.width_right, sc.z_sup - center[2], sc.z_inf - center[2]])
    xy.extend(vertices[min(index + count - 1, total)][:2] - center[:2])
    return np.asarray(xy + bands, dtype=float)


def flatten(sfc: SafeFlightCorridor) -> np.ndarray:
    """Unpadded world-frame features: every vertex xy then every sub-corridor's four band values."""
    xy = sfc.polyline.vertices[:, :2].ravel()
    bands = [[sc.width_left, sc.width_right, sc.z_sup, sc.z_inf] for sc in sfc.sub_corridors]
    return np.concatenate([xy, np.asarray(bands, dtype=float).ravel()])


def export_corridor(sfc: SafeFlightCorridor, path: str | Path) -> Path:
    rows = [
        [i, *sc.start, *sc.end, sc.width_left, sc.width_right, sc.z_inf, sc.z_sup, int(sc.fallback)]
        for i, sc in enumerate(sfc.sub_corridors, start=1)
    ]
    columns = ["index", "x0", "y0", "z0", "x1", "y1", "z1", "w_left", "w_right", "z_inf", "z_sup", "fallback"]
    header = [f"sub_corridors {len(rows)}", f"max_width {sfc.config.max_width}"]
    return write_table(path, columns, rows, header)
