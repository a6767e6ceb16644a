from __future__ import annotations

from dataclasses import dataclass
from io import BytesIO
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import theme
from .bspline import BSplineTrajectory, sample_path
from .corridor import SafeFlightCorridor
from .pathsearch import ReferencePolyline
from .worldmap import OccupancyGrid


@dataclass
class SceneStyle:
    pixels_per_meter: int = 12
    font_size: int = 12
    font_family: str = "DejaVuSans.ttf"
    flight_band: tuple[float, float] = (0.2, 3.0)
    line_width: int = 2
    marker_radius: int = 4
    padding: int = 3


class SceneRenderer:
    """Top-down preview: occupancy over the flight band, corridor outlines, reference and trajectory."""

    def __init__(self, style: SceneStyle | None = None) -> None:
        self.style = style or SceneStyle()

    def compose(
        self,
        grid: OccupancyGrid,
        corridor: SafeFlightCorridor | None = None,
        trajectory: BSplineTrajectory | None = None,
        polyline: ReferencePolyline | None = None,
        endpoints: Sequence[Sequence[float]] = (),
        caption: str = "",
    ) -> bytes:
        img = self._occupancy_image(grid)
        draw = ImageDraw.Draw(img)
        if corridor is not None:
            for sc in corridor.sub_corridors:
                color = theme.CORRIDOR_FALLBACK if sc.fallback else theme.CORRIDOR
                outline = [
                    sc.start + sc.normal * sc.width_left,
                    sc.end + sc.normal * sc.width_left,
                    sc.end - sc.normal * sc.width_right,
                    sc.start - sc.normal * sc.width_right,
                ]
                draw.polygon([self._pixel(grid, p) for p in outline], outline=theme.rgb(color))
        if polyline is not None and len(polyline.vertices) > 1:
            draw.line([self._pixel(grid, p) for p in polyline.vertices], fill=theme.rgb(theme.REFERENCE), width=1)
        if trajectory is not None and len(trajectory.control_points) >= 4:
            rows = sample_path(trajectory, trajectory.knot_interval / 10.0)
            draw.line(
                [self._pixel(grid, row[1:4]) for row in rows], fill=theme.rgb(theme.TRAJECTORY), width=self.style.line_width
            )
        for point, token in zip(endpoints, (theme.START, theme.GOAL)):
            x, y = self._pixel(grid, point)
            r = self.style.marker_radius
            draw.ellipse((x - r, y - r, x + r, y + r), fill=theme.rgb(token))
        if caption:
            draw.text((self.style.padding, self.style.padding), caption, fill=theme.rgb(theme.PALETTE["obstacle"]),
                      font=self._font(self.style.font_size))
        out = BytesIO()
        img.save(out, format="PNG")
        return out.getvalue()

    def _occupancy_image(self, grid: OccupancyGrid) -> Image.Image:
        lo_z, hi_z = self.style.flight_band
        k0 = max(0, int(np.floor((lo_z - grid.origin[2]) / grid.resolution)))
        k1 = min(grid.dims[2], int(np.ceil((hi_z - grid.origin[2]) / grid.resolution)))
        columns = grid.cells[:, :, k0:k1].any(axis=2) if k1 > k0 else np.zeros(grid.dims[:2], dtype=bool)
        paper = np.array(theme.rgb(theme.PALETTE["paper"]), dtype=np.uint8)
        ink = np.array(theme.rgb(theme.OCCUPIED), dtype=np.uint8)
        # rows are y from the top, columns are x
        pixels = np.where(columns.T[::-1, :, None], ink, paper).astype(np.uint8)
        img = Image.fromarray(pixels)
        scale = self.style.pixels_per_meter * grid.resolution
        size = (max(1, int(round(img.width * scale))), max(1, int(round(img.height * scale))))
        return img.resize(size, Image.Resampling.NEAREST)

    def _pixel(self, grid: OccupancyGrid, point: Sequence[float]) -> tuple[int, int]:
        ppm = self.style.pixels_per_meter
        height = grid.dims[1] * grid.resolution
        x = (float(point[0]) - grid.origin[0]) * ppm
        y = (height - (float(point[1]) - grid.origin[1])) * ppm
        return int(round(x)), int(round(y))

    def _font(self, size: int) -> ImageFont.FreeTypeFont | ImageFont.ImageFont:
        try:
            return ImageFont.truetype(self.style.font_family, size=size)
        except OSError:
            return ImageFont.load_default()


def render_scene(
    grid: OccupancyGrid,
    corridor: SafeFlightCorridor | None = None,
    trajectory: BSplineTrajectory | None = None,
    polyline: ReferencePolyline | None = None,
    style: SceneStyle | None = None,
    **kwargs,
) -> bytes:
    return SceneRenderer(style).compose(grid, corridor, trajectory, polyline, **kwargs)
