"""Egocentric top-down "camera" rasters for the left, front and right views."""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from worldplan.errors import ResolutionMismatchError
from worldplan.microworld.geometry import box_corners, to_local
from worldplan.microworld.state import WorldState

VIEW_NAMES = ("left", "front", "right")

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "background": (40, 110, 40),
    "road": (100, 100, 100),
    "stop_line": (255, 255, 255),
    "vehicle": (30, 80, 230),
    "pedestrian": (240, 200, 20),
    "light_red": (230, 30, 30),
    "light_green": (30, 220, 60),
}


@dataclass(frozen=True)
class MultiViewFrame:
    """Synchronized left/front/right rasters, shape (3, h, w, 3), values in [0, 1]."""

    images: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        """Check the view count and value range."""
        if self.images.ndim != 4 or self.images.shape[0] != len(VIEW_NAMES):
            raise ResolutionMismatchError(
                f"Expected {len(VIEW_NAMES)} views of h x w x 3, "
                f"got shape {self.images.shape}"
            )
        if self.images.shape[-1] != 3:
            raise ResolutionMismatchError(
                f"Expected RGB rasters, got {self.images.shape[-1]} channels"
            )

    @property
    def size(self) -> int:
        """Return the raster side length."""
        return int(self.images.shape[1])

    def view(self, name: str) -> np.ndarray:
        """Return one view's raster."""
        return self.images[VIEW_NAMES.index(name)]

    def to_uint8(self) -> np.ndarray:
        """Return the rasters quantized to bytes."""
        return np.round(self.images * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, images: np.ndarray, timestamp: float = 0.0) -> "MultiViewFrame":
        """Build a frame from byte rasters."""
        return cls(images.astype(np.float32) / 255.0, timestamp)


class Renderer:
    """Rasterizes a `WorldState` into one top-down image per camera.

    Each camera looks along the ego heading rotated by its yaw offset and sees
    the rectangle `[0, view_range]` ahead by `[-view_range/2, view_range/2]`
    sideways; everything behind the camera is outside its frustum.
    """

    def __init__(
        self,
        image_size: int = 64,
        view_range: float = 32.0,
        side_yaw_deg: float = 60.0,
        road_width: float = 8.0,
    ):
        """Initialize the renderer."""
        self.image_size = int(image_size)
        self.view_range = float(view_range)
        self.road_width = float(road_width)
        yaw = math.radians(side_yaw_deg)
        self.view_yaws = {"left": yaw, "front": 0.0, "right": -yaw}

    @classmethod
    def from_config(cls, config: dict) -> "Renderer":
        """Build a renderer from the `microworld` config section."""
        return cls(
            image_size=config["image_size"],
            view_range=config["view_range"],
            side_yaw_deg=config["side_yaw_deg"],
            road_width=config["road_width"],
        )

    @property
    def resolution(self) -> float:
        """Return meters per pixel."""
        return self.view_range / self.image_size

    def to_pixels(self, local: np.ndarray) -> list:
        """Map camera-frame meters (x forward, y left) to (column, row) pixels."""
        local = np.atleast_2d(local)
        col = (self.view_range / 2.0 - local[:, 1]) / self.resolution
        row = (self.view_range - local[:, 0]) / self.resolution
        return [(float(c), float(r)) for c, r in zip(col, row)]

    def in_frustum(self, local_point: Sequence[float]) -> bool:
        """Return whether a camera-frame point lies inside the view rectangle."""
        x, y = float(local_point[0]), float(local_point[1])
        half = self.view_range / 2.0
        return 0.0 < x < self.view_range and -half < y <= half

    def camera_pose(self, state: WorldState, view: str) -> Tuple[np.ndarray, float]:
        """Return (origin, heading) of the named camera."""
        return state.ego.xy, state.ego.heading + self.view_yaws[view]

    def _render_view(self, state: WorldState, view: str) -> np.ndarray:
        origin, heading = self.camera_pose(state, view)
        size = (self.image_size, self.image_size)
        image = Image.new("RGB", size, PALETTE["background"])
        draw = ImageDraw.Draw(image)
        road_px = max(1, int(round(self.road_width / self.resolution)))

        for road in state.roads:
            pixels = self.to_pixels(to_local(road.points, origin, heading))
            draw.line(pixels, fill=PALETTE["road"], width=road_px, joint="curve")

        for light in state.lights:
            line = to_local(np.array(light.stop_line), origin, heading)
            draw.line(self.to_pixels(line), fill=PALETTE["stop_line"], width=1)
            center = to_local(np.array([light.position]), origin, heading)[0]
            housing = box_corners(np.array(light.position), heading, 1.5, 1.5)
            corners = to_local(housing, origin, heading)
            color = PALETTE["light_red" if light.state == "red" else "light_green"]
            self._draw_entity(draw, corners, center, color)

        for agent in state.agents:
            pose = agent.pose
            corners = to_local(
                box_corners(pose.xy, pose.heading, agent.length, agent.width),
                origin,
                heading,
            )
            center = to_local(pose.xy[None, :], origin, heading)[0]
            self._draw_entity(draw, corners, center, PALETTE[agent.kind])

        return np.asarray(image, dtype=np.uint8).copy()

    def _draw_entity(
        self,
        draw: ImageDraw.ImageDraw,
        corners: np.ndarray,
        center: np.ndarray,
        color: Tuple[int, int, int],
    ) -> None:
        draw.polygon(self.to_pixels(corners), fill=color)
        if self.in_frustum(center):
            col, row = self.to_pixels(center)[0]
            draw.point((int(math.floor(col)), int(math.floor(row))), fill=color)

    def render_views(self, state: WorldState) -> MultiViewFrame:
        """Render the three synchronized views of `state`."""
        views = np.stack([self._render_view(state, name) for name in VIEW_NAMES])
        return MultiViewFrame(views.astype(np.float32) / 255.0, float(state.clock))


def render_views(
    state: WorldState, renderer: Optional[Renderer] = None
) -> MultiViewFrame:
    """Render `state` with `renderer` (a default desk-scale renderer if omitted)."""
    return (renderer or Renderer()).render_views(state)
