"""Microworld domain types: poses, scripted agents, traffic lights, world state."""

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from worldplan.microworld.geometry import Polyline, wrap_angle

AGENT_KINDS = ("vehicle", "pedestrian")
LIGHT_STATES = ("red", "green")


@dataclass(frozen=True)
class Pose:
    """Planar pose in meters / radians; heading wraps to (-pi, pi]."""

    x: float
    y: float
    heading: float

    @property
    def xy(self) -> np.ndarray:
        """Return the position as an array."""
        return np.array([self.x, self.y], dtype=np.float64)

    def wrapped(self) -> "Pose":
        """Return the same pose with its heading wrapped."""
        return dataclasses.replace(self, heading=wrap_angle(self.heading))


@dataclass(frozen=True)
class VehicleParams:
    """Ego kinematics and footprint."""

    wheelbase: float = 2.5
    length: float = 4.5
    width: float = 2.0
    max_speed: float = 10.0
    friction: float = 0.1
    max_accel: float = 4.0
    max_brake: float = 8.0
    max_steer_angle: float = 0.6

    @classmethod
    def from_config(cls, config: dict) -> "VehicleParams":
        """Build the parameters from the `microworld` config section."""
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: float(v) for k, v in config.items() if k in names})


@dataclass(frozen=True)
class Agent:
    """A scripted road user following a fixed path at constant speed."""

    kind: str
    path: Polyline
    speed: float
    start_time: float = 0.0
    length: float = 4.5
    width: float = 2.0
    s: float = 0.0

    def __post_init__(self) -> None:
        """Check the agent kind."""
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"Unknown agent kind '{self.kind}'")

    @property
    def pose(self) -> Pose:
        """Return the pose at the current path position (clamped to the path end)."""
        position, heading = self.path.point_at(min(self.s, self.path.length))
        return Pose(float(position[0]), float(position[1]), wrap_angle(heading))

    @property
    def current_speed(self) -> float:
        """Return zero once the path is exhausted, the scripted speed otherwise."""
        return 0.0 if self.s >= self.path.length else self.speed

    def advanced(self, clock: float) -> "Agent":
        """Return the agent positioned for simulation time `clock`."""
        s = max(0.0, clock - self.start_time) * self.speed
        return dataclasses.replace(self, s=min(s, self.path.length))


@dataclass(frozen=True)
class TrafficLight:
    """A light on the route with a stop line and a fixed green/red cycle."""

    position: Tuple[float, float]
    stop_line: Tuple[Tuple[float, float], Tuple[float, float]]
    route_s: float
    green_s: float
    red_s: float
    offset: float = 0.0
    state: str = "green"

    def state_at(self, clock: float) -> str:
        """Return the phase at simulation time `clock`."""
        cycle = self.green_s + self.red_s
        if cycle <= 0.0:
            return "green"
        phase = (clock + self.offset) % cycle
        return "green" if phase < self.green_s else "red"

    def at(self, clock: float) -> "TrafficLight":
        """Return the light with its state updated for `clock`."""
        return dataclasses.replace(self, state=self.state_at(clock))


@dataclass(frozen=True)
class WorldState:
    """Everything the simulator knows at one instant."""

    ego: Pose
    ego_speed: float
    route: Polyline
    agents: Tuple[Agent, ...] = ()
    lights: Tuple[TrafficLight, ...] = ()
    roads: Tuple[Polyline, ...] = ()
    route_s: float = 0.0
    route_progress: float = 0.0
    clock: float = 0.0
    control_clamped: bool = False
    params: VehicleParams = field(default_factory=VehicleParams)

    def replace(self, **changes) -> "WorldState":
        """Return a copy with `changes` applied."""
        return dataclasses.replace(self, **changes)

    @property
    def ego_front(self) -> np.ndarray:
        """Return the world position of the ego front bumper center."""
        offset = self.params.length / 2.0
        return self.ego.xy + offset * np.array(
            [np.cos(self.ego.heading), np.sin(self.ego.heading)]
        )

    @property
    def lateral_offset(self) -> float:
        """Return the signed lateral distance of the ego from the route."""
        return self.route.project(self.ego.xy)[1]

    def governing_light(self, horizon: float = 30.0) -> Optional[TrafficLight]:
        """Return the nearest light whose stop line is ahead on the route."""
        front_s = self.route_s + self.params.length / 2.0
        ahead = [
            light
            for light in self.lights
            if -0.5 <= light.route_s - front_s <= horizon
        ]
        if not ahead:
            return None
        return min(ahead, key=lambda light: light.route_s)

    def summary(self) -> dict:
        """Return a JSON-ready snapshot of the ego state."""
        return {
            "x": float(self.ego.x),
            "y": float(self.ego.y),
            "heading": float(self.ego.heading),
            "speed": float(self.ego_speed),
        }
