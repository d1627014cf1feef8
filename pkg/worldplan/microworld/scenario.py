"""Scenario files: road layout, scripted agents, light schedules, instructions."""

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml

from worldplan.microworld.expert import Intersection
from worldplan.microworld.geometry import Polyline
from worldplan.microworld.instructions import Instruction, phrase
from worldplan.microworld.state import (
    Agent,
    Pose,
    TrafficLight,
    VehicleParams,
    WorldState,
)

TRACK_SEGMENTS = {"tiny": 2, "short": 3, "long": 5}
TURNS = ("left", "right", "straight")


def _round(points: np.ndarray) -> list:
    return [[round(float(x), 3), round(float(y), 3)] for x, y in points]


def _path(points) -> tuple:
    return tuple(tuple(p) for p in _round(points))


@dataclass(frozen=True)
class AgentScript:
    """Path and timing of one scripted agent."""

    kind: str
    path: Tuple[Tuple[float, float], ...]
    speed: float
    start_time: float = 0.0
    length: float = 4.5
    width: float = 2.0


@dataclass(frozen=True)
class LightScript:
    """Placement and cycle of one traffic light."""

    position: Tuple[float, float]
    stop_line: Tuple[Tuple[float, float], Tuple[float, float]]
    route_s: float
    green_s: float
    red_s: float
    offset: float = 0.0


@dataclass(frozen=True)
class Scenario:
    """A complete, human-readable description of one route."""

    name: str
    seed: int
    track: str
    route: Tuple[Tuple[float, float], ...]
    roads: Tuple[Tuple[Tuple[float, float], ...], ...]
    intersections: Tuple[Intersection, ...] = ()
    lights: Tuple[LightScript, ...] = ()
    agents: Tuple[AgentScript, ...] = ()
    instructions: Tuple[Instruction, ...] = ()
    start_speed: float = 0.0

    @property
    def route_line(self) -> Polyline:
        """Return the route as a polyline."""
        return Polyline(np.array(self.route))

    def initial_state(self, params: Optional[VehicleParams] = None) -> WorldState:
        """Return the world at t = 0 with the ego on the route start."""
        route = self.route_line
        start, heading = route.point_at(0.0)
        lights = tuple(
            TrafficLight(
                position=light.position,
                stop_line=light.stop_line,
                route_s=light.route_s,
                green_s=light.green_s,
                red_s=light.red_s,
                offset=light.offset,
            ).at(0.0)
            for light in self.lights
        )
        agents = tuple(
            Agent(
                kind=agent.kind,
                path=Polyline(np.array(agent.path)),
                speed=agent.speed,
                start_time=agent.start_time,
                length=agent.length,
                width=agent.width,
            ).advanced(0.0)
            for agent in self.agents
        )
        return WorldState(
            ego=Pose(float(start[0]), float(start[1]), heading),
            ego_speed=self.start_speed,
            route=route,
            agents=agents,
            lights=lights,
            roads=tuple(Polyline(np.array(road)) for road in self.roads),
            params=params or VehicleParams(),
        )

    def instruction_at(self, route_s: float) -> Instruction:
        """Return the scripted instruction active at arc length `route_s`."""
        active = [i for i in self.instructions if i.start_s <= route_s]
        if not active:
            return Instruction(phrase("follow"), "follow", end_s=self.route_line.length)
        return active[-1]

    def perturbed(self, seed: int, jitter: float = 2.0) -> "Scenario":
        """Return a copy with light phases and agent start times re-drawn."""
        rng = np.random.default_rng(seed)
        lights = tuple(
            dataclasses.replace(
                light, offset=float(light.offset + rng.uniform(0.0, jitter))
            )
            for light in self.lights
        )
        agents = tuple(
            dataclasses.replace(
                agent, start_time=float(agent.start_time + rng.uniform(0.0, jitter))
            )
            for agent in self.agents
        )
        return dataclasses.replace(self, lights=lights, agents=agents)

    def to_dict(self) -> dict:
        """Return a YAML-ready mapping."""
        return {
            "name": self.name,
            "seed": self.seed,
            "track": self.track,
            "start_speed": self.start_speed,
            "route": [list(p) for p in self.route],
            "roads": [[list(p) for p in road] for road in self.roads],
            "intersections": [dataclasses.asdict(i) for i in self.intersections],
            "lights": [
                {
                    "position": list(light.position),
                    "stop_line": [list(p) for p in light.stop_line],
                    "route_s": light.route_s,
                    "green_s": light.green_s,
                    "red_s": light.red_s,
                    "offset": light.offset,
                }
                for light in self.lights
            ],
            "agents": [
                {
                    "kind": agent.kind,
                    "path": [list(p) for p in agent.path],
                    "speed": agent.speed,
                    "start_time": agent.start_time,
                    "length": agent.length,
                    "width": agent.width,
                }
                for agent in self.agents
            ],
            "instructions": [i.to_dict() for i in self.instructions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        """Build a scenario from `to_dict` output."""

        def _points(raw) -> Tuple[Tuple[float, float], ...]:
            return tuple((float(x), float(y)) for x, y in raw)

        return cls(
            name=str(data["name"]),
            seed=int(data["seed"]),
            track=str(data.get("track", "short")),
            start_speed=float(data.get("start_speed", 0.0)),
            route=_points(data["route"]),
            roads=tuple(_points(road) for road in data.get("roads", [])),
            intersections=tuple(
                Intersection(float(i["entry_s"]), float(i["exit_s"]), str(i["turn"]))
                for i in data.get("intersections", [])
            ),
            lights=tuple(
                LightScript(
                    position=tuple(light["position"]),  # type: ignore
                    stop_line=_points(light["stop_line"]),  # type: ignore
                    route_s=float(light["route_s"]),
                    green_s=float(light["green_s"]),
                    red_s=float(light["red_s"]),
                    offset=float(light.get("offset", 0.0)),
                )
                for light in data.get("lights", [])
            ),
            agents=tuple(
                AgentScript(
                    kind=str(agent["kind"]),
                    path=_points(agent["path"]),
                    speed=float(agent["speed"]),
                    start_time=float(agent.get("start_time", 0.0)),
                    length=float(agent.get("length", 4.5)),
                    width=float(agent.get("width", 2.0)),
                )
                for agent in data.get("agents", [])
            ),
            instructions=tuple(
                Instruction.from_dict(i) for i in data.get("instructions", [])
            ),
        )

    def save(self, path: Path) -> Path:
        """Write the scenario as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path: Path) -> "Scenario":
        """Read a scenario YAML file."""
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class _RouteBuilder:
    spacing: float = 1.0
    points: List[np.ndarray] = field(default_factory=lambda: [np.zeros(2)])
    heading: float = 0.0
    s: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.points[-1]

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def left(self) -> np.ndarray:
        return np.array([-math.sin(self.heading), math.cos(self.heading)])

    def straight(self, length: float) -> None:
        steps = max(1, int(round(length / self.spacing)))
        start, direction = self.position, self.direction
        for k in range(1, steps + 1):
            self.points.append(start + direction * (length * k / steps))
        self.s += length

    def arc(self, radius: float, turn: str) -> None:
        sign = 1.0 if turn == "left" else -1.0
        center = self.position + sign * radius * self.left
        start_angle = math.atan2(*(self.position - center)[::-1])
        sweep = sign * math.pi / 2.0
        length = radius * math.pi / 2.0
        steps = max(2, int(round(length / self.spacing)))
        for k in range(1, steps + 1):
            angle = start_angle + sweep * k / steps
            offset = np.array([math.cos(angle), math.sin(angle)])
            self.points.append(center + radius * offset)
        self.heading += sweep
        self.s += length


def generate_scenario(
    seed: int,
    track: str = "short",
    name: Optional[str] = None,
    misleading_rate: float = 0.2,
    light_rate: float = 0.7,
    vehicle_rate: float = 0.5,
    pedestrian_rate: float = 0.4,
    turn_radius: float = 8.0,
    straight_range: Tuple[float, float] = (30.0, 45.0),
    start_speed: float = 0.0,
) -> Scenario:
    """Draw a random route of the given track length with its agents and script."""
    if track not in TRACK_SEGMENTS:
        raise ValueError(
            f"Unknown track '{track}', expected one of {list(TRACK_SEGMENTS)}"
        )
    rng = np.random.default_rng(seed)
    builder = _RouteBuilder()
    intersections: List[Intersection] = []
    roads: List[list] = []
    lights: List[LightScript] = []
    instructions: List[Instruction] = []
    segment_starts: List[float] = []

    n_segments = TRACK_SEGMENTS[track]
    for index in range(n_segments):
        segment_starts.append(builder.s)
        builder.straight(float(rng.uniform(*straight_range)))
        if index == n_segments - 1:
            break
        turn = str(rng.choice(TURNS))
        entry_s, entry = builder.s, builder.position.copy()
        direction, left = builder.direction, builder.left
        center = entry + turn_radius * direction
        roads.append(_round([center - 25.0 * left, center + 25.0 * left]))
        roads.append(_round([center - 25.0 * direction, center + 25.0 * direction]))
        if rng.uniform() < light_rate:
            stop_point = entry - 1.0 * direction
            half_lane = 2.0 * left
            lights.append(
                LightScript(
                    position=_path([stop_point - 4.5 * left])[0],
                    stop_line=_path([stop_point + half_lane, stop_point - half_lane]),
                    route_s=round(entry_s - 1.0, 3),
                    green_s=round(float(rng.uniform(5.0, 9.0)), 3),
                    red_s=round(float(rng.uniform(3.0, 6.0)), 3),
                    offset=round(float(rng.uniform(0.0, 8.0)), 3),
                )
            )
        if turn == "straight":
            builder.straight(2.0 * turn_radius)
        else:
            builder.arc(turn_radius, turn)
        intersections.append(Intersection(round(entry_s, 3), round(builder.s, 3), turn))

    route_points = np.array(builder.points)
    route = Polyline(route_points)
    roads.insert(0, _round(route_points))

    for index, start_s in enumerate(segment_starts):
        crossing = intersections[index] if index < len(intersections) else None
        follow_end = crossing.entry_s - 15.0 if crossing else route.length
        variant = int(rng.integers(0, 3))
        instructions.append(
            Instruction(
                phrase("follow", variant),
                "follow",
                end_s=round(follow_end, 3),
                start_s=round(start_s, 3),
            )
        )
        if rng.uniform() < misleading_rate and follow_end - start_s > 12.0:
            kind = str(rng.choice(["lane_left", "lane_right", "uturn"]))
            mislead_start = start_s + 4.0
            instructions.append(
                Instruction(
                    phrase(kind),
                    kind,
                    misleading=True,
                    end_s=round(mislead_start + 5.0, 3),
                    start_s=round(mislead_start, 3),
                )
            )
            instructions.append(
                Instruction(
                    phrase("follow", variant),
                    "follow",
                    end_s=round(follow_end, 3),
                    start_s=round(mislead_start + 5.0, 3),
                )
            )
        if crossing:
            instructions.append(
                Instruction(
                    phrase(crossing.turn, variant),
                    crossing.turn,
                    end_s=round(crossing.exit_s + 5.0, 3),
                    start_s=round(follow_end, 3),
                )
            )

    agents: List[AgentScript] = []
    if rng.uniform() < vehicle_rate:
        lead_s = float(rng.uniform(15.0, 30.0))
        ahead = [p for p, s in zip(route_points, route.cumulative) if s >= lead_s]
        tail = route_points[-1] + 50.0 * (route_points[-1] - route_points[-2]) / max(
            np.linalg.norm(route_points[-1] - route_points[-2]), 1e-9
        )
        agents.append(
            AgentScript(
                kind="vehicle",
                path=_path(np.vstack([ahead, tail])),
                speed=round(float(rng.uniform(2.5, 4.0)), 3),
            )
        )
    if rng.uniform() < pedestrian_rate:
        cross_s = float(rng.uniform(20.0, max(25.0, route.length - 10.0)))
        point, heading = route.point_at(cross_s)
        left = np.array([-math.sin(heading), math.cos(heading)])
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        agents.append(
            AgentScript(
                kind="pedestrian",
                path=_path([point + side * 7.0 * left, point - side * 7.0 * left]),
                speed=1.2,
                start_time=round(float(rng.uniform(2.0, 10.0)), 3),
                length=0.8,
                width=0.8,
            )
        )

    return Scenario(
        name=name or f"{track}_{seed:05d}",
        seed=seed,
        track=track,
        route=tuple(tuple(p) for p in _round(route_points)),  # type: ignore
        roads=tuple(tuple(tuple(p) for p in road) for road in roads),  # type: ignore
        intersections=tuple(intersections),
        lights=tuple(lights),
        agents=tuple(agents),
        instructions=tuple(instructions),
        start_speed=start_speed,
    )
