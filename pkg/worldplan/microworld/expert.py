"""Privileged expert: waypoint labels, completion flags and perception targets."""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from worldplan.errors import InfeasibleInstructionError
from worldplan.microworld.geometry import to_local, wrap_angle
from worldplan.microworld.instructions import Instruction
from worldplan.microworld.state import WorldState

logger = logging.getLogger("worldplan.microworld.expert")

WAYPOINT_TIMES = (0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class ExpertParams:
    """Driving style of the expert."""

    cruise_speed: float = 5.0
    accel: float = 3.0
    decel: float = 2.5
    max_decel: float = 6.0
    stop_margin: float = 1.5
    follow_gap: float = 3.0
    lookahead: float = 25.0
    pedestrian_corridor: float = 3.5
    vehicle_corridor: float = 1.5
    turn_window: float = 40.0
    stop_window: float = 4.0
    standstill: float = 0.2

    @classmethod
    def from_config(cls, config: dict) -> "ExpertParams":
        """Build the parameters from the `microworld.expert` config section."""
        return cls(**{k: float(v) for k, v in config.items()})


@dataclass(frozen=True)
class Intersection:
    """Where the route crosses a side street and what it does there."""

    entry_s: float
    exit_s: float
    turn: str


@dataclass(frozen=True)
class Box:
    """A BEV detection target in the ego frame."""

    label: str
    center: Tuple[float, float]
    extent: Tuple[float, float]
    yaw: float

    def to_dict(self) -> dict:
        """Return a JSON-ready mapping."""
        return {
            "class": self.label,
            "center": list(self.center),
            "extent": list(self.extent),
            "yaw": self.yaw,
        }


@dataclass(frozen=True)
class PerceptionTargets:
    """Stage-1 supervision for one frame."""

    boxes: Tuple[Box, ...]
    light_state: str
    expert_waypoints: np.ndarray


def _stop_distance(
    state: WorldState, params: ExpertParams, red_light_ahead: bool
) -> Optional[float]:
    """Return the arc length the ego may still travel, or None if unconstrained."""
    half = state.params.length / 2.0
    limits: List[float] = [state.route.length - state.route_s]

    light = state.governing_light(params.lookahead)
    if red_light_ahead and light is not None and light.state == "red":
        distance = light.route_s - state.route_s - half - params.stop_margin
        required = state.ego_speed**2 / (2.0 * max(distance, 1e-3))
        if distance > -params.stop_margin and required <= params.max_decel:
            limits.append(max(distance, 0.0))

    for agent in state.agents:
        pose = agent.pose
        s, lateral = state.route.project(pose.xy)
        ahead = s - state.route_s
        if not 0.0 < ahead <= params.lookahead:
            continue
        if agent.kind == "vehicle" and abs(lateral) <= params.vehicle_corridor:
            gap = half + agent.length / 2.0 + params.follow_gap
            limits.append(max(ahead - gap, 0.0))
        elif agent.kind == "pedestrian" and abs(lateral) <= params.pedestrian_corridor:
            gap = half + params.follow_gap
            limits.append(max(ahead - gap, 0.0))
    return min(limits) if limits else None


def _speed_profile(
    speed: float, stop: Optional[float], params: ExpertParams
) -> List[float]:
    """Return the arc length travelled at each waypoint time."""
    travelled, s = [], 0.0
    dt = WAYPOINT_TIMES[0]
    v = speed
    for _ in WAYPOINT_TIMES:
        desired = params.cruise_speed
        if stop is not None:
            desired = min(desired, math.sqrt(2.0 * params.decel * max(stop - s, 0.0)))
        v = min(max(desired, v - params.max_decel * dt), v + params.accel * dt)
        v = max(v, 0.0)
        s_next = s + v * dt
        if stop is not None:
            s_next = min(s_next, max(stop, s))
        travelled.append(s_next)
        s = s_next
    return travelled


def check_feasible(
    state: WorldState,
    instruction: Instruction,
    intersections: Tuple[Intersection, ...] = (),
    params: ExpertParams = ExpertParams(),
) -> None:
    """Raise `InfeasibleInstructionError` if `instruction` cannot be followed now."""
    kind = instruction.kind
    if kind in ("lane_left", "lane_right"):
        raise InfeasibleInstructionError(instruction.text, "the road has a single lane")
    if kind == "uturn":
        raise InfeasibleInstructionError(instruction.text, "u-turns are not allowed")
    if kind in ("left", "right", "straight"):
        ahead = [
            crossing
            for crossing in intersections
            if crossing.exit_s > state.route_s
            and crossing.entry_s - state.route_s <= params.turn_window
        ]
        if not ahead:
            raise InfeasibleInstructionError(
                instruction.text, "there is no intersection ahead"
            )
        if ahead[0].turn != kind:
            raise InfeasibleInstructionError(
                instruction.text, f"the route goes {ahead[0].turn} here"
            )
    if kind == "stop":
        light = state.governing_light(params.lookahead)
        if light is None or light.state != "red":
            raise InfeasibleInstructionError(instruction.text, "no red light ahead")


def instruction_completed(
    state: WorldState, instruction: Instruction, params: ExpertParams = ExpertParams()
) -> bool:
    """Return whether the instruction's terminal condition holds in `state`."""
    if instruction.kind == "stop":
        light = state.governing_light(params.lookahead)
        if light is None or light.state != "red":
            return True
        front_gap = light.route_s - state.route_s - state.params.length / 2.0
        return state.ego_speed < params.standstill and front_gap <= params.stop_window
    if instruction.end_s is None:
        return state.route_progress >= 1.0
    return state.route_s >= instruction.end_s


def expert_policy(
    state: WorldState,
    instruction: Instruction,
    intersections: Tuple[Intersection, ...] = (),
    params: ExpertParams = ExpertParams(),
) -> Tuple[np.ndarray, bool]:
    """Return (4 x 2 ego-frame waypoints at t+0.2..0.8 s, completed).

    Waypoints lie on the route centerline; the speed profile accelerates toward
    the cruise speed and brakes for red lights, vehicles and pedestrians ahead
    and for the route end.
    """
    check_feasible(state, instruction, intersections, params)
    stop = _stop_distance(state, params, red_light_ahead=True)
    travelled = _speed_profile(state.ego_speed, stop, params)
    points = np.stack([state.route.point_at(state.route_s + s)[0] for s in travelled])
    waypoints = to_local(points, state.ego.xy, state.ego.heading)
    return waypoints, instruction_completed(state, instruction, params)


def expert_labels(
    state: WorldState,
    instruction: Instruction,
    intersections: Tuple[Intersection, ...] = (),
    params: ExpertParams = ExpertParams(),
) -> Tuple[np.ndarray, bool]:
    """Return expert labels, ignoring misleading instructions.

    An infeasible instruction is treated as noise: the waypoints follow the
    route and the completion flag is false.
    """
    try:
        return expert_policy(state, instruction, intersections, params)
    except InfeasibleInstructionError as error:
        logger.debug("%s; labelling with route following", error)
        fallback = Instruction("follow the lane", "follow", end_s=None)
        waypoints, _ = expert_policy(state, fallback, intersections, params)
        return waypoints, False


def perception_targets(
    state: WorldState,
    waypoints: np.ndarray,
    bev_range: float = 20.0,
    light_range: float = 30.0,
) -> PerceptionTargets:
    """Return the detection boxes, light state and waypoints for Stage-1 training."""
    boxes = []
    for agent in state.agents:
        pose = agent.pose
        center = to_local(pose.xy[None, :], state.ego.xy, state.ego.heading)[0]
        if np.all(np.abs(center) < bev_range):
            boxes.append(
                Box(
                    label=agent.kind,
                    center=(float(center[0]), float(center[1])),
                    extent=(float(agent.length), float(agent.width)),
                    yaw=wrap_angle(pose.heading - state.ego.heading),
                )
            )
    light = state.governing_light(light_range)
    light_state = "none" if light is None else light.state
    return PerceptionTargets(tuple(boxes), light_state, np.asarray(waypoints))
