"""Infraction detection between consecutive world states."""

from dataclasses import dataclass
from typing import List

from worldplan.microworld.geometry import (
    box_corners,
    polygons_overlap,
    segments_intersect,
)
from worldplan.microworld.state import Agent, WorldState

INFRACTION_KINDS = (
    "collision_vehicle",
    "collision_pedestrian",
    "red_light_violation",
    "route_deviation",
)


@dataclass(frozen=True)
class InfractionEvent:
    """One penalized event."""

    kind: str
    timestamp: float

    def __post_init__(self) -> None:
        """Check the infraction kind."""
        if self.kind not in INFRACTION_KINDS:
            raise ValueError(f"Unknown infraction kind '{self.kind}'")

    def to_dict(self) -> dict:
        """Return a JSON-ready mapping."""
        return {"kind": self.kind, "timestamp": self.timestamp}


def _ego_polygon(state: WorldState):
    return box_corners(
        state.ego.xy, state.ego.heading, state.params.length, state.params.width
    )


def _agent_polygon(agent: Agent):
    pose = agent.pose
    return box_corners(pose.xy, pose.heading, agent.length, agent.width)


def _overlaps(state: WorldState, index: int) -> bool:
    return polygons_overlap(_ego_polygon(state), _agent_polygon(state.agents[index]))


def detect_infractions(
    prev: WorldState, next: WorldState, deviation_tolerance: float = 3.0
) -> List[InfractionEvent]:
    """Return the infractions that begin between `prev` and `next`.

    Collisions and route deviation are reported on onset only, so one contact
    counts once. A red-light violation is the ego front crossing a stop line
    while that light is red.
    """
    events: List[InfractionEvent] = []
    stamp = next.clock

    for index, agent in enumerate(next.agents):
        if not _overlaps(next, index):
            continue
        if index < len(prev.agents) and _overlaps(prev, index):
            continue
        events.append(InfractionEvent(f"collision_{agent.kind}", stamp))

    front_prev, front_next = prev.ego_front, next.ego_front
    for before, after in zip(prev.lights, next.lights):
        if "red" not in (before.state, after.state):
            continue
        start, end = after.stop_line
        if segments_intersect(front_prev, front_next, start, end):
            events.append(InfractionEvent("red_light_violation", stamp))

    deviated_now = abs(next.lateral_offset) > deviation_tolerance
    deviated_before = abs(prev.lateral_offset) > deviation_tolerance
    if deviated_now and not deviated_before:
        events.append(InfractionEvent("route_deviation", stamp))
    return events
