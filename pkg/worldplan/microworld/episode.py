"""Episode harness: scenario playback, instruction script, termination and logging."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from worldplan.control.pid import ControlCommand
from worldplan.microworld.dynamics import step_dynamics
from worldplan.microworld.expert import ExpertParams, expert_labels
from worldplan.microworld.infractions import InfractionEvent, detect_infractions
from worldplan.microworld.instructions import Instruction, phrase
from worldplan.microworld.render import MultiViewFrame, Renderer
from worldplan.microworld.scenario import Scenario
from worldplan.microworld.state import VehicleParams, WorldState
from worldplan.streams import EpisodeStepsStream

ROUTE_END_RADIUS = 2.0


@dataclass
class EpisodeRecord:
    """Ordered log of one episode plus its outcome."""

    episode_id: str
    route: str
    run: int = 0
    steps: List[dict] = field(default_factory=list)
    infractions: List[InfractionEvent] = field(default_factory=list)
    route_completion: float = 0.0
    termination: Optional[str] = None

    @property
    def duration(self) -> float:
        """Return the simulated time covered by the log."""
        return float(self.steps[-1]["timestamp"]) if self.steps else 0.0

    def infraction_counts(self) -> dict:
        """Return the number of events per infraction kind."""
        counts: dict = {}
        for event in self.infractions:
            counts[event.kind] = counts.get(event.kind, 0) + 1
        return counts

    def write(self, stream: EpisodeStepsStream) -> int:
        """Append the step records to an episode log stream."""
        return stream.write(self.steps)


class DrivingEpisode:
    """Drives one scenario at a fixed rate and keeps its log.

    The instruction shown to the agent is the scripted one, except while a red
    light governs the ego within `notice_distance`: then the harness issues a
    stop notice. The episode ends when the ego reaches the route end, leaves
    the route, or runs out of steps.
    """

    def __init__(
        self,
        scenario: Scenario,
        config: dict,
        renderer: Optional[Renderer] = None,
        run: int = 0,
        episode_id: Optional[str] = None,
    ):
        """Initialize the episode from a scenario and the `microworld` config."""
        self.scenario = scenario
        self.config = config
        self.dt = float(config["dt"])
        self.max_steps = int(config["max_episode_steps"])
        self.notice_distance = float(config["notice_distance"])
        self.deviation_tolerance = float(config["deviation_tolerance"])
        self.params = VehicleParams.from_config(config)
        self.expert_params = ExpertParams.from_config(config.get("expert", {}))
        self.renderer = renderer or Renderer.from_config(config)
        self.run = run
        self.episode_id = episode_id or f"{scenario.name}-run{run}"
        self.logger = logging.getLogger("worldplan.microworld.episode")
        self.reset()

    def reset(self) -> MultiViewFrame:
        """Restart the scenario and return the first observation."""
        self.state: WorldState = self.scenario.initial_state(self.params)
        self.step_count = 0
        self.done = False
        self.record = EpisodeRecord(self.episode_id, self.scenario.name, self.run)
        return self.observe()

    def current_instruction(self) -> Instruction:
        """Return the instruction the agent receives now."""
        light = self.state.governing_light(self.notice_distance)
        if light is not None and light.state == "red":
            route_s = self.state.route_s
            return Instruction(phrase("stop"), "stop", end_s=None, start_s=route_s)
        return self.scenario.instruction_at(self.state.route_s)

    def observe(self) -> MultiViewFrame:
        """Render the current multi-view observation."""
        return self.renderer.render_views(self.state)

    def expert_action(self) -> Tuple[np.ndarray, bool]:
        """Return the expert waypoint and completion labels for the current state."""
        return expert_labels(
            self.state,
            self.current_instruction(),
            self.scenario.intersections,
            self.expert_params,
        )

    def _termination(self, events: List[InfractionEvent]) -> Optional[str]:
        end = self.state.route.points[-1]
        if np.linalg.norm(self.state.ego.xy - end) <= ROUTE_END_RADIUS:
            return "route_completed"
        if any(event.kind == "route_deviation" for event in events):
            return "route_deviation"
        if self.step_count >= self.max_steps:
            return "timeout"
        return None

    def step(
        self, control: ControlCommand
    ) -> Tuple[WorldState, List[InfractionEvent], bool]:
        """Apply `control` for one tick; return (state, new infractions, done)."""
        if self.done:
            raise RuntimeError(f"Episode {self.episode_id} has already terminated")
        instruction = self.current_instruction()
        command, _ = control.clamped()
        previous = self.state
        self.state = step_dynamics(previous, control, self.dt)
        self.step_count += 1
        events = detect_infractions(previous, self.state, self.deviation_tolerance)
        self.record.infractions.extend(events)

        termination = self._termination(events)
        self.done = termination is not None
        completion = self.state.route_progress
        if termination == "route_completed":
            completion = 1.0
        self.record.route_completion = float(completion)
        self.record.termination = termination
        self.record.steps.append(
            {
                "episode_id": self.episode_id,
                "route": self.scenario.name,
                "run": self.run,
                "step": self.step_count - 1,
                "timestamp": float(self.state.clock),
                "ego": self.state.summary(),
                "route_progress": float(completion),
                "control": {**command.to_dict(), "clamped": self.state.control_clamped},
                "instruction": {
                    "text": instruction.text,
                    "kind": instruction.kind,
                    "misleading": instruction.misleading,
                },
                "infractions": [event.to_dict() for event in events],
                "done": self.done,
                "termination": termination,
            }
        )
        if events:
            self.logger.info(
                "%s t=%.1f: %s",
                self.episode_id,
                self.state.clock,
                ", ".join(event.kind for event in events),
            )
        return self.state, events, self.done
