"""Driving policies the closed-loop harness can evaluate."""

import logging
from typing import Optional, Protocol

import numpy as np
import torch

from worldplan.control.pid import ControlCommand, PidState, waypoints_to_controls
from worldplan.lm.core import SequenceContext
from worldplan.microworld.episode import DrivingEpisode
from worldplan.microworld.render import MultiViewFrame
from worldplan.training.model import DrivingAgent
from worldplan.vision.encoder import frames_to_tensor


class DrivingPolicy(Protocol):
    """Anything that turns observations into controls, one episode at a time."""

    name: str

    def reset(self, episode: DrivingEpisode) -> None:
        """Prepare for a new episode."""

    def act(self, episode: DrivingEpisode, frame: MultiViewFrame) -> ControlCommand:
        """Return the control for the current step."""


class LearnedAgent:
    """Online planning mode: frames and instructions in, controls out.

    The world generator is never called; the LM forward pass yields the
    action features the waypoint head decodes, and the PID controllers track
    the waypoints.
    """

    name = "learned"

    def __init__(self, model: DrivingAgent, config: dict):
        """Initialize the policy around a trained model."""
        self.model = model.eval()
        self.control = config["control"]
        self.logger = logging.getLogger("worldplan.eval.agents")
        self.ctx: Optional[SequenceContext] = None
        self.previous: Optional[torch.Tensor] = None
        self.pid = PidState.from_config(self.control)

    def reset(self, episode: DrivingEpisode) -> None:
        """Clear the frame history, previous action and controller state."""
        self.ctx = None
        self.previous = None
        self.pid = PidState.from_config(self.control)

    @torch.no_grad()
    def act(self, episode: DrivingEpisode, frame: MultiViewFrame) -> ControlCommand:
        """Plan on the latest frame and convert the waypoints to a control."""
        model = self.model
        text = episode.current_instruction().text
        instruction = model.encode_instructions([text])
        feature = model.frame_features(frames_to_tensor(frame).to(model.device))
        if self.ctx is None:
            self.ctx = SequenceContext.start(instruction, feature, model.lm.t_max)
        else:
            self.ctx = self.ctx.advance(instruction, feature, self.previous)
        plan, _ = model.plan(self.ctx)
        if plan.is_completed(self.model.completion_threshold):
            self.logger.debug("%s: instruction reported complete", episode.episode_id)
        command, self.pid = waypoints_to_controls(
            plan, episode.state.ego_speed, self.pid, episode.dt
        )
        self.previous = torch.tensor([command.as_list()], dtype=torch.float32)
        return command


class ExpertAgent:
    """The privileged expert, tracked by the same PID controllers."""

    name = "expert"

    def __init__(self, config: dict):
        """Initialize from the `control` config section."""
        self.control = config["control"]
        self.pid = PidState.from_config(self.control)

    def reset(self, episode: DrivingEpisode) -> None:
        """Start a new episode."""
        self.pid = PidState.from_config(self.control)

    def act(self, episode: DrivingEpisode, frame: MultiViewFrame) -> ControlCommand:
        """Return the control for the current step."""
        waypoints, _ = episode.expert_action()
        command, self.pid = waypoints_to_controls(
            waypoints, episode.state.ego_speed, self.pid, episode.dt
        )
        return command


class ConstantThrottleAgent:
    """Baseline that drives straight with a fixed throttle."""

    name = "constant_throttle"

    def __init__(self, throttle: float = 0.5):
        """Initialize with the throttle to hold."""
        self.throttle = throttle

    def reset(self, episode: DrivingEpisode) -> None:
        """Start a new episode."""
        pass

    def act(self, episode: DrivingEpisode, frame: MultiViewFrame) -> ControlCommand:
        """Return the control for the current step."""
        return ControlCommand(throttle=self.throttle, brake=0.0, steer=0.0)


class RandomWaypointAgent:
    """Baseline tracking random forward waypoints with the PID controllers."""

    name = "random_waypoint"

    def __init__(
        self, config: dict, seed: int = 0, max_step: float = 2.0, spread: float = 1.0
    ):
        """Initialize the random source and the waypoint ranges."""
        self.control = config["control"]
        self.seed = seed
        self.max_step = max_step
        self.spread = spread
        self.rng = np.random.default_rng(seed)
        self.pid = PidState.from_config(self.control)

    def reset(self, episode: DrivingEpisode) -> None:
        """Start a new episode."""
        self.pid = PidState.from_config(self.control)

    def act(self, episode: DrivingEpisode, frame: MultiViewFrame) -> ControlCommand:
        """Return the control for the current step."""
        forward = np.cumsum(self.rng.uniform(0.0, self.max_step, size=4))
        lateral = np.cumsum(self.rng.uniform(-self.spread, self.spread, size=4)) * 0.25
        waypoints = np.stack([forward, lateral], axis=1)
        command, self.pid = waypoints_to_controls(
            waypoints, episode.state.ego_speed, self.pid, episode.dt
        )
        return command
