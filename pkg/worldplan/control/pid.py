"""Waypoint tracking with two independent PID loops for speed and heading."""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Tuple

import numpy as np

logger = logging.getLogger("worldplan.control")


def _clip(value: float, low: float, high: float) -> float:
    return float(min(max(value, low), high))


@dataclass(frozen=True)
class ControlCommand:
    """Low-level actuation; throttle and brake are never both positive."""

    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def clamped(self) -> Tuple["ControlCommand", bool]:
        """Return the command clipped to its ranges and whether clipping happened."""
        throttle = _clip(self.throttle, 0.0, 1.0)
        brake = _clip(self.brake, 0.0, 1.0)
        steer = _clip(self.steer, -1.0, 1.0)
        if throttle > 0.0 and brake > 0.0:
            throttle = 0.0
        command = ControlCommand(throttle, brake, steer)
        return command, command != self

    def as_list(self) -> list:
        """Return [throttle, brake, steer]."""
        return [self.throttle, self.brake, self.steer]

    def to_dict(self) -> dict:
        """Return the command as a JSON-ready mapping."""
        return {"throttle": self.throttle, "brake": self.brake, "steer": self.steer}

    @classmethod
    def from_dict(cls, data: dict) -> "ControlCommand":
        """Build a command from `to_dict` output."""
        return cls(float(data["throttle"]), float(data["brake"]), float(data["steer"]))


@dataclass(frozen=True)
class PidGains:
    """Gains of one PID loop."""

    kp: float
    ki: float
    kd: float


@dataclass(frozen=True)
class PidLoop:
    """Gains plus the mutable memory of one loop (integral, previous error)."""

    gains: PidGains
    windup: float = 2.0
    integral: float = 0.0
    previous_error: float = 0.0

    def update(self, error: float, dt: float) -> Tuple[float, "PidLoop"]:
        """Return the loop output for `error` and the advanced loop."""
        integral = _clip(self.integral + error * dt, -self.windup, self.windup)
        derivative = (error - self.previous_error) / dt
        output = (
            self.gains.kp * error
            + self.gains.ki * integral
            + self.gains.kd * derivative
        )
        return output, dataclasses.replace(
            self, integral=integral, previous_error=error
        )


@dataclass(frozen=True)
class PidState:
    """Episode-local controller state; only `waypoints_to_controls` advances it."""

    longitudinal: PidLoop = field(
        default_factory=lambda: PidLoop(PidGains(0.5, 0.05, 0.1))
    )
    lateral: PidLoop = field(default_factory=lambda: PidLoop(PidGains(1.0, 0.0, 0.2)))
    feedforward: float = 0.025
    waypoint_dt: float = 0.2
    lookahead_index: int = 1
    stop_speed: float = 0.4

    @classmethod
    def from_config(cls, config: dict) -> "PidState":
        """Build a fresh controller from the `control` config section."""
        windup = float(config.get("windup", 2.0))

        def _loop(section: dict) -> PidLoop:
            gains = PidGains(
                float(section["kp"]), float(section["ki"]), float(section["kd"])
            )
            return PidLoop(gains, windup=windup)

        return cls(
            longitudinal=_loop(config["longitudinal"]),
            lateral=_loop(config["lateral"]),
            feedforward=float(config.get("feedforward", 0.025)),
            waypoint_dt=float(config.get("waypoint_dt", 0.2)),
            lookahead_index=int(config.get("lookahead_index", 1)),
            stop_speed=float(config.get("stop_speed", 0.4)),
        )


def _waypoint_array(plan: Any) -> np.ndarray:
    if hasattr(plan, "waypoints_array"):
        return np.asarray(plan.waypoints_array(), dtype=np.float64)
    return np.asarray(getattr(plan, "waypoints", plan), dtype=np.float64)


def target_speed(waypoints: np.ndarray, waypoint_dt: float) -> float:
    """Return the speed implied by the mean spacing of consecutive waypoints."""
    path = np.vstack([np.zeros((1, 2)), waypoints])
    spacing = np.linalg.norm(np.diff(path, axis=0), axis=1)
    return float(spacing.mean() / waypoint_dt)


def waypoints_to_controls(
    plan: Any, speed: float, pid: PidState, dt: float
) -> Tuple[ControlCommand, PidState]:
    """Convert ego-frame waypoints into a clamped control command.

    The longitudinal loop tracks the speed implied by waypoint spacing, with a
    feed-forward term `feedforward * target` compensating rolling friction. The
    lateral loop tracks the bearing of the lookahead waypoint (left is
    positive). Negative longitudinal output becomes brake; a target below
    `stop_speed` (e.g. all-zero waypoints) is a full stop.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    waypoints = _waypoint_array(plan).reshape(-1, 2)
    target = target_speed(waypoints, pid.waypoint_dt)

    lookahead = waypoints[min(pid.lookahead_index, len(waypoints) - 1)]
    bearing = math.atan2(lookahead[1], lookahead[0]) if lookahead[0] > 1e-3 else 0.0
    steer_out, lateral = pid.lateral.update(bearing, dt)

    if target < pid.stop_speed:
        longitudinal = dataclasses.replace(
            pid.longitudinal, integral=0.0, previous_error=0.0
        )
        command = ControlCommand(throttle=0.0, brake=1.0, steer=0.0)
        lateral = dataclasses.replace(lateral, integral=0.0, previous_error=0.0)
    else:
        accel_out, longitudinal = pid.longitudinal.update(target - speed, dt)
        accel_out += pid.feedforward * target
        if accel_out >= 0.0:
            command = ControlCommand(throttle=accel_out, brake=0.0, steer=steer_out)
        else:
            command = ControlCommand(throttle=0.0, brake=-accel_out, steer=steer_out)

    command, was_clamped = command.clamped()
    if was_clamped:
        logger.debug("PID output clamped to %s", command)
    return command, dataclasses.replace(
        pid, longitudinal=longitudinal, lateral=lateral
    )
