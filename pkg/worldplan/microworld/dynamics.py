"""Ego kinematics (kinematic bicycle model) and world advancement."""

import logging
import math

from worldplan.control.pid import ControlCommand
from worldplan.microworld.geometry import wrap_angle
from worldplan.microworld.state import Pose, WorldState

logger = logging.getLogger("worldplan.microworld")


def advance_pose(pose: Pose, speed: float, yaw_rate: float, dt: float) -> Pose:
    """Integrate a constant-speed, constant-yaw-rate motion exactly over `dt`."""
    if abs(yaw_rate) < 1e-9:
        x = pose.x + speed * math.cos(pose.heading) * dt
        y = pose.y + speed * math.sin(pose.heading) * dt
        return Pose(x, y, pose.heading)
    heading = pose.heading + yaw_rate * dt
    radius = speed / yaw_rate
    x = pose.x + radius * (math.sin(heading) - math.sin(pose.heading))
    y = pose.y - radius * (math.cos(heading) - math.cos(pose.heading))
    return Pose(x, y, wrap_angle(heading))


def step_dynamics(state: WorldState, control: ControlCommand, dt: float) -> WorldState:
    """Advance the world by `dt` seconds under `control`.

    The ego moves along an exact arc at its speed from the start of the step;
    the speed then integrates throttle/brake and decays by friction. Scripted
    agents and light phases follow the new clock. Out-of-range controls are
    clamped and flagged on the returned state.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    command, clamped = control.clamped()
    if clamped:
        logger.warning("Control %s clamped to %s", control, command)
    params = state.params

    speed = state.ego_speed
    steer_angle = command.steer * params.max_steer_angle
    yaw_rate = speed * math.tan(steer_angle) / params.wheelbase
    ego = advance_pose(state.ego, speed, yaw_rate, dt)

    accel = command.throttle * params.max_accel - command.brake * params.max_brake
    new_speed = speed * math.exp(-params.friction * dt) + accel * dt
    new_speed = min(max(new_speed, 0.0), params.max_speed)

    clock = state.clock + dt
    route_s, _ = state.route.project(ego.xy)
    route_s = max(route_s, state.route_s)
    progress = min(max(route_s / max(state.route.length, 1e-9), 0.0), 1.0)
    progress = max(progress, state.route_progress)

    return state.replace(
        ego=ego,
        ego_speed=new_speed,
        agents=tuple(agent.advanced(clock) for agent in state.agents),
        lights=tuple(light.at(clock) for light in state.lights),
        route_s=route_s,
        route_progress=progress,
        clock=clock,
        control_clamped=clamped,
    )
