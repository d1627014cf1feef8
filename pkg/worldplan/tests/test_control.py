"""Tests for waypoint tracking."""

import numpy as np
import pytest

from worldplan.control.pid import (
    ControlCommand,
    PidGains,
    PidLoop,
    PidState,
    target_speed,
    waypoints_to_controls,
)


@pytest.fixture
def pid(config) -> PidState:
    """Return a fresh controller built from the default gains."""
    return PidState.from_config(config["control"])


def test_clamped_command():
    """Commands are clipped to range and never brake while accelerating."""
    command, clamped = ControlCommand(throttle=1.5, brake=0.5, steer=-3.0).clamped()
    assert clamped
    assert command == ControlCommand(throttle=0.0, brake=0.5, steer=-1.0)
    command, clamped = ControlCommand(0.3, 0.0, 0.1).clamped()
    assert not clamped
    assert ControlCommand.from_dict(command.to_dict()) == command


def test_target_speed():
    """Evenly spaced waypoints imply spacing over the waypoint interval."""
    waypoints = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    assert target_speed(waypoints, 0.2) == pytest.approx(5.0)


def test_full_stop(pid):
    """All-zero waypoints brake fully with a straight wheel."""
    command, state = waypoints_to_controls(np.zeros((4, 2)), 3.0, pid, 0.1)
    assert command == ControlCommand(throttle=0.0, brake=1.0, steer=0.0)
    assert state.longitudinal.integral == 0.0


def test_accelerates_toward_target(pid):
    """Waypoints faster than the current speed produce throttle only."""
    waypoints = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    command, _ = waypoints_to_controls(waypoints, 0.0, pid, 0.1)
    assert command.throttle > 0.0
    assert command.brake == 0.0
    assert command.steer == pytest.approx(0.0)


def test_slows_down_when_too_fast(pid):
    """A speed well above the target produces brake only."""
    waypoints = np.array([[0.2, 0.0], [0.4, 0.0], [0.6, 0.0], [0.8, 0.0]])
    command, _ = waypoints_to_controls(waypoints, 9.0, pid, 0.1)
    assert command.throttle == 0.0
    assert command.brake > 0.0


def test_steers_toward_the_left(pid):
    """Waypoints bending left steer left."""
    waypoints = np.array([[1.0, 0.2], [2.0, 0.8], [3.0, 1.8], [4.0, 3.2]])
    command, _ = waypoints_to_controls(waypoints, 4.0, pid, 0.1)
    assert command.steer > 0.0


def test_random_waypoints_stay_in_range(pid):
    """Whatever the plan, commands are in range and never throttle and brake."""
    rng = np.random.default_rng(0)
    state = pid
    for _ in range(200):
        waypoints = rng.normal(scale=4.0, size=(4, 2))
        command, state = waypoints_to_controls(
            waypoints, float(rng.uniform(0.0, 10.0)), state, 0.1
        )
        assert 0.0 <= command.throttle <= 1.0
        assert 0.0 <= command.brake <= 1.0
        assert -1.0 <= command.steer <= 1.0
        assert not (command.throttle > 0.0 and command.brake > 0.0)


def test_integral_windup_is_bounded():
    """The integral term saturates at the windup limit."""
    loop = PidLoop(PidGains(0.0, 1.0, 0.0), windup=2.0)
    for _ in range(100):
        _, loop = loop.update(10.0, 0.1)
    assert loop.integral == pytest.approx(2.0)


def test_zero_error_is_a_fixed_point():
    """At zero error the integral holds and the derivative term vanishes."""
    gains = PidGains(0.5, 0.2, 0.3)
    loop = PidLoop(gains, windup=2.0, integral=0.7, previous_error=0.0)
    for _ in range(20):
        output, loop = loop.update(0.0, 0.1)
        assert loop.integral == pytest.approx(0.7)
        assert loop.previous_error == 0.0
        assert output == pytest.approx(gains.ki * 0.7)


def test_rejects_non_positive_dt(pid):
    """A zero time step is an error."""
    with pytest.raises(ValueError):
        waypoints_to_controls(np.zeros((4, 2)), 0.0, pid, 0.0)
