"""Tests for the microworld: rendering, expert, infractions, scenarios, episodes."""

import dataclasses

import numpy as np
import pytest

from worldplan.control.pid import ControlCommand, PidState, waypoints_to_controls
from worldplan.errors import InfeasibleInstructionError, ResolutionMismatchError
from worldplan.eval.agents import ExpertAgent
from worldplan.microworld.dynamics import step_dynamics
from worldplan.microworld.episode import DrivingEpisode
from worldplan.microworld.expert import (
    WAYPOINT_TIMES,
    check_feasible,
    expert_labels,
    expert_policy,
    instruction_completed,
    perception_targets,
)
from worldplan.microworld.geometry import Polyline, to_local
from worldplan.microworld.infractions import InfractionEvent, detect_infractions
from worldplan.microworld.instructions import (
    Instruction,
    all_sentences,
    grammar_words,
    kind_of,
    phrase,
)
from worldplan.microworld.render import (
    PALETTE,
    VIEW_NAMES,
    MultiViewFrame,
    Renderer,
    render_views,
)
from worldplan.microworld.scenario import (
    LightScript,
    Scenario,
    generate_scenario,
)
from worldplan.microworld.state import Agent, Pose, TrafficLight, WorldState
from worldplan.streams import EpisodeStepsStream

FOLLOW = Instruction("follow the lane", "follow", end_s=90.0)
ROUTE = ((0.0, 0.0), (100.0, 0.0))


def red_light(route_s: float = 10.0) -> TrafficLight:
    """Return a light that is red forever, stop line across the road at x=route_s."""
    return TrafficLight(
        position=(route_s, -4.5),
        stop_line=((route_s, 2.0), (route_s, -2.0)),
        route_s=route_s,
        green_s=0.0,
        red_s=5.0,
    ).at(0.0)


def road_state(x: float = 0.0, y: float = 0.0, speed: float = 0.0, **extra):
    """Return an ego on a straight 100 m route along +x."""
    route = Polyline(np.array(ROUTE))
    s, _ = route.project(np.array([x, y]))
    return WorldState(
        ego=Pose(x, y, 0.0),
        ego_speed=speed,
        route=route,
        roads=(route,),
        route_s=s,
        **extra,
    )


def light_scenario(green: bool = False) -> Scenario:
    """Return a straight route with one light 10 m ahead of the start."""
    light = LightScript(
        position=(10.0, -4.5),
        stop_line=((10.0, 2.0), (10.0, -2.0)),
        route_s=10.0,
        green_s=5.0 if green else 0.0,
        red_s=0.0 if green else 5.0,
    )
    return Scenario(
        name="light",
        seed=0,
        track="tiny",
        route=ROUTE,
        roads=(ROUTE,),
        lights=(light,),
    )


def test_render_shapes_and_colors():
    """Three views of h x w x 3 in [0, 1]; an agent ahead shows in the front view."""
    vehicle = Agent("vehicle", Polyline(np.array([[10.0, 0.0], [11.0, 0.0]])), 0.0)
    state = road_state(agents=(vehicle,))
    renderer = Renderer(image_size=16)
    frame = renderer.render_views(state)
    assert frame.images.shape == (len(VIEW_NAMES), 16, 16, 3)
    assert frame.size == 16
    assert 0.0 <= frame.images.min() and frame.images.max() <= 1.0
    front = frame.view("front")
    assert np.allclose(front[11, 8], np.array(PALETTE["vehicle"]) / 255.0)
    assert np.allclose(front[0, 0], np.array(PALETTE["background"]) / 255.0)
    assert render_views(state, renderer).images.shape == frame.images.shape


def test_render_uint8_roundtrip():
    """Byte quantization of a rendered frame is lossless."""
    frame = Renderer(image_size=16).render_views(road_state())
    again = MultiViewFrame.from_uint8(frame.to_uint8())
    assert np.allclose(again.images, frame.images)


def test_frame_checks_views():
    """A frame needs exactly three RGB views."""
    with pytest.raises(ResolutionMismatchError):
        MultiViewFrame(np.zeros((2, 16, 16, 3), dtype=np.float32))
    with pytest.raises(ResolutionMismatchError):
        MultiViewFrame(np.zeros((3, 16, 16, 4), dtype=np.float32))


@pytest.mark.parametrize(
    "position,visible",
    [
        ((10.0, 0.0), set(VIEW_NAMES)),
        ((-8.0, 12.0), {"left"}),
        ((-8.0, -12.0), {"right"}),
        ((-10.0, 0.0), set()),
    ],
)
def test_views_show_what_their_frustum_holds(position, visible):
    """A vehicle appears in exactly the views whose frustum contains it."""
    x, y = position
    vehicle = Agent("vehicle", Polyline(np.array([[x, y], [x + 1.0, y]])), 0.0)
    state = road_state(agents=(vehicle,))
    renderer = Renderer(image_size=16)
    frame = renderer.render_views(state)
    color = np.array(PALETTE["vehicle"]) / 255.0
    for view in VIEW_NAMES:
        center = to_local(np.array([position]), *renderer.camera_pose(state, view))
        assert renderer.in_frustum(center[0]) == (view in visible)
        pixels = np.isclose(frame.view(view), color, atol=1e-3).all(axis=-1)
        assert pixels.any() == (view in visible), view


def test_grammar():
    """Every sentence maps back to its kind and uses grammar words only."""
    words = set(grammar_words())
    for sentence in all_sentences():
        assert set(sentence.split()) <= words
        kind_of(sentence)
    assert kind_of(phrase("left", 1, "please")) == "left"
    with pytest.raises(ValueError):
        phrase("fly")
    with pytest.raises(ValueError):
        kind_of("drive to the moon")


def test_expert_follows_route():
    """Four ego-frame waypoints ahead on the centerline, increasing in x."""
    waypoints, completed = expert_policy(road_state(speed=5.0), FOLLOW)
    assert waypoints.shape == (len(WAYPOINT_TIMES), 2)
    assert np.all(np.diff(waypoints[:, 0]) > 0.0)
    assert np.allclose(waypoints[:, 1], 0.0, atol=1e-9)
    assert not completed


def test_expert_stops_for_red_light():
    """Waypoints stay behind the stop line of a red light."""
    state = road_state(speed=3.0, lights=(red_light(),))
    waypoints, _ = expert_policy(state, FOLLOW)
    front = state.params.length / 2.0
    assert np.all(waypoints[:, 0] + front <= 10.0)
    check_feasible(state, Instruction("stop at the red light", "stop"))


def test_infeasible_instructions():
    """Distractors and impossible commands raise; labels fall back to the route."""
    state = road_state(speed=4.0)
    for kind in ("lane_left", "uturn", "left", "stop"):
        with pytest.raises(InfeasibleInstructionError) as caught:
            check_feasible(state, Instruction(phrase(kind), kind))
        assert caught.value.reason
    misleading = Instruction(phrase("uturn"), "uturn", misleading=True)
    waypoints, completed = expert_labels(state, misleading)
    route_waypoints, _ = expert_labels(state, FOLLOW)
    assert np.allclose(waypoints, route_waypoints)
    assert not completed


def test_instruction_completion():
    """Route-bound instructions complete at their end arc length."""
    assert not instruction_completed(road_state(x=50.0), FOLLOW)
    assert instruction_completed(road_state(x=95.0), FOLLOW)
    stop = Instruction("stop at the red light", "stop")
    assert instruction_completed(road_state(), stop)
    near = road_state(x=10.0 - 2.25 - 1.0, lights=(red_light(),))
    assert instruction_completed(near, stop)


def test_perception_targets():
    """Agents inside the BEV range become boxes in the ego frame."""
    vehicle = Agent("vehicle", Polyline(np.array([[8.0, 1.0], [9.0, 1.0]])), 0.0)
    far = Agent("pedestrian", Polyline(np.array([[60.0, 0.0], [61.0, 0.0]])), 0.0)
    state = road_state(agents=(vehicle, far), lights=(red_light(),))
    targets = perception_targets(state, np.zeros((4, 2)), bev_range=20.0)
    assert len(targets.boxes) == 1
    box = targets.boxes[0]
    assert box.label == "vehicle"
    assert box.center == pytest.approx((8.0, 1.0))
    assert targets.light_state == "red"


def test_coasting_never_gains_speed():
    """Without throttle or brake the ego only slows down."""
    state = road_state(speed=8.0)
    speeds = [state.ego_speed]
    for _ in range(100):
        state = step_dynamics(state, ControlCommand(0.0, 0.0, 0.3), 0.1)
        speeds.append(state.ego_speed)
    assert all(b <= a for a, b in zip(speeds, speeds[1:]))
    assert speeds[-1] < speeds[0]


def test_tracks_straight_road_closed_loop(config):
    """Expert waypoints through the PID loops keep the ego on a straight lane."""
    dt = config["microworld"]["dt"]
    pid = PidState.from_config(config["control"])
    state = road_state(y=0.1)
    deviations = []
    for _ in range(100):
        waypoints, _ = expert_labels(state, FOLLOW)
        command, pid = waypoints_to_controls(waypoints, state.ego_speed, pid, dt)
        state = step_dynamics(state, command, dt)
        deviations.append(abs(state.lateral_offset))
    assert state.route_s > 10.0
    assert max(deviations) < 0.3


def test_collision_reported_on_onset():
    """A contact counts once, when it begins."""
    vehicle = Agent("vehicle", Polyline(np.array([[5.0, 0.0], [6.0, 0.0]])), 0.0)
    before = road_state(x=-10.0, agents=(vehicle,))
    after = road_state(x=3.0, agents=(vehicle,))
    events = detect_infractions(before, after)
    assert [e.kind for e in events] == ["collision_vehicle"]
    assert detect_infractions(after, after) == []


def test_red_light_violation():
    """The ego front crossing a red stop line is a violation; green is not."""
    light = red_light()
    before = road_state(x=7.0, lights=(light,))
    after = road_state(x=9.0, clock=0.1, lights=(light,))
    events = detect_infractions(before, after)
    assert [e.kind for e in events] == ["red_light_violation"]
    assert events[0].timestamp == pytest.approx(0.1)
    green = dataclasses.replace(light, green_s=5.0, red_s=0.0).at(0.0)
    assert detect_infractions(
        road_state(x=7.0, lights=(green,)), road_state(x=9.0, lights=(green,))
    ) == []


def test_route_deviation_on_onset():
    """Leaving the tolerance band counts once."""
    events = detect_infractions(road_state(y=0.0), road_state(y=4.0), 3.0)
    assert [e.kind for e in events] == ["route_deviation"]
    assert detect_infractions(road_state(y=4.0), road_state(y=5.0), 3.0) == []
    with pytest.raises(ValueError):
        InfractionEvent("speeding", 0.0)


def test_scenario_generation_is_deterministic(scenario):
    """The same seed gives the same scenario; other seeds differ."""
    assert generate_scenario(7, track="tiny", misleading_rate=0.0) == scenario
    assert generate_scenario(8, track="tiny", misleading_rate=0.0) != scenario
    assert len(scenario.intersections) == 1
    with pytest.raises(ValueError):
        generate_scenario(7, track="marathon")


def test_scenario_save_load(scenario, tmp_path):
    """Scenario files reload to an equal scenario."""
    path = scenario.save(tmp_path / "scenario.yaml")
    assert Scenario.load(path) == scenario


def test_scenario_perturbation(scenario):
    """Perturbation only delays lights and agents, reproducibly."""
    perturbed = scenario.perturbed(3)
    assert perturbed == scenario.perturbed(3)
    assert perturbed.route == scenario.route
    assert perturbed.instructions == scenario.instructions
    for before, after in zip(scenario.agents, perturbed.agents):
        assert after.start_time >= before.start_time


def test_episode_stop_notice():
    """A red light within the notice distance replaces the scripted instruction."""
    config = {
        "dt": 0.1,
        "max_episode_steps": 10,
        "image_size": 16,
        "view_range": 32.0,
        "side_yaw_deg": 60.0,
        "road_width": 8.0,
        "notice_distance": 15.0,
        "deviation_tolerance": 3.0,
    }
    assert DrivingEpisode(light_scenario(), config).current_instruction().kind == (
        "stop"
    )
    green = DrivingEpisode(light_scenario(green=True), config)
    assert green.current_instruction().kind == "follow"


def test_expert_waits_at_red_light(config):
    """Driven by the PID controllers, the expert stops short of the stop line."""
    episode = DrivingEpisode(light_scenario(), config["microworld"])
    agent = ExpertAgent(config)
    frame = episode.reset()
    agent.reset(episode)
    for _ in range(60):
        _, events, done = episode.step(agent.act(episode, frame))
        assert not events
        frame = episode.observe()
    assert episode.state.ego_front[0] < 10.0
    assert episode.state.ego_speed < 0.5


def test_episode_log_and_timeout(config, scenario, tmp_path):
    """Braking in place times out; the log validates and further steps fail."""
    episode = DrivingEpisode(scenario, config["microworld"])
    frame = episode.reset()
    assert frame.images.shape == (3, 16, 16, 3)
    done = False
    while not done:
        _, _, done = episode.step(ControlCommand(brake=1.0))
    record = episode.record
    assert record.termination == "timeout"
    assert len(record.steps) == config["microworld"]["max_episode_steps"]
    assert [s["step"] for s in record.steps] == list(range(len(record.steps)))
    assert record.duration == pytest.approx(0.1 * len(record.steps))
    assert record.route_completion == pytest.approx(0.0)
    assert record.write(EpisodeStepsStream(tmp_path / "steps.jsonl")) == len(
        record.steps
    )
    with pytest.raises(RuntimeError):
        episode.step(ControlCommand())
