"""Tests for the agent, checkpoints, data collection and the curriculum."""

import functools
import json

import numpy as np
import pytest
import torch

from worldplan.errors import CheckpointError, CheckpointLineageError, ConfigError
from worldplan.eval.agents import LearnedAgent
from worldplan.lm.core import SequenceContext
from worldplan.microworld.episode import DrivingEpisode
from worldplan.streams import LossReportStream
from worldplan.tests.conftest import micro_config
from worldplan.training.checkpoint import (
    check_lineage,
    expected_parent,
    load_checkpoint,
    read_checkpoint_info,
    save_checkpoint,
)
from worldplan.training.data import (
    CollectedDataset,
    SequenceDataset,
    collect_dataset,
    verify_dataset_labels,
)
from worldplan.training.model import DrivingAgent
from worldplan.training.pipeline import checkpoint_path, train_curriculum
from worldplan.training.stages import FROZEN_GROUPS, StageConfig, planning_losses


@pytest.fixture
def agent(config) -> DrivingAgent:
    """Return a micro agent."""
    torch.manual_seed(0)
    return DrivingAgent(config)


def test_freeze_matrix():
    """Each stage freezes exactly what the curriculum prescribes."""
    assert FROZEN_GROUPS[1] == {"lm", "generator"}
    assert FROZEN_GROUPS[2] == {"encoder"}
    assert FROZEN_GROUPS[3] == {"encoder", "generator"}
    assert StageConfig(2, 1, frozen=FROZEN_GROUPS[2]).trainable == (
        "heads",
        "lm",
        "generator",
    )


def test_stage_config_checks(config):
    """Missing freezes and wrong rollout depths are config errors."""
    with pytest.raises(ConfigError):
        StageConfig(stage=2, iterations=1, frozen=frozenset())
    with pytest.raises(ConfigError):
        StageConfig(stage=3, iterations=1, frozen=FROZEN_GROUPS[3], rollout_depth=1)
    with pytest.raises(ConfigError):
        StageConfig(stage=2, iterations=1, frozen=FROZEN_GROUPS[2], rollout_depth=2)
    with pytest.raises(ConfigError):
        StageConfig(stage=4, iterations=1)
    settings = StageConfig.for_stage(config, 3)
    assert settings.rollout_depth == 2
    assert settings.sample_steps == 2
    assert settings.frozen == FROZEN_GROUPS[3]


def test_expected_parent():
    """Skipped stages are passed over in the lineage."""
    assert expected_parent("stage1") is None
    assert expected_parent("stage2") == "stage1"
    assert expected_parent("stage3") == "stage2"
    assert expected_parent("stage3", (2,)) == "stage1"
    assert expected_parent("stage2", (1,)) is None
    assert expected_parent("stage3", (1, 2)) is None


def test_agent_groups(agent, config):
    """The generator exists only with world queries; heads can be dropped."""
    assert set(agent.group_hashes()) == {"encoder", "heads", "lm", "generator"}
    agent.set_trainable(("lm",))
    assert all(not p.requires_grad for p in agent.encoder.parameters())
    assert all(p.requires_grad for p in agent.lm.parameters())
    assert not agent.encoder.training
    agent.strip_heads()
    assert agent.group("heads") == []
    no_world = DrivingAgent(micro_config({"lm": {"world_queries": 0}}))
    assert no_world.generator is None
    assert no_world.group("generator") == []
    with pytest.raises(KeyError):
        agent.group("optimizer")


def test_agent_plans_from_history(agent):
    """A frame history and an instruction give waypoints and world features."""
    history = torch.rand(2, 3, 3, 16, 16, 3)
    instruction = agent.encode_instructions(["turn left", "follow the lane"])
    assert instruction.shape == (2, 16)
    ctx = agent.history_context(history, instruction, torch.zeros(2, 3))
    assert len(ctx) == 2
    plan, world = agent.plan(ctx)
    assert plan.waypoints.shape == (2, 4, 2)
    assert plan.completed.shape == (2,)
    assert world.shape == (2, 4, 32)


def test_autoregressive_planning():
    """Autoregressive decoding feeds its own waypoints back."""
    torch.manual_seed(0)
    agent = DrivingAgent(micro_config({"lm": {"action_mode": "autoregressive"}}))
    history = torch.rand(1, 2, 3, 16, 16, 3)
    ctx = agent.history_context(history, agent.encode_instructions(["turn left"]))
    plan, _ = agent.plan(ctx)
    assert plan.waypoints.shape == (1, 4, 2)


def test_waypoint_loss_is_mean_absolute_error(agent):
    """The waypoint loss averages the absolute error of every coordinate."""
    agent.eval()
    torch.manual_seed(2)
    history = torch.rand(2, 2, 3, 16, 16, 3)
    instruction = agent.encode_instructions(["turn left", "follow the lane"])
    ctx = agent.history_context(history, instruction, torch.zeros(2, 3))
    truth = torch.randn(2, 4, 2)
    with torch.no_grad():
        loss_wp, _, _ = planning_losses(agent, ctx, truth, torch.ones(2))
        predicted = agent.plan(ctx)[0].waypoints.tolist()
    errors = []
    for b in range(2):
        for k in range(4):
            for c in range(2):
                errors.append(abs(predicted[b][k][c] - float(truth[b, k, c])))
    assert loss_wp.item() == pytest.approx(sum(errors) / len(errors), rel=1e-5)


def test_checkpoint_roundtrip(agent, config, tmp_path):
    """A stripped agent saves and reloads with identical parameters."""
    with pytest.raises(CheckpointError):
        save_checkpoint(agent, tmp_path / "s1.pt", "stage1", config)
    agent.strip_heads()
    info = save_checkpoint(agent, tmp_path / "s1.pt", "stage1", config)
    assert info.parent_hash is None
    assert info.frozen == ("encoder",)
    child = save_checkpoint(agent, tmp_path / "s2.pt", "stage2", config, info)
    assert child.parent_hash == info.checkpoint_hash
    assert child.checkpoint_hash != info.checkpoint_hash

    loaded, loaded_info = load_checkpoint(tmp_path / "s2.pt", config)
    assert loaded_info.checkpoint_hash == child.checkpoint_hash
    assert loaded.group_hashes() == agent.group_hashes()
    assert read_checkpoint_info(tmp_path / "s2.pt")[0].stage == "stage2"


def test_checkpoint_config_mismatch(agent, config, tmp_path):
    """A checkpoint only loads under the model config it was trained with."""
    agent.strip_heads()
    save_checkpoint(agent, tmp_path / "s1.pt", "stage1", config)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "s1.pt", micro_config({"lm": {"world_queries": 2}}))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pt", config)
    with pytest.raises(CheckpointError):
        save_checkpoint(agent, tmp_path / "s9.pt", "stage9", config)


def test_checkpoint_ignores_non_architecture_settings(agent, config, tmp_path):
    """Sampling, loss and schedule settings may change between save and load."""
    agent.strip_heads()
    save_checkpoint(agent, tmp_path / "s1.pt", "stage1", config)
    changed = micro_config(
        {
            "generator": {"sample_steps": 3, "beta_end": 0.03},
            "lm": {"completion_threshold": 0.7},
            "encoder": {"loss_weights": {"det": 2.0}},
        }
    )
    loaded, info = load_checkpoint(tmp_path / "s1.pt", changed)
    assert info.stage == "stage1"
    assert loaded.group_hashes() == agent.group_hashes()
    assert loaded.completion_threshold == pytest.approx(0.7)
    with pytest.raises(CheckpointError):
        load_checkpoint(
            tmp_path / "s1.pt", micro_config({"lm": {"action_mode": "autoregressive"}})
        )


def test_check_lineage(agent, config, tmp_path):
    """Stage 3 must descend from Stage 2 unless Stage 2 is skipped."""
    agent.strip_heads()
    stage1 = save_checkpoint(agent, tmp_path / "s1.pt", "stage1", config)
    check_lineage("stage2", stage1)
    check_lineage("stage3", stage1, skip_stages=(2,))
    check_lineage("stage1", None)
    with pytest.raises(CheckpointLineageError):
        check_lineage("stage3", stage1)
    with pytest.raises(CheckpointLineageError):
        check_lineage("stage2", None)


def test_missing_parent_checkpoint(config, tmp_path):
    """Resuming at Stage 3 without a Stage-2 checkpoint is a lineage error."""
    collect_dataset(config, tmp_path / "data")
    with pytest.raises(CheckpointLineageError):
        train_curriculum(config, tmp_path / "data", tmp_path / "run", stages=(3,))


def test_collect_dataset(config, tmp_path):
    """Collection writes tuples, episodes and scenarios that replay exactly."""
    info = collect_dataset(config, tmp_path / "data")
    assert info.episodes == 2
    assert info.count == 24
    summary = json.loads((tmp_path / "data" / "dataset.json").read_text())
    assert summary["checksum"] == info.checksum
    data = CollectedDataset(tmp_path / "data")
    assert len(data) == info.count
    assert len(data.episodes) == 2
    frames = data.frames("collect-0000")
    assert frames.shape == (13, 3, 16, 16, 3)
    assert frames.dtype == np.uint8
    assert verify_dataset_labels(tmp_path / "data", config) == pytest.approx(0.0)
    again = collect_dataset(config, tmp_path / "again")
    assert again.checksum == info.checksum


def test_sequence_dataset(config, tmp_path):
    """Samples carry history, per-step labels and ground-truth clips."""
    collect_dataset(config, tmp_path / "data")
    data = CollectedDataset(tmp_path / "data")
    dataset = SequenceDataset(data, lambda text: [1, 2, 3], 2, 2, depth=2)
    sample = dataset[0]
    assert sample["history"].shape == (2, 3, 16, 16, 3)
    assert sample["instruction"].shape == (2, 3)
    assert sample["waypoints"].shape == (2, 4, 2)
    assert sample["clip"].shape == (2, 3, 2, 16, 16, 3)
    assert len(dataset) == 2 * (12 - 2 * 2 + 1)
    assert dataset.samples[0][1] == 0


def test_episode_start_matches_training_layout(config, tmp_path, agent):
    """The first inference step builds the same LM input as a training sample."""
    collect_dataset(config, tmp_path / "data")
    data = CollectedDataset(tmp_path / "data")
    t_max = config["lm"]["t_max"]
    encode = functools.partial(
        agent.vocab.encode_padded, length=agent.instruction_length
    )
    dataset = SequenceDataset(data, encode, t_max, config["generator"]["frames"])
    episode_id, start = dataset.samples[0]
    sample = dataset[0]
    assert start == 0
    assert torch.equal(sample["history"][0], sample["history"][-1])
    assert torch.count_nonzero(sample["previous_action"]) == 0

    agent.eval()
    with torch.no_grad():
        trained = agent.history_context(
            sample["history"].unsqueeze(0),
            sample["instruction"],
            sample["previous_action"],
        )
        frame = torch.from_numpy(data.frame(episode_id, 0)).unsqueeze(0)
        inferred = SequenceContext.start(
            sample["instruction"], agent.frame_features(frame), t_max
        )
        expected, _ = agent.plan(trained)
        actual, _ = agent.plan(inferred)
    assert len(inferred) == len(trained) == t_max
    assert inferred.previous_action is not None
    torch.testing.assert_close(
        actual.waypoints, expected.waypoints, atol=1e-5, rtol=1e-5
    )


def test_learned_agent_first_step_fills_history(config, agent, scenario):
    """The first act sees a full history and the zero command."""
    learner = LearnedAgent(agent, config)
    episode = DrivingEpisode(scenario, config["microworld"])
    learner.act(episode, episode.observe())
    assert len(learner.ctx) == config["lm"]["t_max"]
    assert torch.count_nonzero(learner.ctx.previous_action) == 0
    learner.act(episode, episode.observe())
    assert len(learner.ctx) == config["lm"]["t_max"]
    assert learner.ctx.previous_action is not None


def test_plan_depends_on_frame_order(agent):
    """Reversing a two-frame history changes the plan."""
    agent.eval()
    torch.manual_seed(1)
    first, second = torch.rand(2, 1, 1, 3, 16, 16, 3).unbind(0)
    instruction = agent.encode_instructions(["follow the lane"])
    with torch.no_grad():
        forward, _ = agent.plan(
            agent.history_context(torch.cat([first, second], dim=1), instruction)
        )
        backward, _ = agent.plan(
            agent.history_context(torch.cat([second, first], dim=1), instruction)
        )
    assert (forward.waypoints - backward.waypoints).abs().max() > 1e-6


def test_single_frame_history_forgets_older_frames():
    """With t_max = 1 only the newest frame reaches the plan."""
    torch.manual_seed(0)
    agent = DrivingAgent(micro_config({"lm": {"t_max": 1}})).eval()
    torch.manual_seed(1)
    old_a, old_b, current = torch.rand(3, 1, 3, 16, 16, 3).unbind(0)
    instruction = agent.encode_instructions(["follow the lane"])
    action = torch.zeros(1, 3)
    plans = []
    with torch.no_grad():
        for old in (old_a, old_b):
            ctx = SequenceContext.start(instruction, agent.frame_features(old), 1)
            ctx = ctx.advance(instruction, agent.frame_features(current), action)
            plans.append(agent.plan(ctx)[0].waypoints)
    assert len(ctx) == 1
    torch.testing.assert_close(plans[0], plans[1], atol=1e-6, rtol=0.0)


@pytest.mark.slow
def test_curriculum_end_to_end(config, tmp_path):
    """All three stages run, keep their freezes and chain their checkpoints."""
    collect_dataset(config, tmp_path / "data")
    infos = train_curriculum(config, tmp_path / "data", tmp_path / "run")
    assert [info.stage for info in infos] == ["stage1", "stage2", "stage3"]
    assert infos[1].parent_hash == infos[0].checkpoint_hash
    assert infos[2].parent_hash == infos[1].checkpoint_hash
    assert infos[0].group_hashes["encoder"] == infos[1].group_hashes["encoder"]
    assert infos[1].group_hashes["encoder"] == infos[2].group_hashes["encoder"]
    assert infos[1].group_hashes["generator"] == infos[2].group_hashes["generator"]
    assert infos[0].group_hashes["lm"] != infos[1].group_hashes["lm"]
    assert infos[1].group_hashes["lm"] != infos[2].group_hashes["lm"]

    reports = list(LossReportStream(tmp_path / "run" / "loss_reports.jsonl").read())
    assert [r["stage"] for r in reports] == [1, 1, 2, 2, 3, 3]
    assert all(r["rollout_steps"] == 2 for r in reports if r["stage"] == 3)

    agent, info = load_checkpoint(checkpoint_path(tmp_path / "run", 3), config)
    assert bool(agent.generator.ready)
    assert info.stage == "stage3"


@pytest.mark.slow
def test_curriculum_without_stage_two(config, tmp_path):
    """Skipping Stage 2 links Stage 3 directly to Stage 1."""
    collect_dataset(config, tmp_path / "data")
    infos = train_curriculum(
        config, tmp_path / "data", tmp_path / "run", skip_stages=(2,)
    )
    assert [info.stage for info in infos] == ["stage1", "stage3"]
    assert infos[1].parent_hash == infos[0].checkpoint_hash


@pytest.mark.slow
def test_curriculum_is_reproducible(config, tmp_path):
    """Two seeded runs report the same losses and end with the same weights."""
    collect_dataset(config, tmp_path / "data")
    runs = []
    for name in ("first", "second"):
        infos = train_curriculum(config, tmp_path / "data", tmp_path / name)
        reports = list(LossReportStream(tmp_path / name / "loss_reports.jsonl").read())
        runs.append((reports, [info.group_hashes for info in infos]))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
