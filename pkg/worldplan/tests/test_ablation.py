"""Tests for ablation arms and the long-horizon study helpers."""

import numpy as np
import pytest
import torch

from worldplan.errors import UnknownArmError
from worldplan.eval.ablation import (
    ARMS,
    BASELINE,
    AblationTable,
    apply_arm,
    arm_slug,
    get_arm,
)
from worldplan.eval.closed_loop import evaluation_scenarios
from worldplan.eval.frechet import fit_feature_nets
from worldplan.eval.horizon import (
    ImaginationPlanner,
    compare_horizons,
    long_horizon_study,
    paired_bootstrap,
    predicted_action,
)
from worldplan.training.model import DrivingAgent


def test_baseline_is_unchanged(config):
    """The baseline arm applies no delta."""
    assert apply_arm(config, BASELINE) == config


def test_unknown_arm(config):
    """Only registered arms can be applied."""
    with pytest.raises(UnknownArmError):
        get_arm("w/o everything")
    with pytest.raises(UnknownArmError):
        apply_arm(config, "w/o everything")


@pytest.mark.parametrize(
    "name,queries", [("world queries: 64->32", 32), ("world queries: 64->16", 16)]
)
def test_world_query_arm(config, name, queries):
    """Shrinking the world queries touches nothing else."""
    arm = apply_arm(config, name)
    assert ARMS[name].table == "generation"
    assert arm["lm"]["world_queries"] == queries
    arm["lm"]["world_queries"] = config["lm"]["world_queries"]
    assert arm == config


def test_stage_arm_keeps_iteration_total(config):
    """Dropping Stage 3 moves its budget to Stage 2."""
    arm = apply_arm(config, "w/o stage-3 training")
    iterations = arm["training"]["iterations"]
    assert arm["training"]["skip_stages"] == [3]
    assert iterations["stage2"] == 4
    trained = sum(v for k, v in iterations.items() if k != "stage3")
    assert trained == sum(config["training"]["iterations"].values())
    assert config["training"]["skip_stages"] == []


def test_arm_slugs():
    """Arm names become distinct directory names."""
    assert arm_slug("w/o stage-3 training") == "wo-stage-3-training"
    assert arm_slug("world queries: 64->16") == "world-queries-64-16"
    assert len({arm_slug(name) for name in ARMS}) == len(ARMS)


def test_ablation_table_text():
    """Rows print under their table; missing proxies show as dashes."""
    table = AblationTable(
        rows=[
            {
                "arm": BASELINE,
                "table": "planning",
                "driving_score": 0.5,
                "driving_score_std": 0.1,
                "route_completion": 0.8,
                "infraction_score": 0.625,
                "fid_proxy": None,
                "fvd_proxy": None,
            }
        ]
    )
    text = table.table()
    assert text.startswith("[planning]")
    assert "0.6250" in text
    assert "[generation]" not in text


def test_compare_horizons_fallback():
    """An unstudied pair falls back to the extreme horizons."""
    assert compare_horizons([8, 16, 32], [8, 32]) == (8, 32)
    assert compare_horizons([8, 16, 32], [16, 64]) == (8, 32)


def test_paired_bootstrap_detects_degradation():
    """Later chunks drifting away from the reference raise the FVD."""
    rng = np.random.default_rng(0)
    real = rng.normal(size=(20, 1, 2, 4))
    generated = real.copy()
    generated[:, :, 1] += 3.0
    result = paired_bootstrap(real, generated, 1, 2, frames=4, samples=20)
    assert (result.low, result.high) == (4, 8)
    assert result.delta > 0.0
    assert result.fraction_positive == 1.0
    assert result.significant


def test_predicted_action_is_exclusive():
    """Coarse actions either throttle or brake."""
    moving = torch.tensor([[[1.0, 0.0], [2.0, 0.1], [3.0, 0.2], [4.0, 0.3]]])
    stopped = torch.zeros(1, 4, 2)
    actions = predicted_action(torch.cat([moving, stopped]), 0.5)
    assert actions.shape == (2, 3)
    assert actions[0, 0] > 0.0 and actions[0, 1] == 0.0
    assert actions[1, 0] == 0.0 and actions[1, 1] == 1.0


def test_imagination_planner_starts_with_full_history(config):
    """The first imagined step sees a full history and the zero command."""
    torch.manual_seed(0)
    model = DrivingAgent(config).eval()
    planner = ImaginationPlanner(model, [["follow the lane"] * 2], 0.2)
    with torch.no_grad():
        world = planner(torch.rand(2, 3, 16, 16, 3))
        assert len(planner.ctx) == config["lm"]["t_max"]
        assert torch.count_nonzero(planner.ctx.previous_action) == 0
        planner(torch.rand(2, 3, 16, 16, 3))
    assert world.shape == (2, 4, 32)
    assert len(planner.ctx) == config["lm"]["t_max"]
    assert planner.ctx.previous_action.shape == (2, 3)


@pytest.mark.slow
def test_long_horizon_study(config):
    """Every horizon and mode is scored and the bootstrap compares the pair."""
    torch.manual_seed(0)
    model = DrivingAgent(config)
    model.generator.mark_ready()
    rng = np.random.default_rng(0)
    nets = fit_feature_nets(
        rng.uniform(size=(8, 16, 16, 3)).astype(np.float32),
        rng.uniform(size=(8, 2, 16, 16, 3)).astype(np.float32),
        iterations=2,
        batch_size=4,
    )
    study = long_horizon_study(
        model, evaluation_scenarios(config), config, nets, keep_videos=True
    )
    assert len(study.reports) == 4
    report = study.report(4)
    assert report.samples == 2 * 3 * 2
    assert report.to_record("abc")["config_hash"] == "abc"
    assert study.bootstrap is not None
    assert study.videos["autoregressive"].shape == (2, 3, 4, 16, 16, 3)
    assert "FVD" in study.table()
