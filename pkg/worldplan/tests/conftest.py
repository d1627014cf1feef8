"""Shared fixtures: a desk-scale config small enough for unit tests."""

import pytest

from worldplan.app import WorldPlan
from worldplan.config import load_config
from worldplan.microworld.scenario import generate_scenario

MICRO_OVERRIDES = {
    "microworld": {"image_size": 16, "max_episode_steps": 40},
    "encoder": {"d_model": 16, "bev_size": 4, "layers": 1, "heads": 2},
    "lm": {
        "d_model": 32,
        "layers": 1,
        "heads": 2,
        "t_max": 2,
        "qformer_queries": 2,
        "qformer_layers": 1,
        "action_queries": 4,
        "world_queries": 4,
        "max_context": 64,
    },
    "generator": {
        "frames": 2,
        "cond_dim": 16,
        "channels": [8, 16],
        "diffusion_steps": 10,
        "reference_steps": 100,
    },
    "training": {
        "iterations": {"stage1": 2, "stage2": 2, "stage3": 2},
        "batch_size": 2,
        "log_every": 1,
        "rollout_sample_steps": 2,
    },
    "collect": {
        "scenarios": 2,
        "steps": 12,
        "track": "tiny",
        "feature_iterations": 2,
        "feature_samples": 8,
    },
    "eval": {
        "runs": 1,
        "routes": 2,
        "track": "tiny",
        "horizons": [2, 4],
        "compare_horizons": [2, 4],
        "horizon_scenarios": 2,
        "horizon_track": "tiny",
        "bootstrap": 10,
    },
}


def micro_config(*overrides: dict) -> dict:
    """Return the micro config with further overrides layered on top."""
    return load_config(
        WorldPlan.config_jsonschema, None, [MICRO_OVERRIDES, *overrides]
    )


@pytest.fixture
def config(tmp_path) -> dict:
    """Return a micro config writing into a temporary directory."""
    return micro_config({"out_dir": str(tmp_path / "run")})


@pytest.fixture
def scenario():
    """Return a short, fully scripted scenario."""
    return generate_scenario(7, track="tiny", misleading_rate=0.0)
