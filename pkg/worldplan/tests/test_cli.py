"""Tests for the command-line surface."""

import json

import pytest
import yaml
from click.testing import CliRunner

from worldplan.app import cli
from worldplan.eval.frechet import FEATURE_NETS_FILE
from worldplan.tests.conftest import MICRO_OVERRIDES


@pytest.fixture
def config_file(tmp_path):
    """Write the micro config to a YAML file."""
    path = tmp_path / "micro.yml"
    path.write_text(yaml.safe_dump(MICRO_OVERRIDES))
    return path


@pytest.mark.parametrize("command", ["collect", "train", "eval", "rollout", "ablate"])
def test_help(command):
    """Every subcommand documents the shared options."""
    result = CliRunner().invoke(cli, [command, "--help"])
    assert result.exit_code == 0
    assert "--set" in result.output
    assert "--config" in result.output


def test_unknown_setting_is_rejected(tmp_path):
    """Overrides naming unknown keys fail before any work is done."""
    result = CliRunner().invoke(
        cli, ["collect", "--out", str(tmp_path), "--set", "lm.bogus=1"]
    )
    assert result.exit_code != 0
    assert "bogus" in result.output
    assert not (tmp_path / "dataset").exists()


def test_missing_config_file(tmp_path):
    """A config path that does not exist is reported, not raised."""
    result = CliRunner().invoke(
        cli, ["collect", "--config", str(tmp_path / "absent.yml")]
    )
    assert result.exit_code == 1
    assert "does not exist" in result.output


def test_unknown_arm_choice():
    """Ablation arms are restricted to the registered names."""
    result = CliRunner().invoke(cli, ["ablate", "--arm", "w/o everything"])
    assert result.exit_code == 2


def test_collect_then_evaluate_expert(config_file, tmp_path):
    """Collection writes the dataset; the expert can be benchmarked right away."""
    out = tmp_path / "run"
    runner = CliRunner()
    result = runner.invoke(
        cli, ["collect", "--config", str(config_file), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert (out / "dataset" / "dataset.json").exists()
    assert (out / "dataset" / FEATURE_NETS_FILE).exists()

    result = runner.invoke(
        cli,
        [
            "eval",
            "--config",
            str(config_file),
            "--out",
            str(out),
            "--policy",
            "expert",
        ],
    )
    assert result.exit_code == 0, result.output
    metrics = json.loads((out / "eval" / "expert" / "metrics.json").read_text())
    assert metrics["policy"] == "expert"
    assert metrics["sampler_calls"] == 0
    assert 0.0 <= metrics["ds"] <= 1.0


def test_evaluate_without_checkpoint(config_file, tmp_path):
    """The learned policy needs a trained checkpoint."""
    result = CliRunner().invoke(
        cli, ["eval", "--config", str(config_file), "--out", str(tmp_path)]
    )
    assert result.exit_code == 1
    assert "No checkpoint" in result.output
