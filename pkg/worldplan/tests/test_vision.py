"""Tests for the multi-view encoder and the perception heads."""

import numpy as np
import pytest
import torch

from worldplan.errors import ResolutionMismatchError, ViewCountError
from worldplan.microworld.expert import Box, PerceptionTargets
from worldplan.microworld.render import Renderer
from worldplan.microworld.scenario import generate_scenario
from worldplan.vision.encoder import VisionEncoder
from worldplan.vision.heads import (
    PerceptionHeads,
    cell_centers,
    detection_targets,
    greedy_match,
    light_accuracy,
    pretrain_losses,
)


@pytest.fixture
def encoder(config) -> VisionEncoder:
    """Return a small encoder for 16 px rasters."""
    torch.manual_seed(0)
    return VisionEncoder.from_config(config)


def test_token_count(encoder, config):
    """A frame becomes H*W BEV tokens plus four waypoint and one light token."""
    frame = Renderer(image_size=16).render_views(
        generate_scenario(1, track="tiny").initial_state()
    )
    tokens = encoder(frame)
    bev = config["encoder"]["bev_size"]
    assert encoder.num_tokens == bev * bev + 5
    assert len(tokens) == encoder.num_tokens
    assert tokens.tokens.shape == (1, bev * bev + 5, config["encoder"]["d_model"])


def test_bev_queries_are_learned(encoder, config):
    """BEV queries and spatial embeddings are trained parameters."""
    bev = config["encoder"]["bev_size"]
    d_model = config["encoder"]["d_model"]
    params = dict(encoder.named_parameters())
    assert params["bev_queries"].shape == (bev * bev, d_model)
    assert params["spatial_embed"].shape == (1, encoder.feature_size**2, d_model)
    encoder(torch.rand(1, 3, 16, 16, 3)).bev.sum().backward()
    assert encoder.bev_queries.grad.abs().sum() > 0.0
    assert encoder.spatial_embed.grad.abs().sum() > 0.0


def test_rejects_wrong_inputs(encoder):
    """Resolution and view count are checked before encoding."""
    with pytest.raises(ResolutionMismatchError):
        encoder(torch.zeros(1, 3, 24, 24, 3))
    with pytest.raises(ViewCountError):
        encoder(torch.zeros(1, 2, 16, 16, 3))
    with pytest.raises(ResolutionMismatchError):
        VisionEncoder(image_size=20)


def test_cell_centers():
    """Row 0 is farthest ahead, column 0 farthest left."""
    grid = cell_centers(4, 20.0)
    assert grid.shape == (16, 2)
    assert np.allclose(grid[0], [15.0, 15.0])
    assert np.allclose(grid[-1], [-15.0, -15.0])


def test_greedy_match_uses_distinct_cells():
    """Two boxes closest to the same cell still get different cells."""
    grid = cell_centers(4, 20.0)
    assignment = greedy_match(np.array([[15.0, 15.0], [14.0, 14.0]]), grid)
    assert assignment[0] == 0
    assert assignment[1] != 0
    assert greedy_match(np.zeros((0, 2)), grid) == []


def perception_batch():
    """Return two frames of targets: one box plus red light, nothing plus none."""
    box = Box("vehicle", (8.0, 1.0), (4.5, 2.0), 0.0)
    waypoints = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    return [
        PerceptionTargets((box,), "red", waypoints),
        PerceptionTargets((), "none", np.zeros((4, 2))),
    ]


def test_detection_targets():
    """Each box marks exactly one cell."""
    matched = detection_targets(perception_batch(), 4, 20.0)
    assert matched.objectness.sum().item() == 1.0
    assert matched.matched[1].sum().item() == 0


def test_pretrain_losses_are_finite(encoder, config):
    """Detection, waypoint and light losses are finite and backpropagate."""
    heads = PerceptionHeads(config["encoder"]["d_model"])
    outputs = heads(encoder(torch.rand(2, 3, 16, 16, 3)))
    assert outputs.objectness.shape == (2, 16)
    assert outputs.waypoints.shape == (2, 4, 2)
    assert outputs.light_logits.shape == (2, 3)
    losses = pretrain_losses(outputs, perception_batch(), 4, 20.0)
    for value in (losses.det, losses.wp, losses.light, losses.total):
        assert torch.isfinite(value)
    losses.total.backward()
    assert heads.detection.weight.grad is not None
    assert 0.0 <= light_accuracy(outputs, perception_batch()) <= 1.0
