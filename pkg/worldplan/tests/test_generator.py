"""Tests for the multi-view world generator, rollouts and clip archives."""

import numpy as np
import pytest
import torch

from worldplan.errors import GeneratorNotReadyError, ViewCountError
from worldplan.generator.archive import read_clip_archive, write_clip_archive
from worldplan.generator.rollout import autoregressive_rollout, concatenate
from worldplan.generator.world import WorldGenerator, to_pixels, to_signal
from worldplan.streams import ClipFramesStream


@pytest.fixture
def generator(config) -> WorldGenerator:
    """Return a two-frame generator for 16 px rasters."""
    torch.manual_seed(0)
    return WorldGenerator.from_config(config)


def inputs(batch: int = 2, queries: int = 4, width: int = 32):
    """Return a last frame and world vectors."""
    return torch.rand(batch, 3, 16, 16, 3), torch.randn(batch, queries, width)


def test_signal_mapping():
    """Pixels map to [-1, 1] and back."""
    pixels = torch.rand(5)
    assert torch.allclose(to_pixels(to_signal(pixels)), pixels)


def test_condition_shapes(generator, config):
    """Each view gets its own conditioning sequence."""
    last_frame, world = inputs()
    cond = generator.condition(last_frame, world)
    assert len(cond) == 3
    assert cond.views.shape[:2] == (2, 3)
    assert cond.views.shape[-1] == config["generator"]["cond_dim"]
    assert cond.sequence(1).shape == cond.views[:, 1].shape


def test_condition_without_world_queries(generator):
    """Zero world queries leave the appearance path alone."""
    last_frame, _ = inputs()
    cond = generator.condition(last_frame, torch.zeros(2, 0, 32))
    assert torch.isfinite(cond.views).all()


def test_condition_checks_views(generator):
    """Conditioning needs all three views."""
    with pytest.raises(ViewCountError):
        generator.condition(torch.rand(1, 2, 16, 16, 3), torch.randn(1, 4, 32))


def test_diffusion_loss_backpropagates(generator):
    """The denoising loss is finite and reaches the U-Net and the fusion block."""
    last_frame, world = inputs()
    cond = generator.condition(last_frame, world)
    clip = torch.rand(2, 3, 2, 16, 16, 3)
    loss = generator.diffusion_loss(
        clip, cond, last_frame, torch.Generator().manual_seed(0)
    )
    assert torch.isfinite(loss)
    loss.backward()
    grads = [p.grad for p in generator.fusion.parameters() if p.grad is not None]
    assert grads


def test_sampling_requires_training(generator):
    """An untrained generator refuses to sample."""
    last_frame, world = inputs(batch=1)
    with pytest.raises(GeneratorNotReadyError):
        generator.sample_clip(last_frame, generator.condition(last_frame, world))


def test_sample_clip(generator):
    """A ready generator returns a clip of frames for every view in [0, 1]."""
    generator.mark_ready()
    last_frame, world = inputs(batch=1)
    with torch.no_grad():
        clip = generator.sample_clip(
            last_frame,
            generator.condition(last_frame, world),
            torch.Generator().manual_seed(0),
            sample_steps=3,
        )
    assert clip.video.shape == (1, 3, 2, 16, 16, 3)
    assert clip.frames == 2
    assert clip.final_frame().shape == (1, 3, 16, 16, 3)
    assert 0.0 <= clip.video.min().item() and clip.video.max().item() <= 1.0


def test_rollout_chains_clips(generator):
    """Each step adds a clip; teacher frames must cover the horizon."""
    generator.mark_ready()
    generator.sample_steps = 2
    init, _ = inputs(batch=1)
    seen = []

    def planner(frame):
        seen.append(frame.clone())
        return torch.zeros(1, 4, 32)

    clips = autoregressive_rollout(init, 3, planner, generator)
    assert len(clips) == 3
    assert concatenate(clips).shape == (1, 3, 6, 16, 16, 3)
    assert torch.equal(seen[0], init)
    assert torch.equal(seen[1], clips[0].final_frame())

    teacher = [torch.full((1, 3, 16, 16, 3), 0.5)] * 2
    seen.clear()
    autoregressive_rollout(init, 3, planner, generator, teacher_frames=teacher)
    assert torch.equal(seen[1], teacher[0])

    with pytest.raises(ValueError):
        autoregressive_rollout(init, 3, planner, generator, teacher_frames=teacher[:1])
    with pytest.raises(ValueError):
        autoregressive_rollout(init, 0, planner, generator)


def test_clip_archive_is_lossless(tmp_path):
    """Byte-valued clips survive the PNG archive exactly."""
    rng = np.random.default_rng(0)
    video = rng.integers(0, 256, size=(3, 2, 16, 16, 3)).astype(np.float32) / 255.0
    stream = write_clip_archive(video, tmp_path, "clip0", config_hash="abc")
    rows = list(stream.read())
    assert len(rows) == 6
    assert rows[0]["path"] == "clip0/left_0000.png"
    assert rows[-1]["timestamp"] == pytest.approx(0.2)
    assert np.array_equal(read_clip_archive(tmp_path, "clip0"), video)
    assert list(ClipFramesStream(tmp_path / "clip_frames.jsonl").read()) == rows
    with pytest.raises(FileNotFoundError):
        read_clip_archive(tmp_path, "clip1")
