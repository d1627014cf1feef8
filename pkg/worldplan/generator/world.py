"""Multi-view conditional video diffusion model."""

import logging
from dataclasses import dataclass
from typing import Optional

import torch
from einops import rearrange
from torch import Tensor, nn

from worldplan.errors import GeneratorNotReadyError
from worldplan.generator.conditioning import (
    AppearanceEncoder,
    MultiViewFusion,
    MultiViewWorldEmbedding,
)
from worldplan.generator.diffusion import GaussianDiffusion
from worldplan.generator.schedule import NoiseSchedule
from worldplan.generator.unet import VideoUNet


@dataclass
class GeneratedClip:
    """Video of shape (batch, views, frames, h, w, 3), values in [0, 1]."""

    video: Tensor

    @property
    def frames(self) -> int:
        """Return the number of frames per view."""
        return int(self.video.shape[2])

    def final_frame(self) -> Tensor:
        """Return the last frame of every view, shape (batch, views, h, w, 3)."""
        return self.video[:, :, -1]


def to_signal(pixels: Tensor) -> Tensor:
    """Map [0, 1] pixels to the [-1, 1] diffusion space."""
    return pixels * 2.0 - 1.0


def to_pixels(signal: Tensor) -> Tensor:
    """Map diffusion samples back to [0, 1] pixels."""
    return ((signal + 1.0) / 2.0).clamp(0.0, 1.0)


class WorldGenerator(nn.Module):
    """Generates the next clip of every view from the last frame and world queries.

    The appearance encoder and the fusion block turn the last frame and the LM
    world vectors into one conditioning sequence per view; the video U-Net
    denoises all views in one batch, each view cross-attending only to its own
    sequence.
    """

    def __init__(
        self,
        image_size: int = 64,
        frames: int = 8,
        world_dim: int = 256,
        cond_dim: int = 128,
        channels=(64, 128, 128),
        schedule: Optional[NoiseSchedule] = None,
        multiview_fusion: bool = True,
        sample_steps: Optional[int] = None,
        views: int = 3,
        heads: int = 4,
    ):
        """Initialize the generator."""
        super().__init__()
        self.image_size = image_size
        self.frames = frames
        self.views = views
        self.sample_steps = sample_steps
        self.appearance = AppearanceEncoder(cond_dim)
        self.fusion = MultiViewFusion(
            cond_dim, world_dim, views, heads, multiview_fusion
        )
        self.unet = VideoUNet(channels, cond_dim, frames, views, heads)
        self.diffusion = GaussianDiffusion(schedule or NoiseSchedule())
        self.register_buffer("ready", torch.tensor(False))
        self.logger = logging.getLogger("worldplan.generator")

    @classmethod
    def from_config(cls, config: dict) -> "WorldGenerator":
        """Build the generator from the full run config."""
        section = config["generator"]
        return cls(
            image_size=config["microworld"]["image_size"],
            frames=section["frames"],
            world_dim=config["lm"]["d_model"],
            cond_dim=section["cond_dim"],
            channels=tuple(section["channels"]),
            schedule=NoiseSchedule.from_config(section),
            multiview_fusion=section["multiview_fusion"],
            sample_steps=section.get("sample_steps"),
        )

    def mark_ready(self) -> None:
        """Flag the denoiser as trained (or loaded from a trained checkpoint)."""
        self.ready.fill_(True)

    def condition(self, last_frame: Tensor, world: Tensor) -> MultiViewWorldEmbedding:
        """Return per-view conditioning from the last frame and the world features."""
        return self.fusion.fuse_multiview(self.appearance(last_frame.to(world)), world)

    def denoise(
        self, z_t: Tensor, t: Tensor, cond: MultiViewWorldEmbedding, last_frame: Tensor
    ) -> Tensor:
        """Predict noise for z_t of shape ((b v), 3, T, h, w)."""
        context = rearrange(to_signal(last_frame), "b v h w c -> (b v) c h w")
        steps = t.repeat_interleave(self.views) if t.shape[0] != z_t.shape[0] else t
        return self.unet(z_t, steps, cond.views, context.to(z_t))

    def diffusion_loss(
        self,
        clip_target: Tensor,
        cond: MultiViewWorldEmbedding,
        last_frame: Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> Tensor:
        """Return the noise-prediction MSE for target clips (b, v, T, h, w, 3)."""
        z0 = rearrange(to_signal(clip_target), "b v t h w c -> (b v) c t h w").to(
            cond.views
        )
        return self.diffusion.loss(
            lambda z_t, t: self.denoise(z_t, t, cond, last_frame), z0, generator
        )

    def sample_clip(
        self,
        last_frame: Tensor,
        cond: MultiViewWorldEmbedding,
        generator: Optional[torch.Generator] = None,
        sample_steps: Optional[int] = None,
    ) -> GeneratedClip:
        """Sample the next clip by ancestral DDPM from pure noise."""
        if not bool(self.ready):
            raise GeneratorNotReadyError(
                "The world generator has not been trained or loaded from a checkpoint"
            )
        batch = last_frame.shape[0]
        shape = (batch * self.views, 3, self.frames, self.image_size, self.image_size)
        signal = self.diffusion.sample(
            lambda z_t, t: self.denoise(z_t, t, cond, last_frame),
            shape,
            generator=generator,
            sample_steps=sample_steps or self.sample_steps,
            device=cond.views.device,
            dtype=cond.views.dtype,
        )
        video = rearrange(to_pixels(signal), "(b v) c t h w -> b v t h w c", b=batch)
        return GeneratedClip(video)
