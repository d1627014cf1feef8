"""Multi-view conditional video diffusion world model."""

from worldplan.generator.conditioning import MultiViewWorldEmbedding  # noqa
from worldplan.generator.diffusion import GaussianDiffusion, sampler_calls  # noqa
from worldplan.generator.rollout import autoregressive_rollout  # noqa
from worldplan.generator.schedule import NoiseSchedule  # noqa
from worldplan.generator.world import GeneratedClip, WorldGenerator  # noqa
