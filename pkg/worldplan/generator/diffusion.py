"""DDPM training objective and ancestral sampler."""

import logging
import threading
from typing import Callable, Optional

import torch
from torch import Tensor

from worldplan.generator.schedule import NoiseSchedule

logger = logging.getLogger("worldplan.generator")

# Denoiser signature: (z_t, t) -> predicted noise, t holding 1-based timesteps.
Denoiser = Callable[[Tensor, Tensor], Tensor]

_sampler_calls = 0
_sampler_lock = threading.Lock()


def sampler_calls() -> int:
    """Return how many times the ancestral sampler has run in this process."""
    with _sampler_lock:
        return _sampler_calls


class GaussianDiffusion:
    """Noise-prediction loss and sampling for any denoiser callable."""

    def __init__(self, schedule: NoiseSchedule):
        """Initialize the process."""
        self.schedule = schedule

    @property
    def steps(self) -> int:
        """Return T."""
        return self.schedule.steps

    def sample_timesteps(
        self, batch: int, generator: Optional[torch.Generator] = None
    ) -> Tensor:
        """Draw t uniformly from 1..T."""
        return torch.randint(1, self.steps + 1, (batch,), generator=generator)

    def loss(
        self,
        model: Denoiser,
        z0: Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> Tensor:
        """Return the mean squared error between predicted and drawn noise."""
        t = self.sample_timesteps(z0.shape[0], generator).to(z0.device)
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
        z_t = self.schedule.q_sample(z0, t, noise)
        return torch.mean((model(z_t, t) - noise) ** 2)

    @torch.no_grad()
    def sample(
        self,
        model: Denoiser,
        shape: tuple,
        generator: Optional[torch.Generator] = None,
        sample_steps: Optional[int] = None,
        device: Optional[torch.device] = None,
        dtype: torch.dtype = torch.float32,
    ) -> Tensor:
        """Run ancestral sampling from pure noise; the result lies in [-1, 1].

        With `sample_steps` below T the chain visits an evenly respaced subset
        of timesteps; the denoiser still sees the original timestep indices.
        """
        global _sampler_calls
        with _sampler_lock:
            _sampler_calls += 1
        base = self.schedule
        kept = base.kept_timesteps(sample_steps or base.steps)
        schedule = base.respaced(len(kept))
        z = torch.randn(shape, generator=generator, dtype=dtype).to(device or "cpu")
        for index in range(schedule.steps, 0, -1):
            t_local = torch.full((shape[0],), index, dtype=torch.long, device=z.device)
            t_model = torch.full_like(t_local, int(kept[index - 1]))
            eps = model(z, t_model)
            x0 = schedule.predict_x0(z, t_local, eps).clamp(-1.0, 1.0)
            mean, variance = schedule.posterior(x0, z, t_local)
            if index > 1:
                noise = torch.randn(shape, generator=generator, dtype=dtype)
                z = mean + variance.sqrt() * noise.to(z.device)
            else:
                z = mean
        logger.debug("Sampled %s over %d steps", tuple(shape), schedule.steps)
        return z.clamp(-1.0, 1.0)
