"""Linear beta schedule and its derived quantities."""

from typing import List, Optional

import torch
from torch import Tensor


class NoiseSchedule:
    """Variance schedule of a discrete DDPM with steps indexed 1..T.

    The linear range `beta_start..beta_end` is the reference for
    `reference_steps` steps; shorter schedules scale both endpoints by
    `reference_steps / steps` so the terminal signal level stays near zero.
    """

    def __init__(
        self,
        steps: int = 100,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        reference_steps: int = 1000,
        betas: Optional[Tensor] = None,
    ):
        """Initialize the schedule (or adopt explicit `betas`)."""
        if betas is None:
            scale = reference_steps / steps
            betas = torch.linspace(
                beta_start * scale, beta_end * scale, steps, dtype=torch.float64
            )
        betas = betas.to(torch.float64)
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("Every beta must lie in (0, 1)")
        self.steps = int(betas.shape[0])
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        first = torch.ones(1, dtype=torch.float64)
        self.alpha_bars_prev = torch.cat([first, self.alpha_bars[:-1]])

    @classmethod
    def from_config(cls, config: dict) -> "NoiseSchedule":
        """Build the schedule from the `generator` config section."""
        return cls(
            steps=config["diffusion_steps"],
            beta_start=config["beta_start"],
            beta_end=config["beta_end"],
            reference_steps=config["reference_steps"],
        )

    def _gather(self, values: Tensor, t: Tensor, like: Tensor) -> Tensor:
        picked = values.to(like.device)[t.long() - 1].to(like.dtype)
        return picked.view(-1, *([1] * (like.ndim - 1)))

    def q_sample(self, z0: Tensor, t: Tensor, noise: Tensor) -> Tensor:
        """Return z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise for t in 1..T."""
        abar = self._gather(self.alpha_bars, t, z0)
        return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise

    def predict_x0(self, z_t: Tensor, t: Tensor, eps: Tensor) -> Tensor:
        """Invert the forward process given a noise estimate."""
        abar = self._gather(self.alpha_bars, t, z_t)
        return (z_t - (1.0 - abar).sqrt() * eps) / abar.sqrt()

    def posterior(self, x0: Tensor, z_t: Tensor, t: Tensor):
        """Return the mean and variance of q(z_{t-1} | z_t, x0)."""
        beta = self._gather(self.betas, t, z_t)
        alpha = self._gather(self.alphas, t, z_t)
        abar = self._gather(self.alpha_bars, t, z_t)
        abar_prev = self._gather(self.alpha_bars_prev, t, z_t)
        mean = (
            beta * abar_prev.sqrt() / (1.0 - abar) * x0
            + (1.0 - abar_prev) * alpha.sqrt() / (1.0 - abar) * z_t
        )
        variance = beta * (1.0 - abar_prev) / (1.0 - abar)
        return mean, variance

    def respaced(self, sample_steps: int) -> "NoiseSchedule":
        """Return the schedule restricted to `sample_steps` evenly spaced timesteps."""
        kept = self.kept_timesteps(sample_steps)
        if len(kept) == self.steps:
            return self
        abars = self.alpha_bars[torch.tensor(kept) - 1]
        previous = torch.cat([torch.ones(1, dtype=torch.float64), abars[:-1]])
        return NoiseSchedule(betas=1.0 - abars / previous)

    def kept_timesteps(self, sample_steps: int) -> List[int]:
        """Return the 1-based timesteps kept by respacing, ascending."""
        sample_steps = max(1, min(int(sample_steps), self.steps))
        if sample_steps == self.steps:
            return list(range(1, self.steps + 1))
        positions = torch.linspace(1, self.steps, sample_steps).round().long().tolist()
        return sorted(set(int(p) for p in positions))
