"""Offline data generation: chain generated clips into long horizons."""

import logging
from typing import Callable, List, Optional, Sequence

import torch
from torch import Tensor

from worldplan.generator.world import GeneratedClip, WorldGenerator

logger = logging.getLogger("worldplan.generator.rollout")

# Called with the frame the planner observes; returns world features after the
# planner has predicted its action for that frame.
Planner = Callable[[Tensor], Tensor]


@torch.no_grad()
def autoregressive_rollout(
    init: Tensor,
    steps: int,
    planner: Planner,
    generator: WorldGenerator,
    rng: Optional[torch.Generator] = None,
    teacher_frames: Optional[Sequence[Tensor]] = None,
) -> List[GeneratedClip]:
    """Generate `steps` consecutive clips starting from frame `init` (b, v, h, w, 3).

    Each step conditions on the previous clip's final frame. With
    `teacher_frames`, step k >= 1 conditions on the ground-truth frame
    `teacher_frames[k - 1]` instead, isolating per-step error from accumulation.
    """
    if steps < 1:
        raise ValueError(f"A rollout needs at least one step, got {steps}")
    if teacher_frames is not None and len(teacher_frames) < steps - 1:
        raise ValueError(
            f"Teacher forcing over {steps} steps needs {steps - 1} frames, "
            f"got {len(teacher_frames)}"
        )
    clips: List[GeneratedClip] = []
    frame = init
    for step in range(steps):
        world = planner(frame)
        cond = generator.condition(frame, world)
        clip = generator.sample_clip(frame.to(world), cond, rng)
        clips.append(clip)
        if teacher_frames is not None and step < steps - 1:
            frame = teacher_frames[step].to(world)
        else:
            frame = clip.final_frame()
    logger.debug(
        "Rolled out %d clips (%d frames)%s",
        steps,
        steps * generator.frames,
        " with teacher forcing" if teacher_frames is not None else "",
    )
    return clips


def concatenate(clips: Sequence[GeneratedClip]) -> Tensor:
    """Join clips along the frame axis, shape (b, v, steps * frames, h, w, 3)."""
    return torch.cat([clip.video for clip in clips], dim=2)
