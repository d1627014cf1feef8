"""Run the curriculum stage by stage, chaining lineage-linked checkpoints."""

import functools
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from worldplan.errors import CheckpointLineageError
from worldplan.streams import LossReportStream
from worldplan.training.checkpoint import (
    CheckpointInfo,
    check_lineage,
    expected_parent,
    load_checkpoint,
    save_checkpoint,
)
from worldplan.training.data import CollectedDataset, PerceptionDataset, SequenceDataset
from worldplan.training.model import DrivingAgent
from worldplan.training.stages import StageResult, run_stage1, run_stage2, run_stage3

logger = logging.getLogger("worldplan.training")

STAGES = (1, 2, 3)


def checkpoint_path(out_dir: Path, stage: int) -> Path:
    """Return where the checkpoint of `stage` is written."""
    return Path(out_dir) / "checkpoints" / f"stage{stage}.pt"


def held_out_split(data: CollectedDataset, fraction: float = 0.1):
    """Split tuple indices into (train, held-out) by whole episodes."""
    episodes = list(data.episodes)
    count = int(len(episodes) * fraction) if len(episodes) > 1 else 0
    held = set(episodes[len(episodes) - count :]) if count else set()
    train = [i for i, r in enumerate(data.records) if r["episode_id"] not in held]
    test = [i for i, r in enumerate(data.records) if r["episode_id"] in held]
    return train, test


def train_curriculum(
    config: dict,
    dataset_dir: Path,
    out_dir: Path,
    stages: Optional[Sequence[int]] = None,
    skip_stages: Optional[Sequence[int]] = None,
) -> List[CheckpointInfo]:
    """Run the requested stages in order and return their checkpoints.

    A run that does not start at the first kept stage resumes from the
    parent checkpoint already present under `out_dir`.
    """
    out_dir = Path(out_dir)
    if skip_stages is None:
        skip_stages = config["training"]["skip_stages"]
    skip = tuple(skip_stages)
    todo = [s for s in (stages or STAGES) if s not in skip]
    if not todo:
        logger.warning("Every stage is skipped; nothing to train")
        return []
    data = CollectedDataset(dataset_dir)
    data.check_image_size(config["microworld"]["image_size"])

    agent: Optional[DrivingAgent] = None
    parent: Optional[CheckpointInfo] = None
    wanted = expected_parent(f"stage{todo[0]}", skip)
    if wanted is not None:
        path = checkpoint_path(out_dir, int(wanted[-1]))
        if not path.exists():
            raise CheckpointLineageError(
                f"stage{todo[0]} needs the {wanted} checkpoint at {path}, "
                "which is missing"
            )
        agent, parent = load_checkpoint(path, config)

    stream = LossReportStream(out_dir / "loss_reports.jsonl")
    if parent is None and stream.path.exists():
        stream.path.unlink()

    infos: List[CheckpointInfo] = []
    for stage in todo:
        tag = f"stage{stage}"
        check_lineage(tag, parent, skip)
        if agent is None:
            torch.manual_seed(config["seed"])
            agent = DrivingAgent(config)
        result = _run(agent, stage, data, config, stream)
        if agent.heads is not None:
            agent.strip_heads()
        path = checkpoint_path(out_dir, stage)
        parent = save_checkpoint(agent, path, tag, config, parent)
        infos.append(parent)
        logger.info(
            "%s done after %d iterations, final loss %s",
            tag,
            len(result.reports),
            f"{result.reports[-1].total:.4f}" if result.reports else "n/a",
        )
    return infos


def _run(
    agent: DrivingAgent,
    stage: int,
    data: CollectedDataset,
    config: dict,
    stream: LossReportStream,
) -> StageResult:
    if stage == 1:
        train, test = held_out_split(data)
        return run_stage1(
            agent,
            PerceptionDataset(data, train),
            config,
            stream,
            held_out=PerceptionDataset(data, test),
        )
    encode = functools.partial(
        agent.vocab.encode_padded, length=agent.instruction_length
    )
    t_max = config["lm"]["t_max"]
    frames = config["generator"]["frames"]
    if stage == 2:
        if agent.heads is not None:
            agent.strip_heads()
        dataset = SequenceDataset(data, encode, t_max, frames, 1)
        return run_stage2(agent, dataset, config, stream)
    depth = config["training"]["rollout_depth"]
    dataset = SequenceDataset(data, encode, t_max, frames, depth)
    return run_stage3(agent, dataset, config, stream)
