"""Lineage-linked checkpoints for the training curriculum."""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import torch

from worldplan.config import config_hash
from worldplan.errors import CheckpointError, CheckpointLineageError
from worldplan.lm.tokenizer import Vocabulary
from worldplan.training.model import DrivingAgent

logger = logging.getLogger("worldplan.training.checkpoint")

CHECKPOINT_VERSION = 1
STAGE_TAGS = ("stage1", "stage2", "stage3")

# Config keys that fix the parameter set of a DrivingAgent, per section.
ARCHITECTURE_KEYS = {
    "microworld": ("image_size",),
    "encoder": ("d_model", "bev_size", "layers", "heads"),
    "lm": (
        "d_model",
        "layers",
        "heads",
        "t_max",
        "qformer_queries",
        "qformer_layers",
        "action_queries",
        "world_queries",
        "max_context",
        "action_mode",
    ),
    "generator": ("frames", "cond_dim", "channels"),
}

# Frozen groups recorded with each checkpoint, i.e. what the next stage may not touch.
FROZEN_AFTER = {
    "stage1": ("encoder",),
    "stage2": ("encoder",),
    "stage3": ("encoder", "generator"),
}


def model_config_hash(config: dict) -> str:
    """Hash the config keys that determine the parameter set.

    Sampling, loss and schedule settings may differ between saving and loading.
    """
    relevant = {
        section: {key: config[section][key] for key in keys}
        for section, keys in ARCHITECTURE_KEYS.items()
    }
    return config_hash(relevant)


@dataclass(frozen=True)
class CheckpointInfo:
    """Provenance of one checkpoint file."""

    path: Path
    stage: str
    checkpoint_hash: str
    parent_hash: Optional[str]
    config_hash: str
    group_hashes: Dict[str, str]
    frozen: Tuple[str, ...]


def expected_parent(stage: str, skip_stages: Sequence[int] = ()) -> Optional[str]:
    """Return the stage tag a checkpoint of `stage` must descend from.

    Skipped stages are passed over, so Stage 3 descends from Stage 1 when
    Stage 2 is skipped and Stage 2 starts from scratch when Stage 1 is.
    """
    index = STAGE_TAGS.index(stage)
    for previous in range(index - 1, -1, -1):
        if previous + 1 not in skip_stages:
            return STAGE_TAGS[previous]
    return None


def check_lineage(
    stage: str, parent: Optional[CheckpointInfo], skip_stages: Sequence[int] = ()
) -> None:
    """Raise `CheckpointLineageError` unless `parent` may precede `stage`."""
    wanted = expected_parent(stage, skip_stages)
    found = parent.stage if parent is not None else None
    if wanted != found:
        raise CheckpointLineageError(
            f"{stage} must start from a {wanted or 'fresh model'} checkpoint, "
            f"got {found or 'none'}"
            + (f" (skipped stages: {sorted(skip_stages)})" if skip_stages else "")
        )
    logger.info("Lineage ok: %s <- %s", stage, found or "fresh model")


def save_checkpoint(
    agent: DrivingAgent,
    path: Path,
    stage: str,
    config: dict,
    parent: Optional[CheckpointInfo] = None,
) -> CheckpointInfo:
    """Write the agent state with its provenance; returns the new info."""
    if stage not in STAGE_TAGS:
        raise CheckpointError(f"Unknown stage tag '{stage}'")
    if agent.heads is not None:
        raise CheckpointError(f"{stage} checkpoint would carry the perception heads")
    groups = agent.group_hashes()
    digest = hashlib.sha256()
    for name in sorted(groups):
        digest.update(f"{name}:{groups[name]}".encode("ascii"))
    digest.update((parent.checkpoint_hash if parent else "").encode("ascii"))
    info = CheckpointInfo(
        path=Path(path),
        stage=stage,
        checkpoint_hash=digest.hexdigest(),
        parent_hash=parent.checkpoint_hash if parent else None,
        config_hash=model_config_hash(config),
        group_hashes=groups,
        frozen=FROZEN_AFTER[stage],
    )
    payload = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "checkpoint_hash": info.checkpoint_hash,
        "parent_hash": info.parent_hash,
        "parent_stage": parent.stage if parent else None,
        "config_hash": info.config_hash,
        "group_hashes": groups,
        "frozen": list(info.frozen),
        "vocab": agent.vocab.tokens,
        "state_dict": agent.state_dict(),
    }
    info.path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, info.path)
    logger.info(
        "Saved %s checkpoint %s to %s", stage, info.checkpoint_hash[:12], info.path
    )
    return info


def read_checkpoint_info(path: Path) -> Tuple[CheckpointInfo, dict]:
    """Return the provenance and raw payload of a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    info = CheckpointInfo(
        path=path,
        stage=payload["stage"],
        checkpoint_hash=payload["checkpoint_hash"],
        parent_hash=payload["parent_hash"],
        config_hash=payload["config_hash"],
        group_hashes=dict(payload["group_hashes"]),
        frozen=tuple(payload["frozen"]),
    )
    return info, payload


def load_checkpoint(path: Path, config: dict) -> Tuple[DrivingAgent, CheckpointInfo]:
    """Rebuild the agent from a checkpoint, checking it matches `config`."""
    info, payload = read_checkpoint_info(path)
    expected = model_config_hash(config)
    if info.config_hash != expected:
        raise CheckpointError(
            f"Checkpoint {path} was trained with model config {info.config_hash[:12]}, "
            f"the current config is {expected[:12]}"
        )
    agent = DrivingAgent(config, Vocabulary(payload["vocab"]))
    agent.strip_heads()
    agent.load_state_dict(payload["state_dict"])
    if agent.group_hashes() != info.group_hashes:
        raise CheckpointError(
            f"Checkpoint {path} parameters do not match their recorded hashes"
        )
    return agent, info
