"""Data collection, the agent model and the three-stage curriculum."""
from worldplan.training.checkpoint import load_checkpoint, save_checkpoint  # noqa
from worldplan.training.data import collect_dataset, verify_dataset_labels  # noqa
from worldplan.training.model import DrivingAgent  # noqa
from worldplan.training.pipeline import train_curriculum  # noqa
from worldplan.training.stages import (  # noqa
    LossReport,
    StageConfig,
    run_stage1,
    run_stage2,
    run_stage3,
)
