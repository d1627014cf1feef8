"""Exception hierarchy for worldplan."""


class WorldPlanError(Exception):
    """Base class for every error raised by worldplan."""


class ConfigError(WorldPlanError, ValueError):
    """The run configuration is malformed or names unknown keys."""


class RecordValidationError(WorldPlanError, ValueError):
    """A persisted record does not match its stream schema."""


class InfeasibleInstructionError(WorldPlanError):
    """The instruction cannot be carried out from the current world state."""

    def __init__(self, instruction_text: str, reason: str):
        """Initialize the error."""
        super().__init__(f"Infeasible instruction '{instruction_text}': {reason}")
        self.instruction_text = instruction_text
        self.reason = reason


class ResolutionMismatchError(WorldPlanError, ValueError):
    """Camera rasters do not match the configured resolution or view count."""


class ViewCountError(WorldPlanError, ValueError):
    """A multi-view input does not carry exactly the configured number of views."""


class ContextOverflowError(WorldPlanError, ValueError):
    """The assembled language-model sequence exceeds the context budget."""


class GeneratorNotReadyError(WorldPlanError, RuntimeError):
    """The diffusion sampler was invoked on an untrained, unloaded denoiser."""


class CheckpointError(WorldPlanError):
    """A checkpoint is missing or does not match the running configuration."""


class CheckpointLineageError(CheckpointError):
    """Checkpoints were loaded out of curriculum order."""


class DatasetError(WorldPlanError):
    """A collected dataset is missing, unwritable or inconsistent with the config."""


class UnknownArmError(WorldPlanError, KeyError):
    """An ablation arm name is not registered."""
