"""Record stream classes for worldplan."""
from pathlib import Path

SCHEMAS_DIR: Path = Path(__file__).parent.parent / Path("./schemas")

from .ablations import AblationStream  # noqa
from .clips import ClipFramesStream  # noqa
from .dataset import DatasetTuplesStream  # noqa
from .episodes import EpisodeStepsStream  # noqa
from .losses import LossReportStream  # noqa
from .reports import GenQualityStream, RouteMetricsStream  # noqa

__all__ = [
    "AblationStream",
    "ClipFramesStream",
    "DatasetTuplesStream",
    "EpisodeStepsStream",
    "GenQualityStream",
    "LossReportStream",
    "RouteMetricsStream",
]
