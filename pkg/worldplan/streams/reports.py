"""Evaluation report stream classes."""
from worldplan.client import RecordStream
from worldplan.streams import SCHEMAS_DIR


class RouteMetricsStream(RecordStream):
    """Closed-loop per-route results."""

    name = "route_metrics"
    primary_keys = ["run", "route"]

    schema_filepath = SCHEMAS_DIR / "route_metrics.json"


class GenQualityStream(RecordStream):
    """Generation-quality rows of the long-horizon study."""

    name = "gen_quality"
    primary_keys = ["horizon", "mode"]

    schema_filepath = SCHEMAS_DIR / "gen_quality.json"
