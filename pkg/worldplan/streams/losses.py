"""Training loss stream class."""
from worldplan.client import RecordStream
from worldplan.streams import SCHEMAS_DIR


class LossReportStream(RecordStream):
    """One record per logged training iteration, for offline plotting."""

    name = "loss_reports"
    primary_keys = ["stage", "iteration"]

    schema_filepath = SCHEMAS_DIR / "loss_reports.json"
