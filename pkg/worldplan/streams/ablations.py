"""Ablation comparison stream class."""
from worldplan.client import RecordStream
from worldplan.streams import SCHEMAS_DIR


class AblationStream(RecordStream):
    """Rows of the ablation comparison tables."""

    name = "ablation_rows"
    primary_keys = ["arm", "table"]

    schema_filepath = SCHEMAS_DIR / "ablation_rows.json"
