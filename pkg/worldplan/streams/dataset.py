"""Collected dataset manifest stream class."""
from worldplan.client import RecordStream
from worldplan.streams import SCHEMAS_DIR


class DatasetTuplesStream(RecordStream):
    """Expert tuples: frame reference, perception targets, instruction, labels."""

    name = "dataset_tuples"
    primary_keys = ["index"]

    schema_filepath = SCHEMAS_DIR / "dataset_tuples.json"
