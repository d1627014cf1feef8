"""Clip archive manifest stream class."""
from worldplan.client import RecordStream
from worldplan.streams import SCHEMAS_DIR


class ClipFramesStream(RecordStream):
    """One record per archived frame (view, frame index, timestamp, file)."""

    name = "clip_frames"
    primary_keys = ["clip_id", "view", "frame_index"]

    schema_filepath = SCHEMAS_DIR / "clip_frames.json"
