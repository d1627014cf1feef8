"""Tests for the record streams and their schemas."""

import pytest

from worldplan.errors import RecordValidationError
from worldplan.streams import (
    AblationStream,
    ClipFramesStream,
    DatasetTuplesStream,
    EpisodeStepsStream,
    GenQualityStream,
    LossReportStream,
    RouteMetricsStream,
)

STEP = {
    "episode_id": "tiny_00001-run0",
    "route": "tiny_00001",
    "run": 0,
    "step": 0,
    "timestamp": 0.1,
    "ego": {"x": 0.1, "y": 0.0, "heading": 0.0, "speed": 0.4},
    "route_progress": 0.01,
    "control": {"throttle": 1.0, "brake": 0.0, "steer": 0.0, "clamped": False},
    "instruction": {"text": "follow the lane", "kind": "follow", "misleading": False},
    "infractions": [],
    "done": False,
    "termination": None,
}


@pytest.mark.parametrize(
    "stream_class",
    [
        AblationStream,
        ClipFramesStream,
        DatasetTuplesStream,
        EpisodeStepsStream,
        GenQualityStream,
        LossReportStream,
        RouteMetricsStream,
    ],
)
def test_schemas_load(stream_class, tmp_path):
    """Every stream finds a JSON schema describing an object."""
    stream = stream_class(tmp_path / "records.jsonl")
    assert stream.schema["type"] == "object"
    for key in stream.primary_keys:
        assert key in stream.schema["properties"]


def test_write_and_read(tmp_path):
    """Valid records are appended one per line and read back in order."""
    stream = EpisodeStepsStream(tmp_path / "steps.jsonl")
    second = {**STEP, "step": 1, "timestamp": 0.2}
    assert stream.write([STEP, second]) == 2
    assert [r["step"] for r in stream.read()] == [0, 1]
    assert len(stream.episodes()) == 1


def test_invalid_record_rejected(tmp_path):
    """Out-of-range controls and unknown infraction kinds are refused."""
    stream = EpisodeStepsStream(tmp_path / "steps.jsonl")
    bad_control = {**STEP, "control": {"throttle": 1.5, "brake": 0.0, "steer": 0.0}}
    with pytest.raises(RecordValidationError, match="throttle"):
        stream.write([bad_control])
    bad_event = {**STEP, "infractions": [{"kind": "speeding", "timestamp": 1.0}]}
    with pytest.raises(RecordValidationError):
        stream.validate(bad_event)


def test_missing_primary_key(tmp_path):
    """A record without its primary keys is refused."""
    stream = RouteMetricsStream(tmp_path / "metrics.jsonl")
    with pytest.raises(RecordValidationError):
        stream.validate(
            {"route": "r", "route_completion": 1.0, "infraction_score": 1.0}
        )


def test_read_missing_file(tmp_path):
    """Reading a stream that was never written yields nothing."""
    assert list(LossReportStream(tmp_path / "absent.jsonl").read()) == []
