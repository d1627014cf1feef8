"""Lossless clip archives: one PNG per view and frame plus a manifest stream."""

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from worldplan.microworld.render import VIEW_NAMES
from worldplan.streams import ClipFramesStream


def write_clip_archive(
    video: np.ndarray,
    directory: Path,
    clip_id: str,
    frame_dt: float = 0.1,
    start_time: float = 0.0,
    config_hash: Optional[str] = None,
    checkpoint_hash: Optional[str] = None,
) -> ClipFramesStream:
    """Write `video` (views, frames, h, w, 3) in [0, 1] and append its manifest rows."""
    directory = Path(directory)
    frames_dir = directory / clip_id
    frames_dir.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(video, 0.0, 1.0) * 255.0).astype(np.uint8)
    horizon = int(pixels.shape[1])
    records = []
    for v, view in enumerate(VIEW_NAMES[: pixels.shape[0]]):
        for index in range(horizon):
            relative = Path(clip_id) / f"{view}_{index:04d}.png"
            Image.fromarray(pixels[v, index]).save(directory / relative)
            record = {
                "clip_id": clip_id,
                "view": view,
                "frame_index": index,
                "timestamp": round(start_time + (index + 1) * frame_dt, 6),
                "path": relative.as_posix(),
                "horizon": horizon,
            }
            if config_hash is not None:
                record["config_hash"] = config_hash
            if checkpoint_hash is not None:
                record["checkpoint_hash"] = checkpoint_hash
            records.append(record)
    stream = ClipFramesStream(directory / "clip_frames.jsonl")
    stream.write(records)
    return stream


def read_clip_archive(directory: Path, clip_id: str) -> np.ndarray:
    """Load a clip back as (views, frames, h, w, 3) floats in [0, 1]."""
    directory = Path(directory)
    stream = ClipFramesStream(directory / "clip_frames.jsonl")
    rows = [r for r in stream.read() if r["clip_id"] == clip_id]
    if not rows:
        raise FileNotFoundError(f"No frames of clip '{clip_id}' under {directory}")
    views = [v for v in VIEW_NAMES if any(r["view"] == v for r in rows)]
    horizon = max(r["frame_index"] for r in rows) + 1
    sample = np.asarray(Image.open(directory / rows[0]["path"]))
    video = np.zeros((len(views), horizon) + sample.shape, dtype=np.float32)
    for row in rows:
        image = np.asarray(Image.open(directory / row["path"]), dtype=np.float32)
        video[views.index(row["view"]), row["frame_index"]] = image / 255.0
    return video
