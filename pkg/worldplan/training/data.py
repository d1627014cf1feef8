"""Expert data collection and the per-stage training datasets."""

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from worldplan.config import config_hash
from worldplan.control.pid import ControlCommand, PidState, waypoints_to_controls
from worldplan.errors import DatasetError
from worldplan.microworld.episode import DrivingEpisode
from worldplan.microworld.expert import Box, PerceptionTargets, perception_targets
from worldplan.microworld.render import Renderer
from worldplan.microworld.scenario import Scenario, generate_scenario
from worldplan.streams import DatasetTuplesStream

logger = logging.getLogger("worldplan.training.data")

DATASET_VERSION = 1
MANIFEST = "dataset_tuples.jsonl"
SUMMARY = "dataset.json"


@dataclass(frozen=True)
class DatasetInfo:
    """Summary of a collected dataset directory."""

    directory: Path
    count: int
    episodes: int
    checksum: str


def scenario_seed(seed: int, index: int) -> int:
    """Return the seed of the `index`-th scenario of a run."""
    return seed * 100_003 + index


def _episode_file(directory: Path, episode_id: str) -> Path:
    return directory / "episodes" / f"{episode_id}.npz"


def dataset_checksum(directory: Path) -> str:
    """Hash the episode arrays and the manifest of a dataset directory."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted((directory / "episodes").glob("*.npz")):
        digest.update(path.stem.encode("utf-8"))
        with np.load(path) as arrays:
            for key in sorted(arrays.files):
                digest.update(key.encode("utf-8"))
                digest.update(np.ascontiguousarray(arrays[key]).tobytes())
    digest.update((directory / MANIFEST).read_bytes())
    return digest.hexdigest()


def _collect_episode(
    scenario: Scenario,
    config: dict,
    renderer: Renderer,
    steps: int,
    first_index: int,
) -> Tuple[List[dict], np.ndarray, np.ndarray]:
    """Drive one scenario with the expert; return records, frames and controls."""
    episode = DrivingEpisode(
        scenario, config["microworld"], renderer, episode_id=scenario.name
    )
    pid = PidState.from_config(config["control"])
    bev_range = float(config["encoder"]["bev_range"])
    clip_frames = int(config["generator"]["frames"])
    frames = [episode.observe().to_uint8()]
    controls: List[List[float]] = []
    records: List[dict] = []
    previous = ControlCommand(0.0, 0.0, 0.0)
    for step in range(steps):
        state = episode.state
        instruction = episode.current_instruction()
        waypoints, completed = episode.expert_action()
        targets = perception_targets(state, waypoints, bev_range=bev_range)
        command, pid = waypoints_to_controls(
            waypoints, state.ego_speed, pid, episode.dt
        )
        records.append(
            {
                "index": first_index + step,
                "episode_id": scenario.name,
                "scenario": scenario.name,
                "step": step,
                "timestamp": float(state.clock),
                "speed": float(state.ego_speed),
                "instruction": instruction.to_dict(),
                "waypoints": np.asarray(waypoints, dtype=np.float64).tolist(),
                "completed": bool(completed),
                "control": command.to_dict(),
                "previous_control": previous.to_dict(),
                "light_state": targets.light_state,
                "boxes": [box.to_dict() for box in targets.boxes],
                "frame_index": step,
            }
        )
        controls.append(command.as_list())
        previous = command
        _, _, done = episode.step(command)
        frames.append(episode.observe().to_uint8())
        if done:
            logger.warning(
                "Episode %s ended after %d of %d steps (%s)",
                scenario.name,
                step + 1,
                steps,
                episode.record.termination,
            )
            break
    last = len(frames) - 1
    for record in records:
        start = record["frame_index"] + 1
        record["clip_indices"] = list(range(start, min(start + clip_frames, last + 1)))
    return records, np.stack(frames), np.asarray(controls, dtype=np.float64)


def collect_dataset(config: dict, directory: Path) -> DatasetInfo:
    """Run the expert over `collect.scenarios` scenarios and persist the tuples."""
    directory = Path(directory)
    try:
        (directory / "episodes").mkdir(parents=True, exist_ok=True)
        (directory / "scenarios").mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise DatasetError(f"Cannot write a dataset to {directory}: {error}") from error
    manifest = DatasetTuplesStream(directory / MANIFEST)
    if manifest.path.exists():
        manifest.path.unlink()
    section = config["collect"]
    renderer = Renderer.from_config(config["microworld"])
    count = 0
    for index in range(section["scenarios"]):
        scenario = generate_scenario(
            scenario_seed(config["seed"], index),
            track=section["track"],
            name=f"collect-{index:04d}",
            misleading_rate=config["microworld"]["misleading_rate"],
        )
        # Drive the reloaded copy; label replay starts from the same file.
        saved = scenario.save(directory / "scenarios" / f"{scenario.name}.yaml")
        scenario = Scenario.load(saved)
        records, frames, controls = _collect_episode(
            scenario, config, renderer, section["steps"], count
        )
        np.savez(
            _episode_file(directory, scenario.name), frames=frames, controls=controls
        )
        count += manifest.write(records)
        logger.debug("Collected %s: %d tuples", scenario.name, len(records))
    checksum = dataset_checksum(directory)
    summary = {
        "version": DATASET_VERSION,
        "count": count,
        "episodes": section["scenarios"],
        "checksum": checksum,
        "config_hash": config_hash(config),
    }
    (directory / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True))
    logger.info(
        "Collected %d tuples from %d scenarios into %s",
        count,
        section["scenarios"],
        directory,
    )
    return DatasetInfo(directory, count, section["scenarios"], checksum)


def verify_dataset_labels(directory: Path, config: dict) -> float:
    """Replay every episode's recorded controls and re-derive the expert labels.

    Returns the largest absolute difference between recorded and recomputed
    waypoints, which is zero for an untampered dataset.
    """
    dataset = CollectedDataset(directory)
    renderer = Renderer.from_config(config["microworld"])
    worst = 0.0
    for episode_id, records in dataset.episodes.items():
        scenario = Scenario.load(dataset.directory / "scenarios" / f"{episode_id}.yaml")
        episode = DrivingEpisode(
            scenario, config["microworld"], renderer, episode_id=episode_id
        )
        for record in records:
            waypoints, completed = episode.expert_action()
            error = float(np.max(np.abs(np.asarray(record["waypoints"]) - waypoints)))
            if completed != record["completed"]:
                error = float("inf")
            worst = max(worst, error)
            episode.step(ControlCommand.from_dict(record["control"]))
    return worst


class CollectedDataset:
    """Read access to a dataset directory written by `collect_dataset`."""

    def __init__(self, directory: Path):
        """Initialize from the manifest; frames are loaded lazily."""
        self.directory = Path(directory)
        self.logger = logging.getLogger("worldplan.training.data")
        if not (self.directory / MANIFEST).exists():
            raise DatasetError(f"No dataset manifest under {self.directory}")
        stream = DatasetTuplesStream(self.directory / MANIFEST)
        self.records: List[dict] = list(stream.read())
        if not self.records:
            raise DatasetError(f"Dataset under {self.directory} is empty")
        grouped: Dict[str, List[dict]] = defaultdict(list)
        for record in self.records:
            grouped[record["episode_id"]].append(record)
        self.episodes = {
            k: sorted(v, key=lambda r: r["step"]) for k, v in sorted(grouped.items())
        }
        self._frames: Dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        """Return the number of tuples."""
        return len(self.records)

    def frames(self, episode_id: str) -> np.ndarray:
        """Return the uint8 frames (steps + 1, views, h, w, 3) of one episode."""
        if episode_id not in self._frames:
            with np.load(_episode_file(self.directory, episode_id)) as arrays:
                self._frames[episode_id] = arrays["frames"]
        return self._frames[episode_id]

    def frame(self, episode_id: str, index: int) -> np.ndarray:
        """Return one frame as float32 in [0, 1]."""
        return self.frames(episode_id)[index].astype(np.float32) / 255.0

    def check_image_size(self, image_size: int) -> None:
        """Raise `DatasetError` if the stored rasters do not match `image_size`."""
        first = self.records[0]["episode_id"]
        found = int(self.frames(first).shape[2])
        if found != image_size:
            raise DatasetError(
                f"Dataset rasters are {found}px but the config expects {image_size}px"
            )


def targets_from_record(record: dict) -> PerceptionTargets:
    """Rebuild the Stage-1 targets stored with a manifest record."""
    boxes = tuple(
        Box(
            label=box["class"],
            center=tuple(box["center"]),
            extent=tuple(box["extent"]),
            yaw=box["yaw"],
        )
        for box in record.get("boxes", [])
    )
    return PerceptionTargets(
        boxes=boxes,
        light_state=record.get("light_state", "none"),
        expert_waypoints=np.asarray(record["waypoints"], dtype=np.float64),
    )


class PerceptionDataset(Dataset):
    """Single frames with detection, light and waypoint targets (Stage 1)."""

    def __init__(self, data: CollectedDataset, indices: Optional[Sequence[int]] = None):
        """Initialize over all tuples or the given subset."""
        self.data = data
        self.indices = list(range(len(data))) if indices is None else list(indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, item: int) -> Tuple[torch.Tensor, PerceptionTargets]:
        record = self.data.records[self.indices[item]]
        frame = self.data.frame(record["episode_id"], record["frame_index"])
        return torch.from_numpy(frame), targets_from_record(record)


def collate_perception(batch):
    """Stack frames and keep the targets as a list."""
    frames, targets = zip(*batch)
    return torch.stack(frames), list(targets)


class SequenceDataset(Dataset):
    """Frame history plus `depth` consecutive clip steps (Stages 2 and 3).

    A sample starting at step s uses frames s - t_max + 1 .. s as history, with
    frame 0 standing in for steps before the episode began. Step
    k of the sample sits at j = s + k * clip_frames and carries the
    instruction, previous action, labels and the ground-truth clip j + 1 ..
    j + clip_frames.
    """

    def __init__(
        self,
        data: CollectedDataset,
        encode: Callable[[str], List[int]],
        t_max: int,
        clip_frames: int,
        depth: int = 1,
    ):
        """Initialize the sample index over every episode."""
        self.data = data
        self.encode = encode
        self.t_max = t_max
        self.clip_frames = clip_frames
        self.depth = depth
        self.samples: List[Tuple[str, int]] = []
        for episode_id, records in data.episodes.items():
            last_frame = len(records)
            latest = last_frame - depth * clip_frames
            for start in range(latest + 1):
                self.samples.append((episode_id, start))
        if not self.samples:
            raise DatasetError(
                f"No episode is long enough for {depth} clip steps "
                f"of {clip_frames} frames"
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, item: int) -> Dict[str, torch.Tensor]:
        episode_id, start = self.samples[item]
        records = self.data.episodes[episode_id]
        frames = self.data.frames(episode_id)
        # steps before the first frame repeat it
        window = np.maximum(np.arange(start - self.t_max + 1, start + 1), 0)
        history = frames[window].astype(np.float32) / 255.0
        steps = [records[start + k * self.clip_frames] for k in range(self.depth)]
        clips = [
            frames[r["frame_index"] + 1 : r["frame_index"] + 1 + self.clip_frames]
            for r in steps
        ]
        return {
            "history": torch.from_numpy(history),
            "instruction": torch.tensor(
                [self.encode(r["instruction"]["text"]) for r in steps], dtype=torch.long
            ),
            "previous_action": torch.tensor(
                [
                    ControlCommand.from_dict(r["previous_control"]).as_list()
                    for r in steps
                ],
                dtype=torch.float32,
            ),
            "waypoints": torch.tensor(
                [r["waypoints"] for r in steps], dtype=torch.float32
            ),
            "completed": torch.tensor([float(r["completed"]) for r in steps]),
            # (depth, views, frames, h, w, 3)
            "clip": torch.from_numpy(
                np.stack(clips).transpose(0, 2, 1, 3, 4, 5).astype(np.float32) / 255.0
            ),
        }
