"""Episode log stream class."""
from typing import Iterable, List

from worldplan.client import RecordStream
from worldplan.streams import SCHEMAS_DIR


class EpisodeStepsStream(RecordStream):
    """Per-step episode log: the persistence format consumed by evaluation."""

    name = "episode_steps"
    primary_keys = ["episode_id", "step"]

    def episodes(self) -> Iterable[List[dict]]:
        """Return the stored records grouped by episode, in file order."""
        grouped: dict = {}
        for record in self.read():
            grouped.setdefault(record["episode_id"], []).append(record)
        return list(grouped.values())

    schema_filepath = SCHEMAS_DIR / "episode_steps.json"
