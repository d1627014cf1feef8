"""WorldPlan base record stream class."""

import json
import logging
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

from jsonschema import Draft7Validator

from worldplan.errors import RecordValidationError


class RecordStream:
    """Newline-delimited JSON records validated against a schema file.

    Subclasses set `name`, `schema_filepath` and optionally `primary_keys`, the
    same way a Singer stream declares itself. Every artifact the stack persists
    (episode logs, loss streams, manifests, reports) goes through one of these.
    """

    name: str = ""
    schema_filepath: Optional[Path] = None
    primary_keys: List[str] = []

    def __init__(self, path: Path):
        """Initialize the stream on top of `path` (created on first write)."""
        self.path = Path(path)
        self.logger = logging.getLogger(f"worldplan.streams.{self.name}")
        self._validator: Optional[Draft7Validator] = None

    @property
    def schema(self) -> dict:
        """Return the JSON schema of this stream's records."""
        if self.schema_filepath is None:
            raise RecordValidationError(f"Stream {self.name} declares no schema")
        return json.loads(Path(self.schema_filepath).read_text())

    @property
    def validator(self) -> Draft7Validator:
        """Return a cached validator for the stream schema."""
        if self._validator is None:
            self._validator = Draft7Validator(self.schema)
        return self._validator

    def validate(self, record: dict) -> dict:
        """Raise `RecordValidationError` if `record` violates the schema."""
        errors = list(self.validator.iter_errors(record))
        if errors:
            raise RecordValidationError(
                f"{self.name} record rejected: "
                + "; ".join(
                    f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}"
                    for e in errors
                )
            )
        missing = [key for key in self.primary_keys if key not in record]
        if missing:
            raise RecordValidationError(
                f"{self.name} record is missing primary keys {missing}"
            )
        return record

    def write(self, records: Iterable[dict], append: bool = True) -> int:
        """Validate and write `records`, one JSON object per line."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with self.path.open("a" if append else "w") as handle:
            for record in records:
                self.validate(record)
                handle.write(json.dumps(record, sort_keys=True) + "\n")
                count += 1
        self.logger.debug("Wrote %d %s records to %s", count, self.name, self.path)
        return count

    def read(self) -> Iterator[dict]:
        """Return a generator of the records stored in the stream file."""
        if not self.path.exists():
            return
        with self.path.open() as handle:
            for line in handle:
                line = line.strip()
                if line:
                    yield json.loads(line)
