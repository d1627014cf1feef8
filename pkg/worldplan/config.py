"""Layered run configuration: schema defaults, config file, command-line overrides."""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml
from jsonschema import Draft7Validator

from worldplan.errors import ConfigError


def strict_schema(schema: dict) -> dict:
    """Return a copy of `schema` that rejects unknown keys at every object level."""
    schema = copy.deepcopy(schema)

    def _walk(node: dict) -> None:
        if "properties" in node:
            node["additionalProperties"] = False
            for child in node["properties"].values():
                _walk(child)
        if isinstance(node.get("items"), dict):
            _walk(node["items"])

    _walk(schema)
    return schema


def schema_defaults(schema: dict) -> Dict[str, Any]:
    """Materialize the default value of every property, recursing into objects."""
    result: Dict[str, Any] = {}
    for name, prop in schema.get("properties", {}).items():
        if "default" in prop:
            result[name] = copy.deepcopy(prop["default"])
        elif "properties" in prop:
            result[name] = schema_defaults(prop)
    return result


def deep_merge(base: dict, update: dict) -> dict:
    """Merge `update` into a copy of `base`; nested dicts merge, the rest replaces."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(expression: str) -> dict:
    """Turn `section.key=value` into a nested dict; the value is parsed as YAML."""
    if "=" not in expression:
        raise ConfigError(f"Override '{expression}' is not of the form key=value")
    dotted, raw = expression.split("=", 1)
    value = yaml.safe_load(raw)
    node: Dict[str, Any] = {}
    cursor = node
    keys = dotted.strip().split(".")
    for key in keys[:-1]:
        cursor[key] = {}
        cursor = cursor[key]
    cursor[keys[-1]] = value
    return node


def validate_config(config: dict, schema: dict) -> None:
    """Raise `ConfigError` listing every schema violation of `config`."""
    validator = Draft7Validator(strict_schema(schema))
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.path))
    if errors:
        messages = [
            f"{'.'.join(str(p) for p in error.path) or '<root>'}: {error.message}"
            for error in errors
        ]
        raise ConfigError("Invalid configuration: " + "; ".join(messages))


def load_config(
    schema: dict,
    path: Optional[Path] = None,
    overrides: Iterable[dict] = (),
) -> dict:
    """Build the effective config: defaults, then the file, then overrides."""
    config = schema_defaults(schema)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file {path} does not exist")
        with path.open() as handle:
            file_config = yaml.safe_load(handle) or {}
        if not isinstance(file_config, dict):
            raise ConfigError(f"Config file {path} must hold a mapping")
        config = deep_merge(config, file_config)
    for override in overrides:
        config = deep_merge(config, override)
    validate_config(config, schema)
    return config


def config_hash(config: dict) -> str:
    """Return the SHA-256 of the canonical JSON encoding of `config`."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_config(config: dict, directory: Path) -> Path:
    """Write the effective config and its hash next to a command's outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "config.json"
    payload = {"config_hash": config_hash(config), "config": config}
    target.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return target
