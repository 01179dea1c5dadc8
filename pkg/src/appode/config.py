"""Flat ``key = value`` config files with ``[train]`` and ``[field]`` sections."""

from __future__ import annotations

import ast
import configparser
from dataclasses import fields
from pathlib import Path

from .field import FieldConfig
from .train import TrainConfig

SECTIONS = {"train": TrainConfig, "field": FieldConfig}


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        low = raw.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return raw.strip()


def read_config(path) -> dict[str, dict]:
    """Section -> {key: value}; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"{path}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        known = {f.name for f in fields(SECTIONS[section])}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _parse_value(raw)
        out[section] = values
    return out


def write_config(path, train: TrainConfig, field: FieldConfig | None = None) -> None:
    parser = configparser.ConfigParser()
    parser["train"] = {k: repr(v) if isinstance(v, str) else str(v) for k, v in train.to_dict().items()}
    if field is not None:
        parser["field"] = {k: repr(v) if isinstance(v, str) else str(v) for k, v in field.to_dict().items()}
    with open(path, "w") as fh:
        parser.write(fh)
