"""Run configuration: dataclasses, a derived JSON Schema, and a strict loader.

Unknown keys are errors so that a misspelled hyperparameter never silently
falls back to its default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .dataset import GeneratorConfig
from .errors import ConfigError
from .models import ModelConfigs

OUTPUT_DIR_ENV = "CCSPRED_OUTPUT_DIR"


@dataclass
class DataSource:
    generator: GeneratorConfig | None = None
    csv_7: str | None = None
    csv_28: str | None = None
    schema: str | None = None      # fixed schema file; vocabularies are then not extended


@dataclass
class EvaluationConfig:
    permutation_repeats: int = 5
    importance_age: int = 28


@dataclass
class RunConfig:
    seed: int = 42
    output_dir: str = "out"
    data: DataSource = field(default_factory=lambda: DataSource(generator=GeneratorConfig()))
    models: ModelConfigs = field(default_factory=ModelConfigs)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    base_dir: str = field(default=".", metadata={"internal": True})

    def validate(self):
        d = self.data
        has_csv = d.csv_7 is not None or d.csv_28 is not None
        if (d.generator is not None) == has_csv:
            raise ConfigError("data: exactly one of 'generator' or 'csv_7'/'csv_28' is required")
        if self.evaluation.importance_age not in (7, 28):
            raise ConfigError("evaluation.importance_age must be 7 or 28")
        if d.generator is not None:
            d.generator.validate()
        self.models.embednet.validate()
        self.models.transformer.validate()

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_path(self):
        env = os.environ.get(OUTPUT_DIR_ENV)
        return Path(env) if env else self.resolve(self.output_dir)

    def to_dict(self):
        return _to_dict(self)

    def hash(self):
        doc = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _public_fields(cls):
    return [f for f in dataclasses.fields(cls) if not f.metadata.get("internal")]


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in _public_fields(obj)}
    return obj


def _unwrap_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _schema_for(tp):
    inner, optional = _unwrap_optional(tp)
    if dataclasses.is_dataclass(inner):
        hints = typing.get_type_hints(inner)
        node = {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _schema_for(hints[f.name]) for f in _public_fields(inner)},
        }
    else:
        node = {"type": _JSON_TYPES[inner]}
    if optional:
        node = {"anyOf": [node, {"type": "null"}]}
    return node


def config_schema():
    """JSON Schema for run configuration files."""
    schema = _schema_for(RunConfig)
    schema["required"] = ["seed"]
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "ccspred run configuration"
    return schema


def _build(cls, data, where):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in _public_fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        inner, _ = _unwrap_optional(hints[f.name])
        if value is not None and dataclasses.is_dataclass(inner):
            value = _build(inner, value, f"{where}{f.name}.")
        elif inner is float and isinstance(value, int):
            value = float(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data, base_dir="."):
    try:
        jsonschema.validate(data, config_schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    cfg = _build(RunConfig, data, "")
    cfg.base_dir = str(base_dir)
    cfg.validate()
    return cfg


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data, base_dir=path.parent)
