"""Run configuration: YAML file with dotted-path overrides.

Sections: ``data``, ``model``, ``train``, ``eval``, ``output``. Unknown keys
are rejected; every field has a default, so an empty file is a valid config.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .training import ConfigError, TrainConfig


@dataclass
class ManifestConfig:
    train: str | None = None
    val: str | None = None
    test: str | None = None


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    examples_per_class: int = 40
    image_size: tuple = (3, 32, 32)
    class_separation: float = 5.0
    noise_scale: float = 0.5
    prototype_resolution: int = 4
    seed: int = 0
    # "examples": one dataset, each class's examples divided by split_counts.
    # "classes": three independent datasets (seeds seed, seed+1, seed+2).
    split: str = "examples"
    split_counts: tuple = (24, 8, 8)

    def __post_init__(self):
        if self.split not in ("examples", "classes"):
            raise ValueError(f"data.synthetic.split must be 'examples' or 'classes', got {self.split!r}")


@dataclass
class DataConfig:
    """Either an image folder (``root`` + ``manifest``) or ``synthetic``.

    Synthetic splits either share classes (example-level partition, the
    default) or come from three generator seeds with their own classes.
    """

    root: str | None = None
    manifest: ManifestConfig = field(default_factory=ManifestConfig)
    image_size: tuple = (84, 84)
    mean: tuple | None = None
    std: tuple | None = None
    synthetic: SyntheticConfig | None = None


@dataclass
class ModelSection:
    width: int = 64
    relation_channels: tuple = (64, 1)
    relation_hidden: int = 8


@dataclass
class EvalConfig:
    n_episodes: int = 600
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    seed: int = 0


@dataclass
class OutputConfig:
    run_dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | tuple = ()) -> "RunConfig":
        base = cls()
        if path is not None:
            text = _read(path)
            try:
                base = cls.from_yaml(text)
            except ConfigError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return apply_overrides(base, overrides)


def _read(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return p.read_text(encoding="utf-8")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, hint, path: str):
    origin = getattr(hint, "__args__", None)
    text = str(hint)
    optional = value is None and ("None" in text or "Optional" in text)
    if optional:
        return None
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return _build(hint, value, path + ".")
    if origin and any(dataclasses.is_dataclass(a) for a in origin):
        cls = next(a for a in origin if dataclasses.is_dataclass(a))
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return _build(cls, value, path + ".")
    if "tuple" in text:
        if isinstance(value, str):
            value = [yaml.safe_load(v) for v in value.split(",")]
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        for v in value:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{path}: list entries must be numbers, got {v!r}")
        return tuple(value)
    if hint is bool or text == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int or text == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float or text == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if "str" in text:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, d: dict, prefix: str):
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars,
    comma-separated for list fields."""
    if not overrides:
        return config
    d = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node: Any = d
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown key: {'.'.join(parts[: i + 1])}")
            if node[part] is None:
                node[part] = {}
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node and not _is_known(parts):
            raise ConfigError(f"unknown key: {key}")
        raw = raw.strip()
        value = raw if "," in raw and not raw.startswith("[") else yaml.safe_load(raw)
        node[parts[-1]] = value
    return RunConfig.from_dict(d)


def _is_known(parts: list[str]) -> bool:
    cls: Any = RunConfig
    for part in parts:
        hints = get_type_hints(cls)
        if part not in hints:
            return False
        hint = hints[part]
        args = getattr(hint, "__args__", None) or ()
        cls = next((a for a in (hint, *args) if dataclasses.is_dataclass(a)), None)
    return True


def model_section_to_config(run: RunConfig, image_shape: tuple):
    from .model import ModelConfig

    return ModelConfig(
        image_shape=tuple(image_shape),
        width=run.model.width,
        layers=run.train.layers,
        relation_channels=run.model.relation_channels,
        relation_hidden=run.model.relation_hidden,
        seed=run.train.seed,
    )
