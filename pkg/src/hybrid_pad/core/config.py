"""Run configuration: config files (JSON or `key = value` text) merged with CLI overrides."""
import argparse
import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

from hybrid_pad.core.anomaly.anomaly_config import AnomalyConfig
from hybrid_pad.core.data.synthetic import SyntheticSceneConfig
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.splatting.train_config import TrainConfig
from hybrid_pad.core.types import DEFECT_KINDS, DefectSpec

logger = logging.getLogger(__name__)

T = TypeVar("T")

FAILURE_POLICIES = ("exclude", "max_score")


@dataclass
class SynthJobConfig:
    n_ref: int = 64
    n_query: int = 60
    defects: List[DefectSpec] = field(default_factory=lambda: [DefectSpec(kind) for kind in DEFECT_KINDS])


@dataclass
class RunConfig:
    paths: Dict[str, Path] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    sfm: SfmConfig = field(default_factory=SfmConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    synthetic: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    synth: SynthJobConfig = field(default_factory=SynthJobConfig)
    fpr_limit: float = 0.3
    seed: int = 0
    threads: Optional[int] = None
    deterministic: bool = True
    failure_policy: str = "exclude"

    def __post_init__(self) -> None:
        if self.failure_policy not in FAILURE_POLICIES:
            raise ValueError(f"failure_policy must be one of {FAILURE_POLICIES}, got '{self.failure_policy}'")
        if not 0.0 < self.fpr_limit <= 1.0:
            raise ValueError(f"fpr_limit must be in (0, 1], got {self.fpr_limit}")


SECTION_TYPES: Dict[str, type] = {
    "train": TrainConfig,
    "sfm": SfmConfig,
    "anomaly": AnomalyConfig,
    "synthetic": SyntheticSceneConfig,
    "synth": SynthJobConfig,
}
TOP_LEVEL_KEYS = ("fpr_limit", "seed", "threads", "deterministic", "failure_policy")


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_key_values(text: str) -> Dict[str, Any]:
    """`section.key = value` lines into a nested dict; bare keys belong to the train section."""
    result: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            logger.warning(f"Ignoring config line {number} without '=': {raw!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key and key not in TOP_LEVEL_KEYS:
            key = f"train.{key}"
        node = result
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = _parse_scalar(value)
    return result


def dump_key_values(sections: Dict[str, Any]) -> str:
    """Inverse of parse_key_values for dataclass sections; values are JSON encoded."""
    lines = []
    for name, section in sections.items():
        for f in dataclasses.fields(section):
            lines.append(f"{name}.{f.name} = {json.dumps(_plain(getattr(section, f.name)))}")
    return "\n".join(lines) + "\n"


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _coerce(value: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0]) if inner else value
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if origin in (list, List) and isinstance(value, (list, tuple)):
        return [_coerce(v, args[0]) for v in value] if args else list(value)
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(_coerce(v, args[0]) for v in value) if args else tuple(value)
    if hint is DefectSpec and isinstance(value, dict):
        return DefectSpec(**value)
    if hint is DefectSpec and isinstance(value, str):
        return DefectSpec(value)
    if hint is Path:
        return Path(value)
    return value


def build_dataclass(cls: Type[T], values: Dict[str, Any], section: str = "") -> T:
    """Instantiate `cls` from a dict, coercing by field type; unknown keys are logged and ignored."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            logger.warning(f"Ignoring unknown config key '{section + '.' if section else ''}{key}'")
            continue
        kwargs[key] = _coerce(value, hints[key])
    return cls(**kwargs)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(config_path: Optional[Path]) -> Dict[str, Any]:
    if config_path is None:
        return {}
    if not config_path.exists():
        logger.warning(f"Config file not found, using defaults: {config_path}")
        return {}
    text = config_path.read_text()
    if config_path.suffix.lower() == ".json":
        return json.loads(text)
    return parse_key_values(text)


def load_config(config_path: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < config file < overrides (dotted keys such as `train.iterations`)."""
    raw = read_config_file(config_path)
    for dotted, value in (overrides or {}).items():
        node: Dict[str, Any] = {}
        cursor = node
        *parents, leaf = dotted.split(".")
        for part in parents:
            cursor = cursor.setdefault(part, {})
        cursor[leaf] = value
        raw = _merge(raw, node)

    metrics = raw.pop("metrics", {}) or {}
    if "fpr_limit" in metrics:
        raw.setdefault("fpr_limit", metrics["fpr_limit"])
    kwargs: Dict[str, Any] = {}
    for name, cls in SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = build_dataclass(cls, raw.pop(name) or {}, name)
    kwargs["paths"] = {k: Path(v) for k, v in (raw.pop("paths", {}) or {}).items() if v is not None}
    for key in list(raw):
        if key in TOP_LEVEL_KEYS:
            kwargs[key] = raw.pop(key)
        else:
            logger.warning(f"Ignoring unknown config key '{key}'")
    hints = typing.get_type_hints(RunConfig)
    for key in TOP_LEVEL_KEYS:
        if key in kwargs:
            kwargs[key] = _coerce(kwargs[key], hints[key])
    return RunConfig(**kwargs)


def add_dataclass_arguments(parser: argparse.ArgumentParser, cls: type, section: str) -> None:
    """One `--field-name` flag per dataclass field; only flags actually given become overrides."""
    group = parser.add_argument_group(f"{section} options")
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        flag = "--" + f.name.replace("_", "-")
        dest = f"{section}.{f.name}"
        origin = typing.get_origin(hint)
        if hint is bool:
            group.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif origin in (list, List, tuple):
            group.add_argument(flag, dest=dest, type=float, nargs="+", default=argparse.SUPPRESS)
        elif hint in (int, float, str):
            group.add_argument(flag, dest=dest, type=hint, default=argparse.SUPPRESS, help=f"default: {f.default}")
        else:
            group.add_argument(flag, dest=dest, type=str, default=argparse.SUPPRESS)


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted-key overrides collected from parsed CLI flags."""
    return {key: value for key, value in vars(args).items() if "." in key}
