"""Sectioned ``key = value`` configuration for the whole pipeline.

Every key has a default; unknown sections or keys are rejected.  The default
file is produced by ``format_config(PipelineConfig())`` and documented in
FORMATS.md.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .detector import DetectorConfig
from .discovery import DiscoveryConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_test_scenes: int = 100
    test_seed_offset: int = 100_000
    iou_threshold: float = 0.5
    augment: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    train: TrainConfig = TrainConfig()
    discovery: DiscoveryConfig = DiscoveryConfig()
    detector: DetectorConfig = DetectorConfig()
    evaluation: EvalConfig = EvalConfig()

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, train=replace(self.train, seed=seed), detector=replace(self.detector, seed=seed))


# section name -> (path into PipelineConfig, excluded fields, renames file-key -> field)
_SECTIONS: dict[str, tuple[tuple[str, ...], set[str], dict[str, str]]] = {
    "scene": (("train", "scene"), {"mode"}, {}),
    "network": (("train", "net"), set(), {}),
    "losses": (("train", "weights"), set(), {"alpha_rank": "rank", "alpha_img": "img",
                                               "alpha_feat": "feat", "alpha_adv": "adv"}),
    "training": (("train",), {"scene", "net", "weights", "proposals"}, {}),
    "proposals": (("train", "proposals"), set(), {}),
    "discovery": (("discovery",), set(), {}),
    "detector": (("detector",), set(), {}),
    "evaluation": (("evaluation",), set(), {}),
}


def _get(obj, path):
    for p in path:
        obj = getattr(obj, p)
    return obj


def _set(obj, path, value):
    if not path:
        return value
    head, rest = path[0], path[1:]
    return replace(obj, **{head: _set(getattr(obj, head), rest, value)})


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, default: Any, where: str) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _section_items(cfg: PipelineConfig, name: str) -> list[tuple[str, Any]]:
    path, excluded, renames = _SECTIONS[name]
    obj = _get(cfg, path)
    back = {v: k for k, v in renames.items()}
    return [(back.get(f.name, f.name), getattr(obj, f.name)) for f in fields(obj) if f.name not in excluded]


def format_config(cfg: PipelineConfig = PipelineConfig()) -> str:
    """Every section and key with its current value (defaults when ``cfg`` is default)."""
    out = []
    for name in _SECTIONS:
        out.append(f"[{name}]")
        out.extend(f"{k} = {_format_value(v)}" for k, v in _section_items(cfg, name))
        out.append("")
    return "\n".join(out)


def parse_config(text: str, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are not silently folded
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from exc
    cfg = base
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        path, excluded, renames = _SECTIONS[section]
        obj = _get(cfg, path)
        known = {f.name for f in fields(obj)} - excluded
        updates = {}
        for key, raw in parser.items(section):
            fname = renames.get(key, key)
            if fname not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            updates[fname] = _parse_value(raw, getattr(obj, fname), f"[{section}] {key}")
        try:
            cfg = _set(cfg, path, replace(obj, **updates))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return cfg


def load_config(path: Path | str | None, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    if path is None:
        return base
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, base)


# -- dict snapshots (checkpoint manifests) -------------------------------------------

def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def from_dict(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        default = getattr(cls(), f.name) if _has_defaults(cls) else None
        if dataclasses.is_dataclass(default):
            v = from_dict(type(default), v)
        elif isinstance(default, tuple):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in fields(cls))


def pipeline_from_dict(data: dict) -> PipelineConfig:
    return from_dict(PipelineConfig, data)


def train_from_dict(data: dict) -> TrainConfig:
    return from_dict(TrainConfig, data)


__all__ = ["ConfigError", "EvalConfig", "PipelineConfig", "format_config", "parse_config", "load_config",
           "to_dict", "from_dict", "pipeline_from_dict", "train_from_dict"]
