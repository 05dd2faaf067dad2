"""Flat ``key = value`` run configuration covering data, tokenizer, model and training fields."""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig, TrainingError


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_train: int = 2000
    num_val: int = 200
    image_size: int = 32
    patch_size: int = 4
    codebook_size: int = 16
    codebook_iters: int = 25
    bpe_merges: int = 48
    caption_budget: int = 16
    eval_items: int = 0  # 0: every val item
    eval_ks: tuple[int, ...] = (1, 2, 3)


# vocab_size is derived from the tokenizers, never set by hand
_DERIVED = {"vocab_size"}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    @property
    def seed(self) -> int:
        return self.train.seed


def _sections():
    return (("data", DataConfig), ("model", ModelConfig), ("train", TrainConfig))


def config_keys() -> dict[str, tuple]:
    """Every addressable key mapped to (section, field, type hint)."""
    out = {}
    for section, cls in _sections():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name in _DERIVED:
                continue
            if f.name in out:
                raise ConfigError(f"duplicate key {f.name}")
            out[f.name] = (section, f, hints[f.name])
    return out


def _parse_value(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            args = typing.get_args(hint)
            elem = args[0]
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(_parse_value(p, elem, key) for p in parts)
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported type {hint}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_assignments(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{n}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def build_config(assignments: dict[str, str] | None = None) -> RunConfig:
    """Defaults updated by raw string assignments; unknown keys are errors."""
    keys = config_keys()
    values: dict[str, dict] = {"data": {}, "model": {}, "train": {}}
    for key, raw in (assignments or {}).items():
        norm = key.replace("-", "_")
        if norm not in keys:
            raise ConfigError(f"unknown config key {key!r}")
        section, _f, hint = keys[norm]
        values[section][norm] = _parse_value(raw, hint, norm)
    try:
        data = DataConfig(**values["data"])
        train = TrainConfig(**values["train"])
        ModelConfig(vocab_size=1, **values["model"])  # validate early
    except (TypeError, ValueError, TrainingError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(data, values["model"], train)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    assignments = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        assignments.update(parse_assignments(p.read_text(), str(p)))
    assignments.update(overrides or {})
    return build_config(assignments)


def config_text(rc: RunConfig) -> str:
    """Effective configuration, every key, one per line in section order."""
    lines = []
    model_defaults = {f.name: f.default for f in fields(ModelConfig) if f.name not in _DERIVED}
    for section, cls in _sections():
        lines.append(f"# {section}")
        for f in fields(cls):
            if f.name in _DERIVED:
                continue
            if section == "model":
                value = rc.model.get(f.name, model_defaults[f.name])
            else:
                value = getattr(getattr(rc, section), f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_snapshot(rc: RunConfig, directory, name: str = "effective_config.txt") -> Path:
    p = Path(directory) / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(config_text(rc))
    return p
