"""Plain-text run configuration: one ``key = value`` per line, ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import DEFAULT_THRESHOLDS
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _toy_train() -> TrainConfig:
    return TrainConfig(epochs=30)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=_toy_train)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    hss_standard: bool = False
    ig_steps: int = 128
    lead_groups: tuple[tuple[int, int], ...] = ((1, 8), (9, 16), (17, 24))


_EXTRA = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "train"}
_TRAIN = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_groups(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in text.split(","):
        lo, hi = part.strip().split("-")
        lo, hi = int(lo), int(hi)
        if not 1 <= lo <= hi:
            raise ValueError(f"bad lead group {part.strip()!r}")
        out.append((lo, hi))
    return tuple(out)


def _convert(name: str, text: str, default):
    if name == "thresholds":
        return tuple(float(v) for v in text.split(","))
    if name == "lead_groups":
        return _parse_groups(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    base = RunConfig()
    train_vals = dataclasses.asdict(base.train)
    extra_vals = {k: getattr(base, k) for k in _EXTRA}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key in _TRAIN:
            target, default = train_vals, train_vals[key]
        elif key in _EXTRA:
            target, default = extra_vals, extra_vals[key]
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            target[key] = _convert(key, value, default)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r} ({exc})") from None
    train = TrainConfig(**train_vals)
    try:
        train.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(train=train, **extra_vals)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join(f"{a}-{b}" for a, b in value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = ["# training"]
    for name, value in dataclasses.asdict(cfg.train).items():
        lines.append(f"{name} = {_format(value)}")
    lines.append("# evaluation and attribution")
    for name in _EXTRA:
        lines.append(f"{name} = {_format(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"
