"""Training configuration and flat `key = value` config files.

Config files cover every TrainConfig and NetConfig field. Blank lines and
`#` comments are ignored; unknown or repeated keys are errors.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Tuple, get_type_hints

from network import NetConfig
from oss2d import parse_directions

# =========================
# Environment
# =========================
LOG_LEVEL = os.environ.get("FERYOLO_LOG_LEVEL", "INFO").upper()
CHECKPOINT = os.environ.get("FERYOLO_CHECKPOINT", "")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ConfigError(ValueError):
    """Bad config file content; the message names file and line."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 300
    initial_lr: float = 0.001
    lr_decay_factor: float = 0.9
    lr_decay_interval_epochs: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loader_workers: int = 2
    prefetch_batches: int = 4
    eval_interval: int = 1
    eval_conf: float = 0.001
    max_steps: int = 0  # 0 = no limit

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_interval_epochs < 1:
            raise ValueError(f"lr_decay_interval_epochs must be >= 1, got {self.lr_decay_interval_epochs}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 <= self.eval_conf <= 1.0:
            raise ValueError(f"eval_conf must lie in [0, 1], got {self.eval_conf}")


# ------------------------ value parsing ------------------------
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_value(key: str, kind, text: str):
    text = text.strip()
    if key == "directions":
        return parse_directions(text)
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    # tuples of ints / floats
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if key == "widths" or key == "depths":
        return tuple(int(p) for p in parts)
    return tuple(float(p) for p in parts)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(getattr(v, "value", str(v)) for v in value)
    return str(value)


def _field_kinds(cls) -> Dict[str, type]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> Dict[str, Tuple[str, int]]:
    """key -> (raw value, line number)."""
    pairs: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {pairs[key][1]})")
        pairs[key] = (value, lineno)
    return pairs


def build_configs(pairs: Dict[str, Tuple[str, int]], source: str = "<config>") -> Tuple[TrainConfig, NetConfig]:
    train_kinds = _field_kinds(TrainConfig)
    net_kinds = _field_kinds(NetConfig)
    train_args, net_args = {}, {}
    for key, (text, lineno) in pairs.items():
        if key in train_kinds:
            kinds, target = train_kinds, train_args
        elif key in net_kinds:
            kinds, target = net_kinds, net_args
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            target[key] = _parse_value(key, kinds[key], text)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    try:
        return TrainConfig(**train_args), NetConfig(**net_args)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str) -> Tuple[TrainConfig, NetConfig]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
    return build_configs(parse_pairs(lines, source=path), source=path)


def dump_config(train: TrainConfig, net: NetConfig) -> List[str]:
    lines = ["# training"]
    lines += [f"{f.name} = {format_value(getattr(train, f.name))}" for f in fields(train)]
    lines.append("# network")
    lines += [f"{f.name} = {format_value(getattr(net, f.name))}" for f in fields(net)]
    return lines
