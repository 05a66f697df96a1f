"""Run configuration: INI-style sections, file values over defaults, CLI over file."""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .maskgen import MaskGenParams
from .rcd import SamplerOptions
from .train import TrainConfig


@dataclass
class PathOptions:
    data_dir: str = ""
    run_dir: str = ""
    test_dir: str = ""


@dataclass
class SegOptions:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 2e-3
    threshold: float = 0.5
    seed: int = 0
    train_split: str = "train"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mask: MaskGenParams = field(default_factory=MaskGenParams)
    sampler: SamplerOptions = field(default_factory=SamplerOptions)
    paths: PathOptions = field(default_factory=PathOptions)
    seg: SegOptions = field(default_factory=SegOptions)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, weights=dataclasses.replace(self.loss))


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def section_fields(section: str) -> list[dataclasses.Field]:
    return [f for f in fields(SECTIONS[section]) if f.name != "weights"]


def _coerce(raw: str, default, key: str, optional: bool = False):
    if optional and raw.strip().lower() in ("", "none"):
        return None
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if default is None:
        return None if raw.strip().lower() in ("", "none") else int(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return lineno
    return None


def apply_overrides(cfg: RunConfig, overrides: dict[tuple[str, str], str], source: str = "",
                    text: str = "") -> RunConfig:
    """Set ``(section, key) -> raw string`` values, rejecting unknown keys."""
    for (section, key), raw in overrides.items():
        where = ""
        if text:
            line = _line_of(text, section, key)
            where = f"{source}:{line}: " if line else f"{source}: "
        if section not in SECTIONS:
            raise ConfigError(f"{where}unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in section_fields(section)}
        if key not in known:
            raise ConfigError(f"{where}unknown key {section}.{key}")
        default = getattr(SECTIONS[section](), key)
        try:
            optional = "None" in str(known[key].type)
            value = _coerce(raw, default, f"{section}.{key}", optional)
        except ValueError as exc:
            raise ConfigError(f"{where}bad value for {section}.{key}: {exc}") from None
        setattr(target, key, value)
    try:
        for name in SECTIONS:
            obj = getattr(cfg, name)
            if hasattr(obj, "__post_init__"):
                obj.__post_init__()
    except ValueError as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from None
    return cfg


def load_config(path=None, overrides: dict[tuple[str, str], str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
        file_values = {(s, k): v for s in parser.sections() for k, v in parser.items(s)}
        apply_overrides(cfg, file_values, str(path), text)
    if overrides:
        apply_overrides(cfg, overrides, "command line")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in section_fields(section):
            value = getattr(obj, f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        lines.append("")
    return "\n".join(lines)
