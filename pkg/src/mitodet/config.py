"""Flat ``section.key = value`` run configuration.

Every section mirrors one module configuration dataclass. Values from a
config file are applied first, then command-line overrides. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .candidates import DetectorParams
from .errors import ConfigError
from .metrics import MatchConfig
from .mining import MiningConfig
from .nn import TrainConfig
from .registration import RegistrationConfig
from .stain import StainAugmentParams
from .synth import SynthConfig

ENV_VAR = "MITODET_CONFIG"


@dataclass(frozen=True)
class PHH3Config:
    dab_thresh: float = 0.15
    min_size: int = 4
    gamma: float = 0.0625
    threshold: float = 0.5


@dataclass(frozen=True)
class EnsembleConfig:
    k: int = 3
    gamma: float = 0.125
    student_gamma: float = 0.0625
    label_radius: float = 100.0


@dataclass(frozen=True)
class InferConfig:
    floor: float = 0.8
    d: float = 100.0
    tile_cells: int = 128
    tissue_scale: int = 16
    od_threshold: float = 0.05


@dataclass(frozen=True)
class GradeConfig:
    delta: float = 0.9
    theta1: int = 6
    theta2: int = 20
    area_mm2: float = 2.0
    mpp: float = 0.25
    stride: int = 200
    min_tissue: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    stain: StainAugmentParams = field(default_factory=StainAugmentParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    phh3: PHH3Config = field(default_factory=PHH3Config)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    grade: GradeConfig = field(default_factory=GradeConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def items(self):
        """All resolved (key, value) pairs, in declaration order."""
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in fields(v):
                    if f.name == "augment" and g.name == "stain_params":
                        continue  # exposed as the ``stain`` section
                    yield f"{f.name}.{g.name}", getattr(v, g.name)
            else:
                yield f.name, v

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def format_value(v) -> str:
    if isinstance(v, (frozenset, set)):
        return "".join(sorted(v))
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _convert(raw: str, default, key: str):
    s = raw.strip()
    try:
        if isinstance(default, bool):
            if s.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(s)
            return s.lower() in ("true", "1", "yes")
        if default is None:
            return None if s.lower() == "none" else int(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, frozenset):
            return frozenset(s.replace(",", "").replace(" ", ""))
        if isinstance(default, tuple):
            parts = [p for p in s.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return tuple(_convert(p, d, key) for p, d in zip(parts, default))
        return s
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to a dict; '#' starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def apply(cfg: RunConfig, values: dict) -> RunConfig:
    """New config with string ``values`` applied; unknown keys raise ConfigError."""
    top = {f.name: f for f in fields(cfg)}
    updates: dict = {}
    for key, raw in values.items():
        section, dot, name = key.partition(".")
        if section not in top:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, section)
        if not dot:
            if dataclasses.is_dataclass(current):
                raise ConfigError(f"{key!r} is a section, not a key")
            updates[section] = _convert(raw, current, key)
            continue
        if not dataclasses.is_dataclass(current) or name not in {f.name for f in fields(current)}:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _convert(raw, getattr(current, name), key)
    new = {}
    for section, upd in updates.items():
        if isinstance(upd, dict):
            try:
                new[section] = replace(getattr(cfg, section), **upd)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid [{section}] values: {exc}") from None
        else:
            new[section] = upd
    out = replace(cfg, **new)
    if out.stain != out.augment.stain_params:
        out = replace(out, augment=replace(out.augment, stain_params=out.stain))
    return out


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- file (``path`` or $MITODET_CONFIG) <- overrides."""
    cfg = RunConfig()
    path = path if path is not None else os.environ.get(ENV_VAR) or None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply(cfg, parse_text(p.read_text(), str(p)))
    if overrides:
        cfg = apply(cfg, overrides)
    return cfg
