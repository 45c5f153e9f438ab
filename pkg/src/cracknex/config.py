"""Training configuration and its flat INI representation."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .network import PADDING_MODES
from .protonet import SSPConfig

SECTION = "cracknex"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 6000
    batch_episodes: int = 4
    lr0: float = 1e-3
    momentum: float = 0.9
    decay_every: int = 2000
    decay_factor: float = 0.1
    shots: int = 1
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.2
    use_reflectance: bool = True
    use_pfm: bool = True
    use_aspp: bool = True
    temperature: float = 10.0
    width: int = 64
    image_size: tuple[int, int] = (400, 400)
    smoothing_sigma: Optional[float] = None
    tau_fg: float = 0.7
    tau_bg: float = 0.6
    blend: float = 0.5
    padding_mode: str = "zeros"
    eval_episodes: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("batch_episodes", "decay_every", "shots", "width", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr0 <= 0 or self.temperature <= 0:
            raise ConfigError("lr0 and temperature must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0 < self.decay_factor < 1:
            raise ConfigError("decay_factor must be in (0, 1)")
        if len(self.image_size) != 2 or any(v <= 0 or v % 8 for v in self.image_size):
            raise ConfigError(f"image_size must be two positive multiples of 8, got {self.image_size}")
        if self.smoothing_sigma is not None and self.smoothing_sigma <= 0:
            raise ConfigError("smoothing_sigma must be > 0")
        if self.padding_mode not in PADDING_MODES:
            raise ConfigError(f"padding_mode must be one of {PADDING_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        try:
            self.ssp, self.loss_weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def ssp(self) -> SSPConfig:
        return SSPConfig(self.tau_fg, self.tau_bg, self.blend)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if name == "image_size":
            parts = raw.replace("x", ",").split(",")
            return tuple(int(p) for p in parts)
        if name == "smoothing_sigma":
            return None if raw.lower() in ("", "none", "auto") else float(raw)
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse a one-section INI text; absent keys keep the defaults of ``base``."""
    base = base or TrainConfig()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text if text.lstrip().startswith("[") else f"[{SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if len(parser.sections()) != 1:
        raise ConfigError(f"expected exactly one section, found {parser.sections()}")
    section = parser[parser.sections()[0]]
    known = {f.name for f in fields(TrainConfig)}
    changes = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, raw, getattr(base, key))
    return base.replace(**changes)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"[{SECTION}]"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "image_size":
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "auto"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
