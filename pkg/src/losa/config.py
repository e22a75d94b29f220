"""Run configuration.

Configuration files are TOML. Keys may be written as tables or as dotted
keys; either way they are flattened to dotted names that mirror the
attribute path on :class:`RunConfig` (``schedule.T``, ``optim.lr``, ...).
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from losa.adapters import AdamConfig
from losa.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("losa", "lora_baseline", "oneshot", "nm_losa")


@dataclass
class ScheduleConfig:
    T: int = 5
    theta_f: float = 0.7
    omega_1: float = 6.0
    kind: str = "cubic"


@dataclass
class MaskConfig:
    scorer: str = "wanda"


@dataclass
class RmiConfig:
    center: bool = True
    maps: str = "outputs"


@dataclass
class SparsityConfig:
    delta: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 50
    init_sigma: float = 0.02


@dataclass
class ModelConfig:
    dims: list = field(default_factory=lambda: [32, 64, 64, 32])
    # "he" means sqrt(2 / fan_in) per layer
    sigma: Union[float, str] = "he"
    activation: str = "relu"
    checkpoint: str = ""


@dataclass
class CalibConfig:
    samples: int = 128
    path: str = ""


@dataclass
class LoraConfig:
    rank: int = 8


@dataclass
class NMConfig:
    m_group: int = 8
    max_shift: int = 1


@dataclass
class RunConfig:
    mode: str = "losa"
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    rmi: RmiConfig = field(default_factory=RmiConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    optim: AdamConfig = field(default_factory=AdamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    nm: NMConfig = field(default_factory=NMConfig)

    def to_flat(self) -> dict:
        return flatten(dataclasses.asdict(self))

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        cfg = cls()
        for key, value in flat.items():
            set_key(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self):
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        s = self.schedule
        need(self.mode in MODES, "mode", f"expected one of {MODES}, got {self.mode!r}")
        need(s.T >= 1, "schedule.T", "must be >= 1")
        need(0.0 <= s.theta_f <= 1.0, "schedule.theta_f", "must lie in [0, 1]")
        need(s.omega_1 >= 0, "schedule.omega_1", "must be >= 0")
        need(s.kind in ("cubic", "linear"), "schedule.kind", "expected 'cubic' or 'linear'")
        need(self.mask.scorer in ("wanda", "magnitude"), "mask.scorer", "expected 'wanda' or 'magnitude'")
        need(self.rmi.maps in ("outputs", "inputs"), "rmi.maps", "expected 'outputs' or 'inputs'")
        need(0.0 <= self.sparsity.delta <= 1.0, "sparsity.delta", "must lie in [0, 1]")
        need(self.optim.lr >= 0, "optim.lr", "must be >= 0")
        need(0 <= self.optim.beta1 < 1 and 0 <= self.optim.beta2 < 1, "optim.beta1", "betas must lie in [0, 1)")
        need(self.train.epochs >= 0, "train.epochs", "must be >= 0")
        need(self.train.init_sigma >= 0, "train.init_sigma", "must be >= 0")
        need(len(self.model.dims) >= 2 and all(d >= 1 for d in self.model.dims), "model.dims", "need >= 2 positive sizes")
        need(self.model.sigma == "he" or (not isinstance(self.model.sigma, str) and self.model.sigma >= 0),
             "model.sigma", "expected 'he' or a number >= 0")
        need(self.model.activation in ("relu", "identity"), "model.activation", "expected 'relu' or 'identity'")
        need(self.calib.samples >= 2, "calib.samples", "must be >= 2")
        need(self.lora.rank >= 0, "lora.rank", "must be >= 0")
        need(self.nm.m_group >= 1, "nm.m_group", "must be >= 1")
        need(self.nm.max_shift >= 0, "nm.max_shift", "must be >= 0")
        return self


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(key: str, value, tp):
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    elif tp is list:
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
        tp = "list of int"
    elif tp == Union[float, str]:
        if isinstance(value, str):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        tp = "float or str"
    raise ConfigError(f"{key}: expected {_type_name(tp)}, got {type(value).__name__} {value!r}")


def set_key(cfg: RunConfig, key: str, value):
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        sub = getattr(obj, part, None)
        if sub is None or not dataclasses.is_dataclass(sub):
            raise ConfigError(f"{key}: unknown configuration key")
        obj = sub
    hints = typing.get_type_hints(type(obj))
    name = parts[-1]
    if name not in hints or dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"{key}: unknown configuration key")
    tp = hints[name]
    setattr(obj, name, _coerce(key, value, tp))


def parse_value(text: str):
    """Parse an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, text = item.split("=", 1)
        out[key.strip()] = parse_value(text.strip())
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a TOML file (optional) and apply ``key=value`` overrides on top."""
    flat = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            flat = flatten(tomllib.loads(path.read_text()))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)
