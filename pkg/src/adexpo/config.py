"""Experiment configuration: flat INI with one section per module.

Every key maps to a dataclass field; unknown sections or keys are
rejected so typos fail loudly.  Defaults reproduce the reference
experiment without any file at all.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .env import DayPool, GenConfig, PositionModel
from .higher import HigherConfig
from .lower import LowerConfig
from .pscmdp import ConstraintSpec, FeatureScaler

__all__ = ["RunConfig", "ExperimentConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    n_train_days: int = 200
    train_day_seed_base: int = 1000
    n_eval_days: int = 20
    eval_day_seed_base: int = 5000
    calibration_day_seed: int = 4999
    position_gamma: float = 0.3
    valuation: str = "ecpm"


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GenConfig = field(default_factory=GenConfig)
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    lower: LowerConfig = field(default_factory=LowerConfig)
    higher: HigherConfig = field(default_factory=HigherConfig)
    run: RunConfig = field(default_factory=RunConfig)

    _SECTIONS = {
        "generator": GenConfig,
        "constraints": ConstraintSpec,
        "lower": LowerConfig,
        "higher": HigherConfig,
        "run": RunConfig,
    }

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        kwargs = {}
        for section in parser.sections():
            if section not in cls._SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            klass = cls._SECTIONS[section]
            allowed = {f.name: f for f in fields(klass)}
            overrides = {}
            for key, raw in parser.items(section):
                if key not in allowed:
                    raise ConfigError(
                        f"unknown key {key!r} in section [{section}]")
                overrides[key] = _convert(raw, getattr(klass(), key), key)
            kwargs[section] = klass(**overrides)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in self._SECTIONS}

    def config_hash(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()

    # wiring helpers

    def position_model(self) -> PositionModel:
        return PositionModel(gamma=self.run.position_gamma)

    def scaler(self) -> FeatureScaler:
        return FeatureScaler.from_gen_config(self.generator)

    def train_pool(self) -> DayPool:
        base = self.run.train_day_seed_base
        return DayPool(cfg=self.generator,
                       seeds=list(range(base, base + self.run.n_train_days)))

    def eval_pool(self) -> DayPool:
        base = self.run.eval_day_seed_base
        return DayPool(cfg=self.generator,
                       seeds=list(range(base, base + self.run.n_eval_days)))

    def calibration_day(self):
        from .env import generate_day
        return generate_day(self.generator, self.run.calibration_day_seed)


def _convert(raw: str, default, key: str):
    """Parse a raw INI value into the type of the dataclass default."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = default[0] if default else 0
            if isinstance(elem, int) and not isinstance(elem, bool):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"cannot parse value for {key!r}: {raw!r}") from e
