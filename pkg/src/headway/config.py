"""Application configuration: controller, simulation, plant defaults, label
vocabulary and service endpoints in one JSON file.

The LM credential never lives in config files; it is read from the
HEADWAY_LM_KEY environment variable.
"""

import json
import os
from dataclasses import dataclass, field

from .dynamics import PlantParams
from .environment import DEFAULT_VOCABULARY
from .mpc import MpcConfig
from .simulator import SimConfig

LM_KEY_ENV = "HEADWAY_LM_KEY"


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    plant: PlantParams = field(default_factory=PlantParams)
    vocabulary: dict = field(default_factory=lambda: dict(DEFAULT_VOCABULARY))
    services: dict = field(default_factory=dict)

    def lm_api_key(self):
        return os.environ.get(LM_KEY_ENV)


def _build(cls, doc: dict, where: str):
    valid = set(cls.__dataclass_fields__)
    for key in doc:
        if key not in valid:
            raise ConfigError(f"unknown key '{key}' in {where}")
    try:
        obj = cls(**doc)
        obj.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None
    return obj


def load_config(path=None) -> AppConfig:
    if path is None:
        return AppConfig()
    with open(path, "r") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    for key in doc:
        if key not in ("mpc", "sim", "plant", "vocabulary", "services"):
            raise ConfigError(f"unknown key '{key}' in config")
    cfg = AppConfig()
    if "mpc" in doc:
        cfg.mpc = _build(MpcConfig, doc["mpc"], "mpc")
    if "sim" in doc:
        cfg.sim = _build(SimConfig, doc["sim"], "sim")
    if "plant" in doc:
        cfg.plant = _build(PlantParams, doc["plant"], "plant")
    if "vocabulary" in doc:
        if not isinstance(doc["vocabulary"], dict):
            raise ConfigError("vocabulary must be a mapping")
        cfg.vocabulary = doc["vocabulary"]
    if "services" in doc:
        if not isinstance(doc["services"], dict):
            raise ConfigError("services must be a mapping")
        cfg.services = doc["services"]
    return cfg
