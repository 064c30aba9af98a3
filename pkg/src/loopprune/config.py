"""Declarative run configuration.

One INI-style file drives every command.  Every key has a default except
``dataset.source_dir``; unknown sections or keys are rejected so typos
fail loudly.  Individual keys can be overridden on the command line with
``--set section.key=value``, and the environment variable
``LOOPPRUNE_SEED`` overrides ``run.seed``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .errors import ConfigError

_SCHEMA = {
    "run": {"seed": int, "output_dir": str},
    "dataset": {"source_dir": str, "qps": "int_list", "patch_size": int,
                "stride": int, "train_fraction": float},
    "model": {"width_scale": float},
    "train": {"epochs": int, "lr": float, "batch_size": int},
    "prune": {"st": float, "ct": float, "at": "opt_float", "max_drop": float,
              "pt": float, "train_epochs": int, "lr": float, "batch_size": int},
}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    source_dir: str | None = None
    qps: list = field(default_factory=lambda: [22, 27, 32, 37])
    patch_size: int = 48
    stride: int = 0              # 0 means "same as patch_size"
    train_fraction: float = 0.8
    width_scale: float = 1.0
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    st: float = 0.8
    ct: float = 0.001
    at: float | None = None
    max_drop: float = 0.1
    prune_train_epochs: int = 40
    prune_lr: float = 3e-3
    prune_batch_size: int = 4
    pt: float = 0.9

    def validate(self) -> None:
        if not self.qps:
            raise ConfigError("dataset.qps must name at least one QP level")
        if self.patch_size < 8:
            raise ConfigError(f"dataset.patch_size must be >= 8, got {self.patch_size}")
        if not 0.0 < self.width_scale <= 1.0:
            raise ConfigError(f"model.width_scale must be in (0, 1], got {self.width_scale}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")


_DEST = {
    ("run", "seed"): "seed",
    ("run", "output_dir"): "output_dir",
    ("dataset", "source_dir"): "source_dir",
    ("dataset", "qps"): "qps",
    ("dataset", "patch_size"): "patch_size",
    ("dataset", "stride"): "stride",
    ("dataset", "train_fraction"): "train_fraction",
    ("model", "width_scale"): "width_scale",
    ("train", "epochs"): "epochs",
    ("train", "lr"): "lr",
    ("train", "batch_size"): "batch_size",
    ("prune", "st"): "st",
    ("prune", "ct"): "ct",
    ("prune", "at"): "at",
    ("prune", "max_drop"): "max_drop",
    ("prune", "pt"): "pt",
    ("prune", "train_epochs"): "prune_train_epochs",
    ("prune", "lr"): "prune_lr",
    ("prune", "batch_size"): "prune_batch_size",
}


def _convert(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "opt_float":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "int_list":
            return [int(v) for v in raw.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unhandled schema kind for {section}.{key}")


def load_config(path, overrides=()) -> RunConfig:
    """Parse a config file, apply ``--set`` overrides and the seed
    environment override, and validate the result."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(cfg, _DEST[(section, key)], _convert(section, key, raw))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(cfg, _DEST[(section, key)], _convert(section, key, raw))
    env_seed = os.environ.get("LOOPPRUNE_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"LOOPPRUNE_SEED must be an integer, got {env_seed!r}") from exc
    cfg.validate()
    return cfg
