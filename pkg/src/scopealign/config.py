"""TOML experiment configuration with strict keys and resolved defaults."""

from __future__ import annotations

import copy
import re
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .engine import TrainConfig
from .federated import ALGORITHMS, FLConfig

COMMANDS = ("train", "scope", "fuse-scope", "interpolate", "match", "scale", "landscape", "fl", "study")

# Every accepted key with its default; the default's type is the key's type.
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "num_classes": 10,
        "dim": 20,
        "per_class": 200,
        "spread": 0.3,
        "modes_per_class": 3,
        "seed": 0,
        "train_csv": "",
        "test_csv": "",
    },
    "model": {"hidden": [64, 64], "init": "normal"},
    "train": {
        "epochs": 60,
        "batch_size": 32,
        "optimizer": "sgd",
        "learning_rate": 0.03,
        "momentum": 0.9,
        "weight_decay": 1e-5,
        "loss": "cross_entropy",
        "max_grad_norm": 0.0,
    },
    "regularizer": {
        "kind": "none",
        "lam": 5.0,
        "mu": 0.0,
        "sigma": 0.1,
        "weights_only": False,
        "target": "",
        "anchor": "",
    },
    "fl": {
        "num_clients": 10,
        "participation_fraction": 1.0,
        "rounds": 150,
        "local_steps": 20,
        "learning_rate": 0.01,
        "lam": 5.0,
        "algorithm": "fedavg_wsa",
        "wsa_window": [-1, -1],
        "batch_size": 50,
        "momentum": 0.0,
        "weight_decay": 1e-4,
        "max_grad_norm": 1.0,
        "prox_mu": 0.01,
        "dirichlet_alpha": 0.5,
        "weights_only": False,
        "weighted_aggregation": False,
        "threads": 1,
        "init": "",
    },
    "models": {"a": "", "b": "", "c": ""},
    "interpolate": {"grid_size": 21, "match": False},
    "match": {"max_sweeps": 50},
    "scale": {"layer": 0, "alpha": 5.0},
    "landscape": {"resolution": 11, "margin": 0.0},
    "scope": {"weights_only": False},
    "fuse": {"scopes": [""]},
    "study": {"name": "conditions", "seeds": [0, 1, 2]},
}
TOP_LEVEL = {"command": "train", "seed": 0, "output_dir": ""}

CHOICES = {
    ("model", "init"): ("normal", "uniform"),
    ("train", "optimizer"): ("sgd", "adam"),
    ("train", "loss"): ("cross_entropy", "mse"),
    ("regularizer", "kind"): ("none", "weight_decay", "proximal", "wsa", "predefined_gaussian"),
    ("fl", "algorithm"): ALGORITHMS,
    ("study", "name"): ("conditions", "scaling", "wsa_barrier", "fl_comparison", "lambda_sweep", "predefined", "window"),
}
NON_NEGATIVE = {
    ("regularizer", "lam"), ("fl", "lam"), ("train", "weight_decay"), ("train", "momentum"),
    ("fl", "weight_decay"), ("fl", "momentum"), ("fl", "prox_mu"), ("train", "max_grad_norm"),
    ("fl", "max_grad_norm"), ("train", "epochs"), ("fl", "rounds"), ("data", "spread"), ("landscape", "margin"),
}
POSITIVE = {
    ("train", "learning_rate"), ("fl", "learning_rate"), ("train", "batch_size"), ("fl", "batch_size"),
    ("fl", "num_clients"), ("fl", "local_steps"), ("fl", "dirichlet_alpha"), ("data", "num_classes"),
    ("data", "dim"), ("data", "per_class"), ("data", "modes_per_class"), ("regularizer", "sigma"),
    ("fl", "participation_fraction"), ("scale", "alpha"), ("match", "max_sweeps"), ("fl", "threads"),
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")
        self.line = line
        self.field = field


def _line_of(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        head = re.match(r"^\[\s*([^\]]+?)\s*\]", line)
        if head:
            current = head.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"^\"?{re.escape(key)}\"?\s*=", line):
            return i
    return None


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(_type_ok(v, default[0]) for v in value)
    return False


def _coerce(value, default):
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        return [_coerce(v, default[0]) for v in value]
    return value


@dataclass
class ExperimentConfig:
    command: str = "train"
    seed: int = 0
    output_dir: str = ""
    sections: Dict[str, Dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    def to_dict(self) -> dict:
        out = {"command": self.command, "seed": self.seed, "output_dir": self.output_dir}
        out.update(copy.deepcopy(self.sections))
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            optimizer=t["optimizer"],
            learning_rate=t["learning_rate"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            loss=t["loss"],
            max_grad_norm=t["max_grad_norm"] or None,
        )

    def fl_config(self) -> FLConfig:
        f = self["fl"]
        window = tuple(f["wsa_window"]) if min(f["wsa_window"]) >= 0 else None
        return FLConfig(
            num_clients=f["num_clients"],
            participation_fraction=f["participation_fraction"],
            rounds=f["rounds"],
            local_steps=f["local_steps"],
            learning_rate=f["learning_rate"],
            lam=f["lam"],
            algorithm=f["algorithm"],
            wsa_window=window,
            seed=self.seed,
            batch_size=f["batch_size"],
            momentum=f["momentum"],
            weight_decay=f["weight_decay"],
            max_grad_norm=f["max_grad_norm"] or None,
            prox_mu=f["prox_mu"],
            weighted_aggregation=f["weighted_aggregation"],
            weights_only=f["weights_only"],
            threads=f["threads"],
        )


def _check_value(section: str, key: str, value, text: str):
    line = _line_of(text, section, key)
    name = f"{section}.{key}"
    if (section, key) in CHOICES and value not in CHOICES[(section, key)]:
        raise ConfigError(f"{name} must be one of {list(CHOICES[(section, key)])}, got {value!r}", line, name)
    if (section, key) in NON_NEGATIVE and value < 0:
        raise ConfigError(f"{name} must be non-negative, got {value!r}", line, name)
    if (section, key) in POSITIVE and not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}", line, name)
    if (section, key) == ("fl", "participation_fraction") and value > 1:
        raise ConfigError(f"{name} must be at most 1, got {value!r}", line, name)
    if (section, key) == ("fl", "wsa_window"):
        if len(value) != 2:
            raise ConfigError(f"{name} must have two entries", line, name)
        if min(value) >= 0 and value[0] > value[1]:
            raise ConfigError(f"{name} start must not exceed end", line, name)


def parse_config(text: str) -> ExperimentConfig:
    """Parse TOML text into a fully resolved :class:`ExperimentConfig`.

    Unknown keys, wrong types and out-of-range values raise
    :class:`ConfigError` carrying the offending line number when it can be
    located.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed config: {exc}", int(m.group(1)) if m else None) from exc
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in TOP_LEVEL:
            if not _type_ok(value, TOP_LEVEL[key]):
                raise ConfigError(
                    f"{key} must be {type(TOP_LEVEL[key]).__name__}, got {type(value).__name__}",
                    _line_of(text, None, key), key,
                )
            setattr(cfg, key, value)
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}", _line_of(text, None, key) or _line_of(text, key, None), key)
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be a section", _line_of(text, None, key), key)
        for sub, v in value.items():
            name = f"{key}.{sub}"
            if sub not in DEFAULTS[key]:
                raise ConfigError(f"unknown key {name!r}", _line_of(text, key, sub), name)
            default = DEFAULTS[key][sub]
            if not _type_ok(v, default):
                raise ConfigError(
                    f"{name} must be {type(default).__name__}, got {type(v).__name__}", _line_of(text, key, sub), name
                )
            v = _coerce(v, default)
            _check_value(key, sub, v, text)
            cfg.sections[key][sub] = v
    if cfg.command not in COMMANDS:
        raise ConfigError(f"command must be one of {list(COMMANDS)}, got {cfg.command!r}",
                          _line_of(text, None, "command"), "command")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
