"""Run configuration: defaults, presets and flat YAML config files.

Resolution order is defaults < preset < config file < command-line flags.
"""

import dataclasses
import math
from dataclasses import dataclass, field, fields

import yaml

from .errors import DataError
from .pipeline import SITE_LEAK_CELLS, SITE_WELLS

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Unknown key or ill-typed value in a run configuration (a usage error)."""


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = None
    # simulate
    grid: tuple = (160, 160)
    n_steps: int = 1001
    dt: float = 1.0
    leak_cells: tuple = SITE_LEAK_CELLS
    wells: tuple = SITE_WELLS
    n_classes: int = 4
    rate_values: tuple = (1.0, 2.0, 3.0, 4.0)
    rate_scale: float = 1.0
    diffusivity_scale: float = 0.012
    corr_len: float = 8.0
    log_mean: float = math.log(100.0)
    log_std: float = 0.5
    shale_fraction: float = 0.1
    porosity_mean: float = 0.2
    p0: float = 0.0
    workers: int = 1
    # preprocess
    threshold: float = 5.0
    split: tuple = (0.64, 0.16, 0.20)
    downsample: bool = False
    # train
    latent: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    mc_samples: int = 1
    batch: int = 128
    patience: int = 200
    max_epochs: int = 2000
    lr: float = 1e-3
    beta_1: float = 0.9
    beta_2: float = 0.999
    adam_eps: float = 1e-7
    # inference / evaluation
    n_mc: int = 100
    mc_seed: int = None
    instance: int = 0
    save_samples: bool = False
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = [list(e) if isinstance(e, tuple) else e for e in v]
            out[f.name] = v
        return out

    @property
    def effective_mc_seed(self):
        return self.seed if self.mc_seed is None else self.mc_seed


PRESETS = {
    "desk": {
        "grid": (32, 32), "n_steps": 200,
        "leak_cells": ((10, 9), (21, 22)),
        "wells": ((6, 20), (16, 14), (25, 6)),
        "diffusivity_scale": 0.002, "rate_scale": 30.0, "corr_len": 3.0,
        "shale_fraction": 0.1, "patience": 50, "max_epochs": 500,
    },
    "paper-shape": {
        "grid": (160, 160), "n_steps": 1001,
        "leak_cells": SITE_LEAK_CELLS, "wells": SITE_WELLS,
        "diffusivity_scale": 0.012, "rate_scale": 750.0, "corr_len": 8.0,
    },
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, value):
    default = _FIELDS[name].default
    if value is None:
        return None
    try:
        if name in ("grid",):
            value = tuple(int(v) for v in value)
            if len(value) != 2:
                raise ValueError("expected two integers")
        elif name in ("leak_cells", "wells"):
            value = tuple((int(r), int(c)) for r, c in value)
        elif name in ("rate_values", "split"):
            value = tuple(float(v) for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
        elif isinstance(default, int) or name == "mc_seed":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
        elif name == "preset":
            value = str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {name!r}: invalid value {value!r} ({exc})") from None
    return value


def apply(cfg, updates, source="config"):
    """Return a copy of ``cfg`` with ``updates`` applied; unknown keys are rejected."""
    unknown = sorted(set(updates) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown {source} key(s): {', '.join(unknown)}")
    changes = {k: _coerce(k, v) for k, v in updates.items()}
    return dataclasses.replace(cfg, **changes)


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise DataError(f"malformed config file {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise DataError(f"config file {path} must be a flat key: value mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(flags, config_path=None, base=None):
    """Build a RunConfig from explicit ``flags`` (only keys the user set) and an optional file.

    ``base`` holds values recorded by an earlier stage (e.g. in a checkpoint);
    they replace the built-in defaults but yield to everything else.
    """
    file_values = load_config_file(config_path) if config_path else {}
    preset = flags.get("preset") or file_values.get("preset")
    cfg = apply(RunConfig(), base or {}, "recorded")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg = apply(cfg, {**PRESETS[preset], "preset": preset}, "preset")
    cfg = apply(cfg, file_values, "config-file")
    return apply(cfg, flags, "flag")
