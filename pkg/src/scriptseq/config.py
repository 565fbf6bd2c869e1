"""Layered run configuration: defaults, then TOML file, then CLI flags.

The effective configuration is echoed (with a content hash) into every
artifact a command writes, so any output can be traced back to the exact
settings that produced it.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["DEFAULTS", "load_config_file", "merge_config", "fingerprint"]

DEFAULTS: dict = {
    "model": {
        "d_model": 64,
        "n_heads": 4,
        "n_enc_layers": 2,
        "n_dec_layers": 2,
        "d_ffn": 128,
        "max_len": 160,
        "dropout": 0.1,
    },
    "train": {
        "learning_rate": 1e-5,
        "weight_decay": 1e-6,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "patience": 5,
        "decay": "decoupled",
    },
    "pretrain": {
        "epochs": 50,
        "batch_size": 32,
        "mask_style": "event",
        "norm": "paper",
    },
    "finetune": {
        "epochs": 50,
        "batch_size": 8,
        "learning_rate": None,  # falls back to [train] learning_rate
        "loss": "cot",
        "margin": 0.1,
        "orientation": "conventional",
        "scoring": "mean",
        "norm": "paper",
    },
}


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with p.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid TOML: {exc}") from exc
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, values in data.items():
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
    return data


def merge_config(file_cfg: dict, overrides: dict) -> dict:
    """DEFAULTS <- file <- flag overrides; returns the effective config.

    overrides is {section: {key: value-or-None}}; None means the flag was
    not passed and the lower layer wins.
    """
    out = {s: dict(v) for s, v in DEFAULTS.items()}
    for section, values in file_cfg.items():
        out[section].update(values)
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                if key not in out[section]:
                    raise ConfigError(f"unknown setting {section}.{key}")
                out[section][key] = value
    return out


def fingerprint(effective: dict, **extra) -> dict:
    """Effective settings plus a stable content hash."""
    payload = {**effective, **extra}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return {**payload, "sha256": hashlib.sha256(blob.encode("utf-8")).hexdigest()}
