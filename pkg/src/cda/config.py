"""Run configuration: one JSON document, fully materialized defaults,
dotted-path overrides, unknown keys rejected."""

from __future__ import annotations

import copy
import json
import os

DEFAULTS = {
    "scm": {
        "d_x": 4,
        "K": 4,
        "seed": 0,
        "lag": 1,
        "noise_scale": 0.1,
        "y_noise_scale": 0.1,
        "transition": "linear",
        "u_dim": 0,
        "effect_scale": 1.0,
        "base_probs": None,  # null -> uniform logging policy
        "outcome_sensitivity": None,
        "spec_json": None,  # path to a serialized world; overrides the fields above
    },
    "data": {
        "vocabulary": None,  # null -> the default policy names
        "normalize": True,
    },
    "model": {
        "d_h": 32,
        "d_k": 8,
        "d_out": 16,
        "d_disc": 16,
        "window": 12,
        "shared_modules": True,
    },
    "train": {
        "epochs": 20,
        "batch_size": 16,
        "lr_g": 0.02,
        "lr_b": 0.05,
        "momentum": 0.0,
        "lam": 1.0,
        "betas": [1.0, 1.0, 1.0, 1.0],
        "gamma": 0.0,
        "horizon": 6,
        "seed": 0,
        "domain_loss_mode": "cmmd",
        "domain_sign": "descend",
        "cate_loss_weight": 1.0,
        "clip_norm": 5.0,
        "lambda_warmup_frac": 0.1,
        "patience": None,
    },
    "eval": {
        "taus": [6, 12, 24, 36],
        "tau": 6,
        "seeds": [0, 1, 2],
        "fraction": 0.5,
        "with_policy": True,
        "target_policy": None,
        "jobs": 1,
    },
}


class ConfigError(ValueError):
    pass


def _merge(section: str, defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            out[key] = _merge(f"{section}.{key}", defaults[key], val)
        else:
            out[key] = val
    return out


def materialize(partial: dict | None = None) -> dict:
    """Fill a (possibly partial) config with defaults; reject unknown keys."""
    partial = partial or {}
    for section in partial:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section '{section}'")
    return {
        section: _merge(section, DEFAULTS[section], partial.get(section, {}))
        for section in DEFAULTS
    }


def load(path) -> dict:
    with open(path) as fh:
        return materialize(json.load(fh))


def set_by_path(cfg: dict, dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` override (JSON-parsed value)."""
    if "." not in dotted:
        raise ConfigError(f"override '{dotted}' needs a section.key path")
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config path '{dotted}'")
        node = node[k]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw  # bare strings allowed


def default_seed(explicit: int | None) -> int:
    """Explicit flag wins; the CDA_SEED environment variable is the fallback."""
    if explicit is not None:
        return explicit
    env = os.environ.get("CDA_SEED")
    return int(env) if env else 0


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
