"""Pipeline configuration: a single JSON document with environment overrides.

Any leaf may be overridden by ``IDPR_<PATH>`` where ``<PATH>`` is the key path
joined by underscores and upper-cased, e.g. ``IDPR_SSVM_C=0.5`` or
``IDPR_TYPES_T=5``.  Override values are parsed as JSON, falling back to a
plain string.
"""
import copy
import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "IDPR_"

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "workdir": "idpr-run",
    "paths": {
        "train": None,        # JSONL of annotated positives
        "test": None,         # JSONL of annotated test images
        "negatives": None,    # JSONL of images without people
        "graph": None,        # JSON part graph; defaults to the synthetic skeleton
    },
    "synth": {
        "num_train": 100,
        "num_test": 50,
        "num_negatives": 20,
        "width": 24,
        "height": 24,
        "angle_jitter_deg": 6.0,
        "limb_width": 1.2,
        "limb_intensity": 0.85,
        "background": 0.2,
        "texture_jitter": 0.08,
        "noise_level": 0.08,
        "num_distractors": 2,
        "distractor_length": 6.0,
        "margin": 1.0,
        "skeleton": None,     # None: the four-part stick figure
    },
    "augment": {"rotation_step_deg": 10.0, "flip": True},
    "midway_parts": False,
    "types": {"T": 11, "max_iters": 300},
    "patches": {
        "side": 36,
        "stride": 1,
        "background_per_image": 4,       # extra background patches per positive
        "background_per_negative": None,  # None: one per part
        "min_distance": 2.0,
    },
    "classifier": {
        "hidden": [128],
        "epochs": 60,
        "batch_size": 64,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "features": "raw+grad",
        "grad_cells": 3,
        "grad_bins": 8,
        "val_fraction": 0.1,
    },
    "ssvm": {
        "C": 1.0,
        "epochs": 1000,
        "batch_size": 0,
        "eta0": [0.9, 0.5, 0.3, 0.2],
        "decay": 0.1,
        "epsilon": 1e-4,
        "negatives": 100,
        "rounds": 20,
        "hard_fraction": 0.5,
        "nonnegative_evidence": True,
    },
    "modes": ["full", "no_idprs", "unary_only"],
    "eval": {
        "limbs": None,            # None: one limb per graph edge
        "pdj_thresholds": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
        "scale_pair": None,       # None: the first two parts
        "use_torso_box": False,
    },
}

#: Desk-scale synthetic setup: 200 figures mirrored into 400 training
#: figures, 50 test figures, four parts, three types per edge, 24x24 grids.
REFERENCE_OVERRIDES = {
    "synth": {"num_train": 200, "num_test": 50, "num_negatives": 40},
    "augment": {"rotation_step_deg": 360.0, "flip": True},
    "types": {"T": 3},
    "patches": {"side": 9},
}


def merge(base, override):
    """Recursive dict merge; ``override`` wins on leaves."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def reference_config(**overrides):
    return merge(merge(DEFAULT_CONFIG, REFERENCE_OVERRIDES), overrides)


def _leaf_paths(d, prefix=()):
    for k, v in d.items():
        path = prefix + (k,)
        if isinstance(v, dict):
            yield from _leaf_paths(v, path)
        yield path


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_env_overrides(config, environ=None):
    environ = os.environ if environ is None else environ
    config = copy.deepcopy(config)
    names = {ENV_PREFIX + "_".join(p).upper(): p for p in _leaf_paths(config)}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name == "IDPR_DISABLE_NUMBA":
            continue
        path = names.get(name)
        if path is None:
            raise ConfigError(f"environment override {name} matches no config key")
        node = config
        for k in path[:-1]:
            node = node[k]
        node[path[-1]] = _parse_value(value)
    return config


def _check(config):
    for key, default in DEFAULT_CONFIG.items():
        if key not in config:
            raise ConfigError(f"config is missing section {key!r}")
        if isinstance(default, dict) and not isinstance(config[key], dict):
            raise ConfigError(f"config section {key!r} must be an object")
    t = config["types"]["T"]
    if isinstance(t, dict):
        if any(int(v) < 1 for v in t.values()):
            raise ConfigError("every per-edge type count must be >= 1")
    elif int(t) < 1:
        raise ConfigError("types.T must be >= 1")
    if int(config["patches"]["side"]) < 1:
        raise ConfigError("patches.side must be >= 1")
    if int(config["patches"]["stride"]) < 1:
        raise ConfigError("patches.stride must be >= 1")
    bad = set(config["modes"]) - {"full", "no_idprs", "unary_only"}
    if bad:
        raise ConfigError(f"unknown modes {sorted(bad)}")
    return config


def load_config(path=None, environ=None, base=None):
    """Defaults, merged with the JSON file at ``path``, then env overrides.

    Unknown keys in the file are rejected so typos fail loudly.
    """
    config = copy.deepcopy(base or DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _reject_unknown(user, config)
        config = merge(config, user)
        # relative data paths are taken relative to the config file
        for key, value in config["paths"].items():
            if value is not None and not Path(value).is_absolute():
                config["paths"][key] = str(path.parent / value)
        if not Path(config["workdir"]).is_absolute():
            config["workdir"] = str(path.parent / config["workdir"])
    return _check(apply_env_overrides(config, environ))


def check_paths(config):
    """Raise :class:`ConfigError` unless every configured input path exists."""
    for key, value in config["paths"].items():
        if value is not None and not Path(value).exists():
            raise ConfigError(f"paths.{key}: {value} does not exist")


def _reject_unknown(user, ref, prefix=""):
    for k, v in user.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(v, dict) and isinstance(ref[k], dict):
            _reject_unknown(v, ref[k], prefix + k + ".")


def config_hash(*parts):
    """Stable digest of JSON-serializable values."""
    text = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
