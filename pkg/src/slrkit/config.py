"""Declarative run configuration: a single JSON file deep-merged over
defaults, flag overrides on top, and a content hash that every run's
outputs embed. The hash canonicalizes key order, so reordering keys in the
config file never changes it."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ValidationError

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "synth": {
        "subjects": 5,
        "days_per_subject": 20,
        "images_per_day": 2,
        "classes": 4,
        "image_size": 64,
        "evolution_rate": 0.15,
        "label_fraction": 0.25,
        "noise_level": 0.1,
    },
    "features": {
        "provider": "descriptor",
        "use_pca": True,
        "pca_k": 256,
    },
    "pairing": {
        "tau_min": 0.0,
        "random_count": 1,
    },
    "trainer": {
        "epochs": 40,
        "batch_size": 8,
        "base_lr": 0.02,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "poly_power": 0.9,
        "resolution": 64,
        "f1": 8,
        "f2": 8,
        "dtype": "float64",
        "use_pairs": True,
        "use_eta": True,
        "use_lambda": True,
        "eta_include_background": True,
    },
    "ablate": {
        "seeds": [0, 1, 2],
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: Path | str | None = None) -> dict:
    """Defaults, optionally overridden by a JSON config file."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(user, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    """Stable 12-hex digest of the canonicalized config."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def apply_overrides(cfg: dict, *, seed: int | None = None,
                    no_pca: bool = False, tau_min: float | None = None,
                    no_eta: bool = False, no_lambda: bool = False,
                    no_pairs: bool = False) -> dict:
    """Flag overrides win over the config file."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = seed
    if no_pca:
        cfg["features"]["use_pca"] = False
    if tau_min is not None:
        cfg["pairing"]["tau_min"] = tau_min
    if no_eta:
        cfg["trainer"]["use_eta"] = False
    if no_lambda:
        cfg["trainer"]["use_lambda"] = False
    if no_pairs:
        cfg["trainer"]["use_pairs"] = False
    return cfg
