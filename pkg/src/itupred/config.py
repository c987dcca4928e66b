"""Pipeline configuration: JSON file with defaults, dotted-path overrides,
and a content hash stamped into every artifact."""

from __future__ import annotations

import copy
import hashlib
import json


class ConfigError(ValueError):
    """Unreadable or invalid pipeline configuration."""


DEFAULT_CONFIG: dict = {
    "output_dir": "out",
    "lexicon": None,  # path; null means the packaged default lexicon
    "triggers": None,  # path; null means the packaged default trigger rules
    "scope_window": 5,
    "window_days": 30,
    "min_count": 2,
    "k_features": 20,
    "generator": {
        "seed": 7,
        "cohort_sizes": {"Ward": 1832, "PlannedITU": 349, "UnplannedITU": 87},
        "notes_per_patient": [2, 6],
        "negated_rate": 0.30,
        "family_rate": 0.15,
        "suspected_rate": 0.15,
        "unruled_rate": 0.0,
        "out_of_window_patient_rate": 0.015,
        "straggler_note_rate": 0.05,
        "male_fraction": 0.49,
        "white_fraction": 0.60,
    },
    "split": {"seed": 0, "planned_test": 135, "ward_test": None},
    "forest": {
        "n_trees": 300,
        "max_depth": None,
        "min_samples_split": 2,
        "min_samples_leaf": 1,
        "features_per_split": None,
        "seed": 0,
        "n_runs": 5,
    },
    "lstm": {
        "epochs": 15,
        "hidden_size": 128,
        "batch_size": 4,
        "dropout": 0.5,
        "learning_rate": 1e-3,
        "seed": 0,
        "n_runs": 5,
        "precision": "standard",
    },
    "eval": {"resamples": 1000, "seed": 0, "n_bins": 10},
    "explain": {
        "n_samples": 12,
        "n_permutations": 200,
        "background_cap": 60,
        "lime_perturbations": 2000,
        "seed": 0,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in merged:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _merge(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file, then `--set key.path=value` overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                loaded = json.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        config = _merge(config, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings need no quotes
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def lineage(config: dict) -> str:
    return f"config_hash={config_hash(config)} seed={config['generator']['seed']}"
