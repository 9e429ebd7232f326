from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

DEFAULT_CONFIG: dict[str, Any] = {
    "generator": {
        "image_w": 256,
        "image_h": 256,
        "grid_h": 16,
        "grid_w": 16,
        "d": 32,
        "categories": 10,
        "ground_count": [5, 15],
        "ground_side": [24.0, 64.0],
        "ground_spread": 32.0,
        "aerial_count": [20, 60],
        "aerial_side": [6.0, 20.0],
        "consistency": 0.8,
        "noise_std": 0.05,
        "max_location_categories": 4,
        "embedding_seed": 0,
        "geometry_jitter": 0.1,
    },
    "splits": {"train": 400, "val": 50, "test": 150, "seed": 0},
    "cpa": {"variant": "full", "hidden": None, "d_align": None, "region_h": 2, "region_w": 2},
    "train": {
        "mode": "both",
        "epochs": 10,
        "batch_size": 8,
        "lr": 1e-3,
        "weight_decay": 0.01,
        "warmup_steps": 50,
        "lr_schedule": "cosine",
        "t1": 1.0 / 3.0,
        "t2": 2.0 / 3.0,
        "lambda_align": 0.1,
        "lambda_ent": 0.01,
        "lambda_bal": 0.01,
        "seed": 42,
        "scored": False,
        "select_on": "aerial",
    },
    "eval": {"small_area": 1024.0, "medium_area": 9216.0, "nms_iou": 0.5},
}

# Keys whose default is None accept an int or null.
OPTIONAL_INT_KEYS = {("cpa", "hidden"), ("cpa", "d_align")}


def _check_value(path: tuple[str, ...], default: Any, value: Any) -> Any:
    dotted = ".".join(path)
    if path in OPTIONAL_INT_KEYS:
        if value is None or (isinstance(value, int) and not isinstance(value, bool) and value > 0):
            return value
        raise ValueError(f"{dotted} must be a positive integer or null, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{dotted} must be true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{dotted} must be a number, got {value!r}")
        if isinstance(default, int) and not isinstance(value, int):
            raise ValueError(f"{dotted} must be an integer, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ValueError(f"{dotted} must be a list of {len(default)} numbers, got {value!r}")
        return [_check_value(path, d, v) for d, v in zip(default, value)]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{dotted} must be a string, got {value!r}")
        return value
    return value


def merge_config(base: dict[str, Any], override: dict[str, Any], path: tuple[str, ...] = ()) -> dict[str, Any]:
    """Deep-merge override over base; keys unknown to base are rejected."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        here = (*path, str(key))
        if key not in base:
            raise ValueError(f"unknown config key: {'.'.join(here)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config section {'.'.join(here)} must be an object")
            merged[key] = merge_config(base[key], value, here)
        else:
            merged[key] = _check_value(here, base[key], value)
    return merged


def load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    with path.open("r", encoding="utf-8") as f:
        raw = json.load(f)

    if not isinstance(raw, dict):
        raise ValueError("Config JSON must be an object.")
    return merge_config(DEFAULT_CONFIG, raw)


def apply_overrides(config: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Apply dotted-key overrides (e.g. {"train.seed": 7}); None values are skipped."""
    nested: dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        nested.setdefault(section, {})[key] = value
    return merge_config(config, nested)


def write_json_atomic(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
