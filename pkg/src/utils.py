import json
import logging
import os
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

CHECKED_ENV = "ECGMAMBA_CHECKED"


def checked_mode() -> bool:
    """True when ECGMAMBA_CHECKED=1 (finite-value and shape assertions on)."""
    return os.getenv(CHECKED_ENV, "0") == "1"


def load_config(path: str, overrides: dict = None):
    """
    Load and validate a run config, set up logging, and return a RunConfig.

    Example:
        config = load_config("config.json", {"train.epochs": 1})
    """
    from src.config import RunConfig, setup_logging

    config = RunConfig.from_json(path, overrides)
    setup_logging(config.log_level, config.log_file)
    logger.info(f"[UTILS] Loaded configuration from {path}")
    return config


def canonical_json(obj: Any) -> str:
    """Sorted keys, fixed separators, numpy scalars converted."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=_json_default)


def write_canonical_json(path: str, obj: Any):
    ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))
        f.write("\n")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def parse_int_list(text: str) -> list:
    """'256,512,1024' -> [256, 512, 1024]"""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"expected a comma-separated list of integers, got '{text}'")
