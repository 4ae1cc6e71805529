"""Pipeline configuration: one versioned JSON document drives every stage."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .schema import SchemaError, validate

CONFIG_VERSION = 1
LEVELS = [100, 200, 500, 1000, 5000, 10000]

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "cohort": {"size": 500, "spacing_mm": [10.0, 10.0, 10.0]},
    "surface": {"close_radius": 2, "isolevel": 0.5, "decimations": LEVELS,
                "preserve_volume": True},
    "register": {"max_iters": 50, "tol_mm": 1e-6},
    "train": {"models": ["gnn", "cnn"], "decimation": 500, "folds": 5, "epochs": 150,
              "cnn_epochs": 20, "batch_size": 16, "lr": 1e-3, "hidden": 64, "shrink_a": 10.0,
              "shrink_c": 0.2, "bn_momentum": 0.1, "channels": [16, 32, 64],
              "lr_schedule": "constant"},
    "sweep": {"cohort_size": 200, "decimations": LEVELS, "epochs": 3, "folds_timed": [0]},
    "stats": {"bins": 20},
    "paths": {"workdir": "run"},
    "device_wattage": 65.0,
}

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_levels = {"type": "array", "items": {"type": "integer", "minimum": 20}, "minItems": 1,
           "uniqueItems": True}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "cohort": {"type": "object", "additionalProperties": False, "properties": {
            "size": {"type": "integer", "minimum": 10},
            "spacing_mm": {"type": "array", "items": _pos_num, "minItems": 3, "maxItems": 3},
        }},
        "surface": {"type": "object", "additionalProperties": False, "properties": {
            "close_radius": {"type": "integer", "minimum": 0},
            "isolevel": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "decimations": _levels,
            "preserve_volume": {"type": "boolean"},
        }},
        "register": {"type": "object", "additionalProperties": False, "properties": {
            "max_iters": _pos_int,
            "tol_mm": _pos_num,
        }},
        "train": {"type": "object", "additionalProperties": False, "properties": {
            "models": {"type": "array", "items": {"enum": ["gnn", "cnn"]}, "minItems": 1,
                       "uniqueItems": True},
            "decimation": {"type": "integer", "minimum": 20},
            "folds": {"type": "integer", "minimum": 3},
            "epochs": _pos_int,
            "cnn_epochs": _pos_int,
            "batch_size": {"type": "integer", "minimum": 2},
            "lr": _pos_num,
            "hidden": {"type": "integer", "minimum": 2},
            "shrink_a": _pos_num,
            "shrink_c": {"type": "number", "minimum": 0},
            "bn_momentum": {"type": "number", "minimum": 0, "maximum": 1},
            "channels": {"type": "array", "items": _pos_int, "minItems": 1},
            "lr_schedule": {"enum": ["constant", "cosine"]},
        }},
        "sweep": {"type": "object", "additionalProperties": False, "properties": {
            "cohort_size": {"type": "integer", "minimum": 10},
            "decimations": _levels,
            "epochs": _pos_int,
            "folds_timed": {"type": "array", "items": {"type": "integer", "minimum": 0},
                            "minItems": 1, "uniqueItems": True},
        }},
        "stats": {"type": "object", "additionalProperties": False, "properties": {
            "bins": _pos_int,
        }},
        "paths": {"type": "object", "additionalProperties": False, "properties": {
            "workdir": {"type": "string", "minLength": 1},
        }},
        "device_wattage": _pos_num,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve(raw: dict, source: str = "config", base_dir: Path | None = None) -> dict:
    """Validate ``raw`` and fill in defaults; ``paths.workdir`` becomes absolute."""
    validate(raw, SCHEMA, source)
    cfg = _merge(DEFAULTS, raw)
    for section in ("surface", "sweep"):
        levels = cfg[section]["decimations"]
        if levels != sorted(levels):
            raise SchemaError(source, f"$.{section}.decimations", "levels must be sorted ascending")
    if cfg["train"]["decimation"] not in cfg["surface"]["decimations"]:
        raise SchemaError(source, "$.train.decimation",
                          "must be one of surface.decimations")
    missing = [l for l in cfg["sweep"]["decimations"] if l not in cfg["surface"]["decimations"]]
    if missing:
        raise SchemaError(source, "$.sweep.decimations",
                          f"levels {missing} are not produced by surface.decimations")
    if max(cfg["sweep"]["folds_timed"]) >= cfg["train"]["folds"]:
        raise SchemaError(source, "$.sweep.folds_timed", "fold index exceeds train.folds")
    workdir = Path(cfg["paths"]["workdir"])
    if not workdir.is_absolute():
        workdir = (base_dir or Path.cwd()) / workdir
    cfg["paths"]["workdir"] = str(workdir.resolve())
    return cfg


def load_config(path) -> dict:
    """Read, validate and resolve a config file.

    Syntax errors report the line and column; schema errors the field path.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SchemaError(str(path), "$", f"cannot read config: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(str(path), "$", f"invalid JSON at line {e.lineno}, column {e.colno}: "
                                          f"{e.msg}") from None
    return resolve(raw, str(path), path.parent)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)
