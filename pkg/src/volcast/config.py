"""JSON config files: schemas, presets and loading with flag overrides.

Precedence is flag > file > dataclass default.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import jsonschema

from volcast.synth import SynthConfig
from volcast.trainer import LOSS_KINDS, TrainConfig
from volcast.unet.model import HEADS, ModelConfig, main_config

_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_TRIPLE = {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["context", "horizon"],
    "properties": {
        "context": _POS,
        "horizon": _POS,
        "features": _POS,
        "superres_features": _POS,
        "groups": _POS,
        "stages": {"type": "array", "items": _TRIPLE},
        "blocks_low": {"type": "integer", "minimum": 0},
        "blocks_other": _POS,
        "superres_stages": {"type": "array", "items": _TRIPLE},
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "embed_dim": _POS,
        "input_downsample": _TRIPLE,
        "head": {"enum": list(HEADS)},
        "n_bins": {"type": "integer", "minimum": 2},
        "norm": {"enum": ["group", "frozen"]},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "context": _POS,
        "horizon": _POS,
        "steps": {"type": "integer", "minimum": 0},
        "lr_init": {"type": "number", "exclusiveMinimum": 0},
        "lr_final": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": {"const": 1},
        "seed": _INT,
        "loss_kind": {"enum": list(LOSS_KINDS)},
        "val_every": _POS,
        "val_starts": _POS,
        "beta1": _NUM,
        "beta2": _NUM,
        "eps": _NUM,
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "dropout_min_context": _POS,
    },
}

SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dims": {"type": "array", "items": _POS, "minItems": 4, "maxItems": 4},
        "n_cells": _POS,
        "radius": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "z_radius": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "z_scale": {"type": "number", "exclusiveMinimum": 0},
        "coupling_density": {"type": "number", "minimum": 0, "maximum": 1},
        "coupling_scale": {"type": "number", "minimum": 0},
        "coupling_kind": {"enum": ["wave", "random"]},
        "coupling_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "self_weight": _NUM,
        "voxel_noise": {"type": "number", "minimum": 0},
        "trace_noise": {"type": "number", "minimum": 0},
        "texture": {"enum": ["uniform", "radial"]},
        "falloff": {"type": "number", "minimum": 0, "maximum": 1},
        "burn_in": {"type": "integer", "minimum": 0},
        "n_conditions": _POS,
        "split_fractions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                            "minItems": 3, "maxItems": 3},
        "seed": _INT,
    },
}


def _rf_preset(stages, **kw) -> dict:
    return {"context": 4, "horizon": 32, "stages": stages, "blocks_low": 4, **kw}


# receptive-field study configs: no downsampling, cumulative (4,4,2) and (16,16,8)
PRESETS = {
    "rf21": _rf_preset([]),
    "rf64": _rf_preset([[2, 2, 1], [2, 2, 2]]),
    "rf256": _rf_preset([[2, 2, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2]]),
    "main": main_config().to_dict(),
}


class ConfigFileError(ValueError):
    pass


def read_json(path: str | os.PathLike) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: expected a JSON object")
    return data


def validate(data: dict, schema: dict, what: str) -> dict:
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigFileError(f"{what} config invalid at {where}: {exc.message}") from exc
    return data


def _merge(base: dict, overrides: dict | None) -> dict:
    out = dict(base)
    out.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return out


def load_model_config(ref: str | os.PathLike | None, overrides: dict | None = None) -> ModelConfig:
    """``ref`` is a JSON file or a preset name (rf21, rf64, rf256, main)."""
    if ref is None:
        data = {}
    elif str(ref) in PRESETS and not Path(ref).exists():
        data = dict(PRESETS[str(ref)])
    else:
        data = read_json(ref)
    data = validate(_merge(data, overrides), MODEL_SCHEMA, "model")
    return ModelConfig.from_dict(data)


def load_train_config(path: str | os.PathLike | None, model_cfg: ModelConfig,
                      overrides: dict | None = None) -> TrainConfig:
    data = read_json(path) if path else {}
    data = _merge({"context": model_cfg.context, "horizon": model_cfg.horizon}, data)
    data = validate(_merge(data, overrides), TRAIN_SCHEMA, "train")
    return TrainConfig.from_dict(data)


def load_synth_config(path: str | os.PathLike | None, overrides: dict | None = None) -> SynthConfig:
    data = read_json(path) if path else {}
    data = validate(_merge(data, overrides), SYNTH_SCHEMA, "synth")
    return SynthConfig.from_dict(data)
