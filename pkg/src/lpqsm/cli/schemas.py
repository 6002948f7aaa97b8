"""JSON schemas for every CLI config file, and a loader with readable diagnostics."""
from __future__ import annotations

import json
import os

import jsonschema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_DIMS = {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 3, "maxItems": 3}
_VOXEL = {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3}
_RANGE = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_OPT_POS = {"anyOf": [_POS, {"type": "null"}]}

ORIENTATION = {
    "type": "object",
    "properties": {
        "h": _VEC3,
        "rotation": {"type": "array", "items": _VEC3, "minItems": 3, "maxItems": 3},
        "tilt_deg": _NUM,
        "axis": {"enum": ["x", "y", "z"]},
        "label": {"type": "string"},
    },
    "anyOf": [{"required": ["h"]}, {"required": ["rotation"]}, {"required": ["tilt_deg"]}],
    "additionalProperties": False,
}

_SPHERE = {
    "type": "object",
    "properties": {
        "type": {"const": "sphere"},
        "center": _VEC3, "radius": _POS, "delta_chi": _NUM,
    },
    "required": ["type", "center", "radius", "delta_chi"],
    "additionalProperties": False,
}

_CYLINDER = {
    "type": "object",
    "properties": {
        "type": {"const": "cylinder"},
        "point": _VEC3, "axis": _VEC3, "radius": _POS, "delta_chi": _NUM, "length": _OPT_POS,
    },
    "required": ["type", "point", "axis", "radius", "delta_chi"],
    "additionalProperties": False,
}

PHANTOM = {
    "type": "object",
    "properties": {
        "dims": _DIMS,
        "voxel_size": _VOXEL,
        "preset": {"enum": ["standard"]},
        "shapes": {"type": "array", "items": {"oneOf": [_SPHERE, _CYLINDER]}},
        "background_chi": _NUM,
        "smooth_sigma": _OPT_POS,
    },
    "required": ["dims"],
    "not": {"required": ["preset", "shapes"]},
    "additionalProperties": False,
}

ACQUISITION = {
    "type": "object",
    "properties": {
        "orientations": {"type": "array", "items": ORIENTATION, "minItems": 1},
        # no hidden default for the noise level
        "noise_sigma": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "mask_fraction": _OPT_POS,
    },
    "required": ["orientations", "noise_sigma"],
    "additionalProperties": False,
}

RECONSTRUCT = {
    "type": "object",
    "properties": {
        "threshold": _POS,
        "alpha": _POS,
        "iterations": {"type": "integer", "minimum": 1},
        "tau": _POS,
    },
    "additionalProperties": False,
}

_ARCH = {
    "type": "object",
    "properties": {
        "blocks": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "kernel": {"type": "integer", "minimum": 1},
        "activation": {"type": "string"},
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
    "additionalProperties": False,
}

_GENERATOR = {
    "type": "object",
    "properties": {
        "dims": _DIMS,
        "voxel_size": _VOXEL,
        "n_pairs": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "noise_sigma": {"type": "number", "minimum": 0},
        "max_tilt_deg": {"type": "number", "minimum": 0, "maximum": 90},
        "n_orientations": {"type": "integer", "minimum": 1},
        "n_shapes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "radius_mm": _RANGE,
        "chi_range": _RANGE,
        "cylinder_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "smooth_sigma": _OPT_POS,
    },
    "required": ["dims", "n_pairs", "seed", "noise_sigma"],
    "additionalProperties": False,
}

TRAIN = {
    "type": "object",
    "properties": {
        "unroll_k": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "lr_decay_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "lr_decay_every": {"type": "integer", "minimum": 1},
        "patch_dims": {"anyOf": [_DIMS, {"type": "null"}]},
        "seed": {"type": "integer", "minimum": 0},
        "alpha": _POS,
        "shared_across_iterations": {"type": "boolean"},
        "arch": _ARCH,
        "generator": _GENERATOR,
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _where(path) -> str:
    out = "$"
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate(obj, schema, name: str = "<config>"):
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(obj),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = [f"  at {_where(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError(f"{name}: invalid config\n" + "\n".join(lines))
    return obj


def load_json(path, schema):
    name = os.fspath(path)
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return validate(obj, schema, name)
