"""Run configuration: JSON schema, defaults and precedence.

Precedence, highest first: command-line flags, config file, built-in
defaults. ``MEMSIM_SEED`` is consulted only when neither flags nor the file
set a seed.
"""
from __future__ import annotations

import copy
import json
import os

import jsonschema

from .crossbar import CrossbarConfig
from .device import DeviceModel
from .dpe import EngineConfig
from .slicing import parse_scheme

SCHEMA_VERSION = 1

_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_str = {"type": "string"}
_bool = {"type": "boolean"}
_opt_str = {"type": ["string", "null"]}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _obj({
    "version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0},
    "threads": _posint,
    "emit": {"type": "array", "items": {"enum": ["plot-data"]}},
    "device": _obj({
        "hgs": _pos, "lgs": _pos,
        "g_levels": {"type": "integer", "minimum": 2},
        "cv": {"type": "number", "minimum": 0},
    }),
    "crossbar": _obj({
        "rows": _posint, "cols": _posint,
        "r_wire": {"type": "number", "minimum": 0},
        "v_read": _pos,
        "rdac": {"type": "integer", "minimum": 2},
        "radc": {"type": "integer", "minimum": 2},
        "adc_range_mode": {"enum": ["worst_case", "dynamic"]},
    }),
    "engine": _obj({
        "weight_scheme": _str, "input_scheme": _str,
        "noise_mode": {"enum": ["ideal", "variation_only", "variation_plus_irdrop"]},
    }),
    "xbar": _obj({"mode": {"enum": ["irdrop", "kcl", "ideal"]}, "tol": _pos, "max_iter": _posint,
                  "batch": _posint}),
    "matmul": _obj({"m": _posint, "k": _posint, "n": _posint, "cycle": {"type": "integer", "minimum": 0},
                    "a": _opt_str, "b": _opt_str}),
    "mc": _obj({
        "cycles": _posint,
        "size": {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3},
        "grid": _obj({
            "cv": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            "block": {"type": "array", "items": _posint, "minItems": 1},
            "scheme": {"type": "array", "items": _str, "minItems": 1},
            "noise_mode": {"type": "array", "minItems": 1,
                           "items": {"enum": ["ideal", "variation_only", "variation_plus_irdrop"]}},
        }),
    }),
    "solve": _obj({"nodes": {"type": "integer", "minimum": 2}, "rwire": _pos, "g_min": _pos, "g_max": _pos,
                   "v_drive": _pos, "tol": _pos, "max_iter": _posint, "block": _posint, "scheme": _str}),
    "cwt": _obj({"signal": _opt_str, "scales": _str, "mode": {"enum": ["same", "valid"]},
                 "kernel_scheme": _str, "length": {"type": ["integer", "null"], "minimum": 1}}),
    "kmeans": _obj({"input": _opt_str, "k": _posint, "max_iter": _posint, "n_tail": _posint,
                    "single_center": _bool}),
    "train": _obj({"data": _opt_str, "epochs": _posint, "batch_size": _posint, "lr": _pos,
                   "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                   "layer_config": _opt_str, "n_train": {"type": ["integer", "null"], "minimum": 1},
                   "n_test": {"type": ["integer", "null"], "minimum": 1}}),
    "infer": _obj({"data": _opt_str, "checkpoint": _opt_str, "layer_config": _opt_str,
                   "n_test": {"type": ["integer", "null"], "minimum": 1},
                   "sweep": {"type": ["string", "null"]}}),
})

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "threads": 1,
    "emit": [],
    "device": DeviceModel().to_dict(),
    "crossbar": CrossbarConfig().to_dict(),
    "engine": {"weight_scheme": "int8:1,1,2,4", "input_scheme": "int8:1,1,2,4", "noise_mode": "variation_only"},
    "xbar": {"mode": "irdrop", "tol": 1e-6, "max_iter": 20, "batch": 1},
    "matmul": {"m": 128, "k": 128, "n": 128, "cycle": 0, "a": None, "b": None},
    "mc": {"cycles": 100, "size": [128, 128, 128], "grid": {}},
    "solve": {"nodes": 64, "rwire": 2.93, "g_min": 1e-7, "g_max": 1e-5, "v_drive": 0.2, "tol": 1e-3,
              "max_iter": 640, "block": 32, "scheme": "fp:32:1,4,4,4,4,4,4"},
    "cwt": {"signal": None, "scales": "2:32:24", "mode": "same", "kernel_scheme": "int4:1,1,2", "length": None},
    "kmeans": {"input": None, "k": 3, "max_iter": 100, "n_tail": 10, "single_center": False},
    "train": {"data": None, "epochs": 10, "batch_size": 32, "lr": 0.01, "momentum": 0.9,
              "layer_config": None, "n_train": None, "n_test": None},
    "infer": {"data": None, "checkpoint": None, "layer_config": None, "n_test": None, "sweep": None},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "grid":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.path) or "<root>"
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            prefix = where + "." if e.path else ""
            raise ConfigError(f"unknown key(s): {', '.join(prefix + x for x in extra)}")
        raise ConfigError(f"{where}: {e.message}")


def load_file(path) -> dict:
    """A config document, or a run manifest (its echoed config is used)."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "tool" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def resolve(flags: dict | None = None, file_doc: dict | None = None, env=None) -> dict:
    env = os.environ if env is None else env
    file_doc = file_doc or {}
    flags = flags or {}
    if file_doc:
        validate(file_doc)
    doc = merge(DEFAULTS, file_doc)
    if "seed" not in file_doc and "seed" not in flags and env.get("MEMSIM_SEED") not in (None, ""):
        try:
            doc["seed"] = int(env["MEMSIM_SEED"])
        except ValueError:
            raise ConfigError(f"MEMSIM_SEED: not an integer: {env['MEMSIM_SEED']!r}") from None
    doc = merge(doc, flags)
    validate(doc)
    check_semantics(doc)
    return doc


def check_semantics(doc: dict) -> None:
    """Checks that span several keys or need the domain constructors."""
    for key in ("weight_scheme", "input_scheme"):
        try:
            parse_scheme(doc["engine"][key])
        except ValueError as exc:
            raise ConfigError(f"engine.{key}: {exc}") from None
    try:
        engine_from(doc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for s in doc["mc"]["grid"].get("scheme", []):
        try:
            parse_scheme(s)
        except ValueError as exc:
            raise ConfigError(f"mc.grid.scheme: {exc}") from None
    if doc["solve"]["g_min"] > doc["solve"]["g_max"]:
        raise ConfigError("solve.g_min: must not exceed solve.g_max")


def engine_from(doc: dict, **overrides) -> EngineConfig:
    try:
        dev = DeviceModel(**doc["device"])
    except ValueError as exc:
        raise ConfigError(f"device: {exc}") from None
    try:
        xcfg = CrossbarConfig(**doc["crossbar"])
    except ValueError as exc:
        raise ConfigError(f"crossbar: {exc}") from None
    kw = dict(device=dev, crossbar=xcfg, weight_scheme=doc["engine"]["weight_scheme"],
              input_scheme=doc["engine"]["input_scheme"], noise_mode=doc["engine"]["noise_mode"],
              seed=doc["seed"], threads=doc["threads"])
    kw.update(overrides)
    try:
        return EngineConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"engine: {exc}") from None
