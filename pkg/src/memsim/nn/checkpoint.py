"""Checkpoints (JSON manifest + little-endian float64 blobs) and layer-config files."""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from ..dpe import EngineConfig
from .layers import LENET_LAYERS, MemLayerConfig, Module

FORMAT = "memsim-checkpoint"
VERSION = 1


def save_checkpoint(model: Module, directory, extra: dict | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = name + ".bin"
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(blob)
        entries.append({"name": name, "shape": list(p.shape), "dtype": "<f8", "file": fname,
                        "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {"format": FORMAT, "version": VERSION, "params": entries, "extra": extra or {}}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_checkpoint(model: Module, directory) -> dict:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{directory}: not a {FORMAT} manifest")
    params = dict(model.named_parameters())
    names = {e["name"] for e in manifest["params"]}
    if names != set(params):
        raise ValueError(f"checkpoint parameters {sorted(names)} do not match model {sorted(params)}")
    for e in manifest["params"]:
        with open(os.path.join(directory, e["file"]), "rb") as fh:
            blob = fh.read()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise ValueError(f"checksum mismatch for {e['file']}")
        arr = np.frombuffer(blob, dtype="<f8").astype(np.float64)
        p = params[e["name"]]
        if arr.size != int(np.prod(e["shape"])) or tuple(e["shape"]) != p.shape:
            raise ValueError(f"{e['name']}: shape {e['shape']} does not match model {list(p.shape)}")
        p.data = arr.reshape(p.shape)
        p.grad = None
    return manifest


LAYER_KEYS = {"mode", "input_scheme", "weight_scheme"}


def layer_configs(spec: dict, engine: EngineConfig, layers=LENET_LAYERS) -> dict[str, MemLayerConfig]:
    """Build per-layer configs from ``{"default": {...}, "layers": {name: {...}}}``.

    Each entry may set ``mode`` (hardware|digital), ``input_scheme`` and
    ``weight_scheme``; layer entries override the default entry.
    """
    unknown = set(spec) - {"default", "layers"}
    if unknown:
        raise ValueError(f"unknown layer-config key(s): {sorted(unknown)}")
    default = spec.get("default", {})
    per = spec.get("layers", {})
    for where, d in [("default", default)] + [(f"layers.{k}", v) for k, v in per.items()]:
        bad = set(d) - LAYER_KEYS
        if bad:
            raise ValueError(f"unknown key(s) in {where}: {sorted(bad)}")
    bad_layers = set(per) - set(layers)
    if bad_layers:
        raise ValueError(f"unknown layer name(s): {sorted(bad_layers)}; expected {list(layers)}")
    out = {}
    for name in layers:
        d = {**default, **per.get(name, {})}
        mode = d.get("mode", "hardware")
        out[name] = MemLayerConfig(engine if mode == "hardware" else None,
                                   d.get("input_scheme"), d.get("weight_scheme"), mode)
    return out


def read_layer_config(path, engine: EngineConfig, layers=LENET_LAYERS) -> dict[str, MemLayerConfig]:
    with open(path) as fh:
        return layer_configs(json.load(fh), engine, layers)
