"""JSON checkpoints for ``NetParams``.

Floats are written with ``repr`` (shortest round-tripping decimal), so a
save/load cycle reproduces every weight bit-for-bit. Writes go to a
temporary file in the target directory and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .cinet import NetParams
from .errors import ConfigError

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def params_to_dict(params: NetParams, cfg_hash: str = "", seed: dict | None = None) -> dict:
    layers = []
    for block, group in (("phi", params.phi), ("h", params.h)):
        for i, (W, b) in enumerate(group):
            layers.append({
                "block": block,
                "index": i,
                "shape": list(W.shape),
                "weights": W.ravel().tolist(),
                "bias": b.tolist(),
            })
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "seed": seed or {},
        "kind": params.kind,
        "n_features": params.n_features,
        "activation": params.activation,
        "layers": layers,
    }


def params_from_dict(doc: dict) -> NetParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    groups: dict[str, list] = {"phi": [], "h": []}
    for layer in doc["layers"]:
        W = np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"])
        b = np.array(layer["bias"], dtype=np.float64)
        if b.shape != (W.shape[1],):
            raise ConfigError(f"bias shape {b.shape} does not match weights {W.shape}")
        groups[layer["block"]].append((W, b))
    return NetParams(doc["kind"], int(doc["n_features"]), tuple(groups["phi"]),
                     tuple(groups["h"]), doc.get("activation", "relu"))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: NetParams, cfg_hash: str = "", seed: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(params_to_dict(params, cfg_hash, seed), indent=1) + "\n")


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> tuple[NetParams, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if expected_hash is not None and doc.get("config_hash") != expected_hash and not force:
        raise ConfigError(f"checkpoint {path} was written for config {doc.get('config_hash')}, "
                          f"expected {expected_hash} (pass force=True to load anyway)")
    return params_from_dict(doc), doc
