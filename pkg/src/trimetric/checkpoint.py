"""``trimetric-v1`` checkpoints: one JSON document, arrays as base64 little-endian float64."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nn import ArchitectureConfig, NetworkParams

FORMAT_TAG = "trimetric-v1"


def _encode(arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "dtype": "<f8", "data": base64.b64encode(raw).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    if entry.get("dtype") != "<f8":
        raise ConfigError(f"unsupported array dtype {entry.get('dtype')!r}")
    arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
    return arr.reshape(entry["shape"]).astype(np.float64)


def to_document(params: NetworkParams, iteration: int = 0, extra: dict | None = None) -> dict:
    doc = {
        "format": FORMAT_TAG,
        "architecture": params.config.to_dict(),
        "iteration": int(iteration),
        "params": {name: _encode(arr) for name, arr in params.items()},
    }
    if extra:
        doc["extra"] = extra
    return doc


def from_document(doc: dict) -> tuple[NetworkParams, int]:
    if doc.get("format") != FORMAT_TAG:
        raise ConfigError(f"not a {FORMAT_TAG} checkpoint (format={doc.get('format')!r})")
    cfg = ArchitectureConfig.from_dict(doc["architecture"])
    arrays = {name: _decode(entry) for name, entry in doc["params"].items()}
    return NetworkParams(cfg, **arrays), int(doc.get("iteration", 0))


def save(path, params: NetworkParams, iteration: int = 0, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(to_document(params, iteration, extra)))


def load(path) -> tuple[NetworkParams, int]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_document(doc)
