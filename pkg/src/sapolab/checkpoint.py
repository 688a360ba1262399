"""Parameter checkpoints: a JSON header followed by little-endian float64 data.

Layout::

    b"SAPOCKPT"                 magic
    uint64 (little-endian)      header length in bytes
    header                      UTF-8 JSON
    float64[dim] (little-endian)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import ParseError
from .policy import FeatureSpec, PolicyParams
from .value import ValueParams

MAGIC = b"SAPOCKPT"


def _header(params) -> dict:
    fs = params.feature_spec
    head = {
        "kind": "policy" if isinstance(params, PolicyParams) else "value",
        "feature_spec": {"window": fs.window, "n_features": fs.n_features},
        "dimensions": [int(params.weights.size)],
    }
    if isinstance(params, PolicyParams):
        head["vocab_size"] = int(params.vocab_size)
    else:
        head["horizon"] = int(params.horizon)
    return head


def save_params(params, path) -> None:
    head = json.dumps(_header(params), sort_keys=True).encode()
    data = np.ascontiguousarray(params.weights, dtype="<f8").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + data)


def load_params(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ParseError("not a parameter checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        head = json.loads(raw[16 : 16 + n])
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt header: {exc}") from None
    weights = np.frombuffer(raw[16 + n :], dtype="<f8").astype(float)
    if weights.size != head["dimensions"][0]:
        raise ParseError("payload size does not match header dimensions", key="dimensions")
    fs = FeatureSpec(**head["feature_spec"])
    if head["kind"] == "policy":
        return PolicyParams(weights, head["vocab_size"], fs)
    return ValueParams(weights, fs, head["horizon"])
