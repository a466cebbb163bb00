"""Versioned parameter checkpoints.

Text format: a magic first line followed by one JSON document mapping
parameter names to shape+values. Floats are written with shortest
round-trip repr, so save/load is bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "CDA-CKPT-1"


class CheckpointError(ValueError):
    pass


def save(path, arrays: dict, extra: dict | None = None) -> None:
    payload = {
        "arrays": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        fh.write(MAGIC + "\n")
        json.dump(payload, fh)


def load(path):
    """Returns (arrays dict, extra dict); rejects unknown versions."""
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != MAGIC:
            raise CheckpointError(f"{MAGIC} expected, file leads with {first!r}")
        payload = json.load(fh)
    arrays = {
        name: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        for name, rec in payload["arrays"].items()
    }
    return arrays, payload.get("extra", {})
