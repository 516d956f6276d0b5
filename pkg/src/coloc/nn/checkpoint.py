"""Text checkpoints for parameter sets.

Format: JSON with a version tag and, per parameter, its shape and
row-major values. Floats are serialized with repr (shortest round-trip,
at most 17 significant digits), so text save/load is bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .params import ParamSet

FORMAT = "coloc-params"
VERSION = 1


def params_to_obj(params: ParamSet) -> dict:
    entries = {}
    for name, t in params.items():
        entries[name] = {
            "shape": list(t.data.shape),
            "data": t.data.reshape(-1).tolist(),
        }
    return {"format": FORMAT, "version": VERSION, "params": entries}


def params_from_obj(obj: dict) -> dict[str, np.ndarray]:
    if obj.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} checkpoint")
    if obj.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    values = {}
    for name, entry in obj["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        values[name] = arr
    return values


def atomic_write_text(path, text: str):
    """Write via temp file + rename so interrupted runs leave no partial file."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_params(path, params: ParamSet):
    atomic_write_text(path, json.dumps(params_to_obj(params)))


def load_params(path, into: ParamSet) -> ParamSet:
    with open(path) as f:
        obj = json.load(f)
    into.load_values(params_from_obj(obj))
    return into
