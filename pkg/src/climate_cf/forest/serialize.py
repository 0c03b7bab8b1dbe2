"""Forest persistence: one .npz archive holding node arrays, training data and a JSON header."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..io import atomic_write_bytes
from .core import Forest, ForestParams, Tree

FORMAT = "climate-cf-forest"
VERSION = 1

_NODE_FIELDS = ("feature", "threshold", "left", "right", "leaf_lo", "leaf_hi")
_ROW_FIELDS = ("est_order", "split_rows", "est_rows")


def _pack(forest: Forest) -> dict[str, np.ndarray]:
    arrays = {}
    for name in _NODE_FIELDS + _ROW_FIELDS:
        parts = [getattr(t, name) for t in forest.trees]
        arrays[name] = np.concatenate(parts)
        arrays[name + "_len"] = np.array([p.shape[0] for p in parts], dtype=np.int64)
    arrays["X"] = forest.X
    arrays["clusters"] = forest.clusters
    arrays["y"] = forest.y
    if forest.w is not None:
        arrays["w"] = forest.w
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": forest.kind,
        "params": forest.params.to_dict(),
        "feature_names": list(forest.feature_names),
        "schema_fingerprint": forest.fingerprint,
        "num_trees": len(forest.trees),
        "y_ref": forest.y_ref,
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    return arrays


def save_forest(forest: Forest, path) -> None:
    """Write the forest atomically; loading it back gives identical predictions."""
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **_pack(forest))
    atomic_write_bytes(path, buf.getvalue())


def load_forest(path) -> Forest:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read forest file {path}: {exc}") from exc
    with data:
        if "header" not in data:
            raise DataError(f"{path} is not a forest archive")
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != FORMAT or header.get("version") != VERSION:
            raise DataError(f"{path}: unsupported forest format {header.get('format')!r} "
                            f"version {header.get('version')!r}")
        split = {}
        for name in _NODE_FIELDS + _ROW_FIELDS:
            ends = np.cumsum(data[name + "_len"])
            split[name] = np.split(data[name], ends[:-1])
        trees = [Tree(*(split[name][b] for name in _NODE_FIELDS + _ROW_FIELDS))
                 for b in range(header["num_trees"])]
        forest = Forest(header["kind"], ForestParams(**header["params"]), trees,
                        tuple(header["feature_names"]), data["X"], data["clusters"], data["y"],
                        data["w"] if "w" in data else None, float(header.get("y_ref", 0.0)))
    if forest.fingerprint != header["schema_fingerprint"]:
        raise DataError(f"{path}: schema fingerprint mismatch")
    return forest
