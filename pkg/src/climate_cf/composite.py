"""First-principal-component indices (asset index, adaptive capacity) on a 0-100 scale."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .panel import PanelDataset

# leading eigenvalues closer than this (relative) are treated as tied
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class IndexModel:
    items: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    loadings: np.ndarray
    min: float
    max: float
    eigenvalue: float = float("nan")

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = (X - self.means) / self.sds
        return np.sum(z * self.loadings, axis=1)

    def to_dict(self) -> dict:
        return {
            "items": list(self.items),
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "loadings": self.loadings.tolist(),
            "min": self.min,
            "max": self.max,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "IndexModel":
        return cls(tuple(d["items"]), np.asarray(d["means"], float), np.asarray(d["sds"], float),
                   np.asarray(d["loadings"], float), float(d["min"]), float(d["max"]))


def _leading_vector(corr: np.ndarray, items: Sequence[str]) -> tuple[np.ndarray, float]:
    vals, vecs = np.linalg.eigh(corr)
    top = vals[-1]
    tied = np.abs(vals - top) <= _TIE_TOL * max(abs(top), 1.0)
    basis = vecs[:, tied]
    # inside a tied eigenspace pick the unit vector with the largest loading
    # on the lexicographically first item, falling back to later items
    v = None
    for j in np.argsort(np.array(items, dtype=object), kind="stable"):
        proj = basis @ basis[j]
        if np.linalg.norm(proj) > 1e-12:
            v = proj / np.linalg.norm(proj)
            break
    if v is None:
        v = basis[:, 0]
    total = v.sum()
    if abs(total) <= _TIE_TOL * np.sqrt(v.shape[0]):
        # loadings sum to zero up to rounding: the first item by name sets the sign
        for j in np.argsort(np.array(items, dtype=object), kind="stable"):
            if abs(v[j]) > 1e-12:
                total = v[j]
                break
    if total < 0:
        v = -v
    return v, float(top)


def fit_index(ds: PanelDataset | Mapping[str, np.ndarray], items: Sequence[str]) -> IndexModel:
    """Standardize items, take the leading eigenvector of their correlation
    matrix, and record the raw-score range for 0-100 rescaling."""
    items = tuple(items)
    if len(items) < 2:
        raise DataError("an index needs at least two items")
    frame = ds.frame if isinstance(ds, PanelDataset) else ds
    cols = []
    for it in items:
        if it not in frame:
            raise DataError(f"unknown index item {it!r}")
        v = np.asarray(frame[it], dtype=float)
        if np.any(~np.isfinite(v)):
            raise DataError(f"index item {it!r} has missing values")
        cols.append(v)
    X = np.column_stack(cols)
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1)
    zero = [it for it, s in zip(items, sds) if not s > 0]
    if zero:
        raise DataError(f"index items with zero variance: {zero}")
    corr = np.corrcoef(X, rowvar=False)
    loadings, eig = _leading_vector(corr, items)
    model = IndexModel(items, means, sds, loadings, 0.0, 1.0, eig)
    raw = model.raw_scores(X)
    lo, hi = float(raw.min()), float(raw.max())
    if not lo < hi:
        raise DataError("index raw scores are constant; cannot rescale")
    return IndexModel(items, means, sds, loadings, lo, hi, eig)


def score_index(model: IndexModel, rows) -> np.ndarray:
    """0-100 scores; rows outside the fitted range are clamped."""
    if hasattr(rows, "columns") or isinstance(rows, Mapping):
        missing = [it for it in model.items if it not in rows]
        if missing:
            raise DataError(f"missing index items: {missing}")
        X = np.column_stack([np.asarray(rows[it], dtype=float) for it in model.items])
    else:
        X = np.atleast_2d(np.asarray(rows, dtype=float))
        if X.shape[1] != len(model.items):
            raise DataError(f"expected {len(model.items)} item values, got {X.shape[1]}")
    if np.any(~np.isfinite(X)):
        raise DataError("missing item values")
    raw = model.raw_scores(X)
    return np.clip(100.0 * (raw - model.min) / (model.max - model.min), 0.0, 100.0)
