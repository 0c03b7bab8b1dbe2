"""Honest regression and causal forests with cluster-level subsampling."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import DataError, EstimationError, EstimationWarning
from . import _kernels as K

REGRESSION = "regression"
CAUSAL = "causal"


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 2000
    sample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_node_size: int = 5
    # None picks the default for the forest kind; "all" tries every feature
    mtry: int | str | None = None
    seed: int = 0
    cluster_aware: bool = True
    ci_group_size: int = 2
    alpha: float = 0.05

    def validate(self) -> None:
        if self.num_trees < 1:
            raise EstimationError("num_trees must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise EstimationError("sample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise EstimationError("honesty_fraction must lie in (0, 1)")
        if self.min_node_size < 1:
            raise EstimationError("min_node_size must be >= 1")
        if isinstance(self.mtry, str):
            if self.mtry != "all":
                raise EstimationError(f"mtry must be a positive integer or 'all', got {self.mtry!r}")
        elif self.mtry is not None and self.mtry < 1:
            raise EstimationError("mtry must be >= 1")
        if not 0.0 <= self.alpha < 0.5:
            raise EstimationError("alpha must lie in [0, 0.5)")
        if self.ci_group_size < 1:
            raise EstimationError("ci_group_size must be >= 1")
        if self.ci_group_size > 1 and self.sample_fraction > 0.5:
            raise EstimationError(
                "sample_fraction must be <= 0.5 when trees are grouped for variance estimates"
            )

    def resolved_mtry(self, kind: str, p: int) -> int:
        if self.mtry == "all":
            return p
        if self.mtry is not None:
            if self.mtry > p:
                raise EstimationError(f"mtry={self.mtry} exceeds the {p} available features")
            return self.mtry
        if kind == REGRESSION:
            return max(1, math.ceil(math.sqrt(p)))
        return min(p, math.ceil(math.sqrt(p) + 20))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    """One honest tree.

    ``sample_rows`` is everything the tree drew; it is the disjoint union of
    ``split_rows`` (used to choose splits) and ``est_rows`` (used for leaf
    estimates). Leaf ``j`` owns ``est_order[leaf_lo[j]:leaf_hi[j]]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_lo: np.ndarray
    leaf_hi: np.ndarray
    est_order: np.ndarray
    split_rows: np.ndarray
    est_rows: np.ndarray

    @property
    def sample_rows(self) -> np.ndarray:
        return np.concatenate([self.split_rows, self.est_rows])

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def leaf_rows(self, node: int) -> np.ndarray:
        return self.est_order[self.leaf_lo[node]:self.leaf_hi[node]]


@dataclass
class Forest:
    kind: str
    params: ForestParams
    trees: list[Tree]
    feature_names: tuple[str, ...]
    X: np.ndarray
    clusters: np.ndarray
    y: np.ndarray
    w: np.ndarray | None = None
    # causal forests keep y relative to its first value; adding it back gives the data
    y_ref: float = 0.0
    _flat: dict | None = field(default=None, repr=False)

    @property
    def n_train(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.feature_names)

    def flat(self) -> dict:
        """Concatenated node arrays, per-node estimation moments and the in-bag matrix."""
        if self._flat is None:
            self._flat = _flatten(self)
        return self._flat


@dataclass
class EffectPrediction:
    tau: np.ndarray
    variance: np.ndarray
    # kernel-weighted moments at each query point, reused by the average-effect score
    mean_w: np.ndarray
    mean_y: np.ndarray
    mean_ww: np.ndarray
    trees_used: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.variance)


def schema_fingerprint(names: Sequence[str]) -> str:
    blob = json.dumps({"features": list(names)}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _as_matrix(X, feature_names=None) -> tuple[np.ndarray, tuple[str, ...]]:
    if hasattr(X, "columns"):
        names = tuple(str(c) for c in X.columns)
        arr = np.ascontiguousarray(X.to_numpy(dtype=float))
    else:
        arr = np.ascontiguousarray(np.asarray(X, dtype=float))
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        names = tuple(feature_names) if feature_names is not None else tuple(
            f"x{j}" for j in range(arr.shape[1]))
    if arr.ndim != 2:
        raise DataError("feature matrix must be two-dimensional")
    if not np.all(np.isfinite(arr)):
        raise DataError("feature matrix contains missing or non-finite values")
    return arr, names


def _cluster_codes(clusters, n: int, cluster_aware: bool) -> np.ndarray:
    if clusters is None or not cluster_aware:
        return np.arange(n, dtype=np.int64)
    clusters = np.asarray(clusters)
    if clusters.shape[0] != n:
        raise DataError(f"clusters has {clusters.shape[0]} entries, expected {n}")
    _, codes = np.unique(clusters, return_inverse=True)
    return codes.astype(np.int64)


def _rows_of(clusters_sel: np.ndarray, codes: np.ndarray, n_clusters: int) -> np.ndarray:
    """All rows belonging to the selected clusters, ascending."""
    mask = np.zeros(n_clusters, dtype=bool)
    mask[clusters_sel] = True
    return np.flatnonzero(mask[codes]).astype(np.int64)


def tree_seed(seed: int, index: int, stream: int) -> np.random.Generator:
    """Independent generator for (forest seed, tree or group index, stream)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(stream)]))


def _draw_samples(params: ForestParams, codes: np.ndarray):
    """Split and estimation rows for every tree, drawn at the cluster level."""
    n_clusters = int(codes.max()) + 1
    per_tree = max(1, int(round(params.sample_fraction * n_clusters)))
    group = params.ci_group_size
    draws = []
    half = None
    for b in range(params.num_trees):
        if group > 1 and b % group == 0:
            g_rng = tree_seed(params.seed, b // group, 0)
            half = g_rng.choice(n_clusters, size=max(1, n_clusters // 2), replace=False)
        pool = half if group > 1 else np.arange(n_clusters)
        rng = tree_seed(params.seed, b, 1)
        take = min(per_tree, pool.shape[0])
        chosen = rng.permutation(pool)[:take]
        n_split = int(round(params.honesty_fraction * take))
        n_split = min(max(n_split, 1), take - 1) if take > 1 else take
        split_rows = _rows_of(chosen[:n_split], codes, n_clusters)
        est_rows = _rows_of(chosen[n_split:], codes, n_clusters)
        mtry_seed = int(rng.integers(0, 2**63 - 1))
        draws.append((split_rows, est_rows, mtry_seed))
    return draws


def _run(fn, items, n_threads: int):
    if n_threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


def _grow_all(X, y, w, causal, params, codes, mtry, n_threads) -> list[Tree]:
    draws = _draw_samples(params, codes)
    order = K.presort(X)

    def grow(d):
        split_rows, est_rows, s = d
        f, t, l, r, lo, hi, est_order = K.grow_tree(
            X, y, w, order, split_rows, est_rows, causal, params.min_node_size, mtry,
            params.alpha, s)
        return Tree(f, t, l, r, lo, hi, est_order, split_rows, est_rows)

    return _run(grow, draws, n_threads)


def fit_regression_forest(X, target, clusters=None, params: ForestParams | None = None,
                          n_threads: int = 1, feature_names=None) -> Forest:
    """Honest regression forest; splits maximize variance reduction of ``target``."""
    params = params or ForestParams()
    params.validate()
    Xm, names = _as_matrix(X, feature_names)
    y = np.ascontiguousarray(np.asarray(target, dtype=float))
    n = Xm.shape[0]
    if n == 0:
        raise DataError("cannot fit a forest on empty data")
    if y.shape[0] != n:
        raise DataError(f"target has {y.shape[0]} rows, X has {n}")
    if not np.all(np.isfinite(y)):
        raise DataError("target contains missing or non-finite values")
    codes = _cluster_codes(clusters, n, params.cluster_aware)
    mtry = params.resolved_mtry(REGRESSION, Xm.shape[1])
    trees = _grow_all(Xm, y, np.zeros(n), False, params, codes, mtry, n_threads)
    return Forest(REGRESSION, params, trees, names, Xm, codes, y)


def fit_causal_forest(X, y_resid, w_resid, clusters=None, params: ForestParams | None = None,
                      n_threads: int = 1, feature_names=None) -> Forest:
    """Honest causal forest for a continuous treatment with gradient-based splits."""
    params = params or ForestParams()
    params.validate()
    Xm, names = _as_matrix(X, feature_names)
    y = np.ascontiguousarray(np.asarray(y_resid, dtype=float))
    w = np.ascontiguousarray(np.asarray(w_resid, dtype=float))
    n = Xm.shape[0]
    if n == 0:
        raise DataError("cannot fit a forest on empty data")
    if y.shape[0] != n or w.shape[0] != n:
        raise DataError("X, y_resid and w_resid must have the same number of rows")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise DataError("residuals contain missing or non-finite values")
    if not np.var(w) > 0:
        raise EstimationError("treatment residuals have zero variation")
    if np.all(Xm.max(axis=0) == Xm.min(axis=0)):
        warnings.warn("all modifiers are constant; every tree is a single leaf",
                      EstimationWarning, stacklevel=2)
    codes = _cluster_codes(clusters, n, params.cluster_aware)
    mtry = params.resolved_mtry(CAUSAL, Xm.shape[1])
    # the estimator only sees differences in y, so a shifted outcome whose
    # differences are unchanged gives bit-identical trees and effects
    y_ref = float(y[0])
    y = y - y_ref
    trees = _grow_all(Xm, y, w, True, params, codes, mtry, n_threads)
    return Forest(CAUSAL, params, trees, names, Xm, codes, y, w, y_ref)


def _flatten(forest: Forest) -> dict:
    trees = forest.trees
    sizes = np.array([t.n_nodes for t in trees], dtype=np.int64)
    offset = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    feature = np.concatenate([t.feature for t in trees]).astype(np.int32)
    threshold = np.concatenate([t.threshold for t in trees])
    left = np.concatenate([t.left for t in trees]).astype(np.int32)
    right = np.concatenate([t.right for t in trees]).astype(np.int32)
    leaf_id = np.arange(offset[-1], dtype=np.int64)
    w = forest.w if forest.w is not None else np.zeros_like(forest.y)
    moments = np.concatenate([
        K.node_moments(forest.y, w, t.est_order, t.leaf_lo, t.leaf_hi) for t in trees
    ])
    inbag = np.zeros((len(trees), forest.n_train), dtype=np.bool_)
    for b, t in enumerate(trees):
        inbag[b, t.split_rows] = True
        inbag[b, t.est_rows] = True
    return dict(offset=offset, feature=feature, threshold=threshold, left=left,
                right=right, leaf_id=leaf_id, moments=moments, inbag=inbag)


def _check_schema(forest: Forest, X) -> np.ndarray:
    Xm, names = _as_matrix(X, forest.feature_names)
    if Xm.shape[1] != forest.n_features:
        raise DataError(
            f"query has {Xm.shape[1]} features, forest was trained on {forest.n_features}")
    if hasattr(X, "columns") and names != forest.feature_names:
        raise DataError(f"query columns {names} do not match training schema {forest.feature_names}")
    return Xm


def _chunks(n: int, n_threads: int) -> list[slice]:
    k = max(1, min(n_threads, n)) * 4 if n_threads > 1 else 1
    edges = np.linspace(0, n, k + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(k) if edges[i + 1] > edges[i]]


def _regression_predict(forest: Forest, Xm: np.ndarray, query_rows: np.ndarray,
                        n_threads: int) -> tuple[np.ndarray, np.ndarray]:
    fl = forest.flat()

    def run(sl):
        return K.predict_regression(
            Xm[sl], fl["offset"], fl["feature"], fl["threshold"], fl["left"], fl["right"],
            fl["leaf_id"], fl["moments"][:, 0], fl["moments"][:, 2], query_rows[sl], fl["inbag"])

    parts = _run(run, _chunks(Xm.shape[0], n_threads), n_threads)
    if not parts:
        return np.empty(0), np.empty(0, np.int64)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def predict(forest: Forest, X, n_threads: int = 1) -> np.ndarray:
    """Regression-forest predictions for new rows using every tree."""
    if forest.kind != REGRESSION:
        raise EstimationError("predict() is for regression forests; use predict_effects()")
    Xm = _check_schema(forest, X)
    pred, _ = _regression_predict(forest, Xm, np.full(Xm.shape[0], -1, np.int64), n_threads)
    return pred


def predict_out_of_bag(forest: Forest, X, n_threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-bag predictions for the training rows.

    Returns ``(predictions, flagged)``. A row whose cluster was drawn by every
    tree has no out-of-bag trees; it is flagged and predicted with the full
    forest instead.
    """
    if forest.kind != REGRESSION:
        raise EstimationError("predict_out_of_bag() is for regression forests")
    Xm = _check_schema(forest, X)
    if Xm.shape[0] != forest.n_train:
        raise DataError("out-of-bag prediction needs the training matrix")
    pred, used = _regression_predict(forest, Xm, np.arange(Xm.shape[0], dtype=np.int64), n_threads)
    flagged = used == 0
    if flagged.any():
        full, _ = _regression_predict(forest, Xm[flagged],
                                      np.full(int(flagged.sum()), -1, np.int64), n_threads)
        pred = pred.copy()
        pred[flagged] = full
        warnings.warn(f"{int(flagged.sum())} rows were in-bag for every tree; "
                      "predicted with the full forest", EstimationWarning, stacklevel=2)
    return pred, flagged


def predict_effects(forest: Forest, X_query=None, n_threads: int = 1) -> EffectPrediction:
    """Effect estimates and variances.

    With ``X_query=None`` the training rows are predicted out-of-bag. Points
    whose weighted treatment variance is zero come back as NaN.
    """
    if forest.kind != CAUSAL:
        raise EstimationError("predict_effects() needs a causal forest")
    fl = forest.flat()
    if X_query is None:
        Xm = forest.X
        query_rows = np.arange(forest.n_train, dtype=np.int64)
    else:
        Xm = _check_schema(forest, X_query)
        query_rows = np.full(Xm.shape[0], -1, np.int64)
    mom = fl["moments"]

    def run(sl):
        return K.predict_causal(
            Xm[sl], fl["offset"], fl["feature"], fl["threshold"], fl["left"], fl["right"],
            fl["leaf_id"], mom[:, 0], mom[:, 1], mom[:, 2], mom[:, 3], mom[:, 4],
            query_rows[sl], fl["inbag"], forest.params.ci_group_size)

    parts = _run(run, _chunks(Xm.shape[0], n_threads), n_threads)
    out = np.concatenate(parts) if parts else np.empty((0, 6))
    missing = int(np.isnan(out[:, 0]).sum())
    if missing:
        warnings.warn(f"{missing} query points have no usable leaf weights or zero weighted "
                      "treatment variance; effects reported as missing",
                      EstimationWarning, stacklevel=2)
    return EffectPrediction(out[:, 0], out[:, 1], out[:, 2], out[:, 3] + forest.y_ref, out[:, 4],
                            out[:, 5].astype(np.int64))


def kernel_weights(forest: Forest, x, oob_row: int | None = None) -> np.ndarray:
    """Forest weights alpha_i(x) over the training rows for a single query point."""
    Xm = _check_schema(forest, np.asarray(x, dtype=float).reshape(1, -1))
    fl = forest.flat()
    leaves = K.find_leaves(Xm, fl["offset"], fl["feature"], fl["threshold"], fl["left"],
                           fl["right"], fl["leaf_id"])[0]
    alpha = np.zeros(forest.n_train)
    used = 0
    for b, t in enumerate(forest.trees):
        if oob_row is not None and fl["inbag"][b, oob_row]:
            continue
        node = int(leaves[b] - fl["offset"][b])
        rows = t.leaf_rows(node)
        if rows.size == 0:
            continue
        alpha[rows] += 1.0 / rows.size
        used += 1
    if used:
        alpha /= used
    return alpha


def with_params(params: ForestParams, **changes) -> ForestParams:
    return replace(params, **changes)
