"""Out-of-bag selection among candidate forest parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .core import (CAUSAL, REGRESSION, ForestParams, fit_causal_forest, fit_regression_forest,
                   predict_effects, predict_out_of_bag)


def r_loss(y_resid, w_resid, tau) -> float:
    """Mean of (y~ - tau * w~)^2; missing effects count as the mean effect."""
    y = np.asarray(y_resid, float)
    w = np.asarray(w_resid, float)
    tau = np.asarray(tau, float)
    if np.isnan(tau).any():
        fill = np.nanmean(tau) if np.isfinite(tau).any() else 0.0
        tau = np.where(np.isnan(tau), fill, tau)
    return float(np.mean((y - tau * w) ** 2))


def tune_forest(candidates: Sequence[ForestParams], X, y, w=None, clusters=None,
                kind: str = CAUSAL, n_threads: int = 1, feature_names=None,
                return_fit: bool = False):
    """Fit every candidate and keep the one with the lowest out-of-bag loss.

    Causal forests are scored by R-loss, regression forests by squared error.
    Ties go to the earliest candidate. Returns the winner and all losses in
    grid order; with ``return_fit`` also the winning forest and its
    out-of-bag predictions.
    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("tuning grid is empty")
    if kind not in (CAUSAL, REGRESSION):
        raise ConfigError(f"unknown forest kind {kind!r}")
    if len(candidates) == 1 and not return_fit:
        return candidates[0], [float("nan")]
    losses = []
    best = None
    for i, params in enumerate(candidates):
        if kind == CAUSAL:
            forest = fit_causal_forest(X, y, w, clusters, params, n_threads, feature_names)
            pred = predict_effects(forest, n_threads=n_threads)
            loss = r_loss(y, w, pred.tau)
        else:
            forest = fit_regression_forest(X, y, clusters, params, n_threads, feature_names)
            pred, _ = predict_out_of_bag(forest, forest.X, n_threads)
            loss = float(np.mean((np.asarray(y, float) - pred) ** 2))
        losses.append(loss)
        if best is None or loss < losses[best[0]]:
            best = (i, forest, pred)
    winner = candidates[best[0]]
    if return_fit:
        return winner, losses, best[1], best[2]
    return winner, losses
