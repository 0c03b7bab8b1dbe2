"""Average effects, per-SD scaling, group-average effects and heatmaps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError, EstimationError, EstimationWarning
from .forest import EffectPrediction


@dataclass(frozen=True)
class EffectResults:
    tau: np.ndarray          # per treatment unit
    se: np.ndarray
    tau_sd: np.ndarray       # per treatment SD
    ate: float
    ate_se: float
    ate_sd: float
    treatment_sd: float
    n_excluded: int = 0

    def frame(self, keys: pd.DataFrame | None = None) -> pd.DataFrame:
        out = pd.DataFrame({
            "tau": self.tau,
            "se": self.se,
            "tau_sd": self.tau_sd,
            "ci_low": self.tau - 1.959963984540054 * self.se,
            "ci_high": self.tau + 1.959963984540054 * self.se,
        })
        if keys is not None:
            out = pd.concat([keys.reset_index(drop=True), out], axis=1)
        return out

    def summary(self) -> dict:
        ok = np.isfinite(self.tau_sd)
        q = np.quantile(self.tau_sd[ok], [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0]) if ok.any() \
            else np.full(7, np.nan)
        return {
            "ate": self.ate,
            "ate_se": self.ate_se,
            "ate_per_sd": self.ate_sd,
            "ate_se_per_sd": self.ate_se * self.treatment_sd,
            "treatment_sd": self.treatment_sd,
            "n_rows": int(self.tau.shape[0]),
            "n_missing_effects": int((~ok).sum()),
            "n_excluded_from_ate": self.n_excluded,
            "per_sd_quantiles": {k: _num(v) for k, v in
                                 zip(("min", "p05", "p25", "p50", "p75", "p95", "max"), q)},
            "share_ci_excluding_zero": _num(np.mean(
                np.abs(self.tau[ok]) > 1.959963984540054 * self.se[ok])) if ok.any() else None,
        }


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def per_sd_effect(tau_per_unit, sd_w):
    """Effect of a one-standard-deviation treatment increase."""
    if not np.all(np.asarray(sd_w, dtype=float) > 0):
        raise DataError("treatment SD must be positive")
    return np.multiply(tau_per_unit, sd_w)


def cluster_robust_se(scores: np.ndarray, clusters: np.ndarray) -> float:
    """SE of mean(scores) with the cluster-sum variance and a G / (G - 1) correction."""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    _, codes = np.unique(np.asarray(clusters), return_inverse=True)
    g = int(codes.max()) + 1
    if g < 2:
        raise EstimationError("cluster-robust SE needs at least two clusters")
    sums = np.bincount(codes, weights=scores - scores.mean(), minlength=g)
    return float(np.sqrt(g / (g - 1) * np.sum(sums ** 2)) / n)


def estimate_average_effect(y_resid, w_resid, pred: EffectPrediction,
                            clusters) -> tuple[float, float, np.ndarray, int]:
    """Doubly robust average partial effect.

    Score: tau(x) + w~ / M_ww(x) * (y~ - tau(x) w~), where tau and M_ww (the
    kernel-weighted mean of w~^2) are out-of-bag. Returns (ate, se, scores,
    n_excluded); rows without an out-of-bag effect are excluded.
    """
    y = np.asarray(y_resid, dtype=float)
    w = np.asarray(w_resid, dtype=float)
    if y.shape[0] == 0:
        raise DataError("no rows to average")
    tau, mww = pred.tau, pred.mean_ww
    ok = np.isfinite(tau) & np.isfinite(mww) & (mww > 0)
    n_bad = int((~ok).sum())
    if n_bad:
        warnings.warn(f"{n_bad} rows lack an out-of-bag effect and are excluded from the ATE",
                      EstimationWarning, stacklevel=2)
    if ok.sum() < 2:
        raise EstimationError("fewer than two rows have usable effects")
    scores = tau[ok] + w[ok] / mww[ok] * (y[ok] - tau[ok] * w[ok])
    ate = float(scores.mean())
    se = cluster_robust_se(scores, np.asarray(clusters)[ok])
    if not se > 0:
        raise EstimationError("average-effect standard error is not positive")
    return ate, se, scores, n_bad


def build_results(pred: EffectPrediction, ate: float, ate_se: float, sd_w: float,
                  n_excluded: int = 0) -> EffectResults:
    return EffectResults(pred.tau, pred.se, per_sd_effect(pred.tau, sd_w), ate, ate_se,
                         float(per_sd_effect(ate, sd_w)), float(sd_w), n_excluded)


# ---- quantile bins ------------------------------------------------------------

def quantile_cuts(x: np.ndarray, k: int) -> np.ndarray:
    """Distinct upper bin edges at the j/k quantiles, j = 1..k (linear interpolation)."""
    if k < 2:
        raise DataError("need at least two bins")
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise DataError("cannot bin an empty column")
    if np.ptp(x) == 0:
        raise DataError("modifier is constant; a single bin is meaningless, skip it")
    return np.unique(np.quantile(x, np.arange(1, k + 1) / k))


def assign_bins(x: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """Bin b holds cuts[b-1] < x <= cuts[b]; the first bin holds x <= cuts[0]."""
    b = np.searchsorted(cuts, np.asarray(x, dtype=float), side="left")
    return np.minimum(b, cuts.shape[0] - 1)


@dataclass(frozen=True)
class GateReport:
    modifier: str
    edges: np.ndarray        # lower edge (sample min) followed by the upper cut of every bin
    n: np.ndarray
    mean: np.ndarray         # mean per-SD effect; NaN for empty bins
    placebo: bool = False

    @property
    def n_bins(self) -> int:
        return int(self.n.shape[0])

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin": np.arange(1, self.n_bins + 1),
            "lower": self.edges[:-1],
            "upper": self.edges[1:],
            "n": self.n,
            "mean_tau_sd": self.mean,
        })

    def weighted_mean(self) -> float:
        ok = self.n > 0
        return float(np.sum(self.n[ok] * self.mean[ok]) / np.sum(self.n[ok]))


def _bin_means(values: np.ndarray, bins: np.ndarray, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.bincount(bins, minlength=n_bins)
    s = np.bincount(bins, weights=values, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, s / np.maximum(n, 1), np.nan)
    return n.astype(np.int64), mean


def group_average_effects(effect_sd, modifier_values, name: str = "modifier", k: int = 10,
                          placebo: bool = False) -> GateReport:
    """Mean per-SD effect within quantile bins of one modifier.

    Rows with a missing effect are dropped before binning.
    """
    e = np.asarray(effect_sd, dtype=float)
    x = np.asarray(modifier_values, dtype=float)
    if e.shape != x.shape:
        raise DataError("effects and modifier values differ in length")
    ok = np.isfinite(e)
    e, x = e[ok], x[ok]
    cuts = quantile_cuts(x, k)
    bins = assign_bins(x, cuts)
    n, mean = _bin_means(e, bins, cuts.shape[0])
    edges = np.concatenate([[x.min()], cuts])
    return GateReport(name, edges, n, mean, placebo)


@dataclass(frozen=True)
class HeatmapReport:
    mod_a: str
    mod_b: str
    edges_a: np.ndarray
    edges_b: np.ndarray
    n: np.ndarray            # (bins_a, bins_b)
    mean: np.ndarray         # NaN where the cell is empty
    placebo: bool = False

    def frame(self) -> pd.DataFrame:
        rows = []
        for i in range(self.n.shape[0]):
            for j in range(self.n.shape[1]):
                rows.append({
                    "bin_a": i + 1, "bin_b": j + 1,
                    "a_lower": self.edges_a[i], "a_upper": self.edges_a[i + 1],
                    "b_lower": self.edges_b[j], "b_upper": self.edges_b[j + 1],
                    "n": int(self.n[i, j]),
                    "mean_tau_sd": self.mean[i, j] if self.n[i, j] > 0 else None,
                })
        return pd.DataFrame(rows)


def effect_heatmap(effect_sd, a_values, b_values, mod_a: str = "a", mod_b: str = "b",
                   k: int = 4, placebo: bool = False) -> HeatmapReport:
    e = np.asarray(effect_sd, dtype=float)
    a = np.asarray(a_values, dtype=float)
    b = np.asarray(b_values, dtype=float)
    if not e.shape == a.shape == b.shape:
        raise DataError("effects and modifier values differ in length")
    ok = np.isfinite(e)
    e, a, b = e[ok], a[ok], b[ok]
    cuts_a, cuts_b = quantile_cuts(a, k), quantile_cuts(b, k)
    ka, kb = cuts_a.shape[0], cuts_b.shape[0]
    cell = assign_bins(a, cuts_a) * kb + assign_bins(b, cuts_b)
    n, mean = _bin_means(e, cell, ka * kb)
    return HeatmapReport(mod_a, mod_b, np.concatenate([[a.min()], cuts_a]),
                         np.concatenate([[b.min()], cuts_b]), n.reshape(ka, kb),
                         mean.reshape(ka, kb), placebo)


def gradient(report: GateReport) -> float:
    """Spread between the largest and smallest non-empty bin means."""
    m = report.mean[report.n > 0]
    return float(m.max() - m.min()) if m.size else 0.0


def max_gradient(reports: Sequence[GateReport]) -> float:
    return max((gradient(r) for r in reports), default=0.0)


def max_abs_bin_mean(reports: Sequence[GateReport]) -> float:
    vals = [np.abs(r.mean[r.n > 0]).max() for r in reports if np.any(r.n > 0)]
    return float(max(vals, default=0.0))
