"""End-to-end estimation: lag, encode, orthogonalize, fit, average, bin, report."""

from __future__ import annotations

import hashlib
import itertools
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .config import PipelineConfig, forest_params
from .effects import (EffectResults, GateReport, HeatmapReport, build_results, effect_heatmap,
                      estimate_average_effect, group_average_effects)
from .errors import ClimateCFError, DataError, EstimationWarning, StageError
from .forest import (CAUSAL, REGRESSION, Forest, ForestParams, fit_causal_forest,
                     predict_effects, tune_forest)
from .forest.core import with_params
from .io import atomic_write_csv, atomic_write_json, file_fingerprint
from .panel import CONFOUNDER, MODIFIER, PanelDataset, lag_columns, standardize_stats

# residual means above this fraction of the raw SD flag the orthogonalization
RESID_MEAN_TOL = 0.02

_STAGE_SEEDS = {"outcome_forest": 1, "treatment_forest": 2, "causal_forest": 3}


def derive_seed(seed: int, stage: str) -> int:
    ss = np.random.SeedSequence([int(seed), _STAGE_SEEDS[stage]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---- data preparation -----------------------------------------------------------

def encode_categorical_means(ds: PanelDataset, col: str, stats_cols: Sequence[str],
                             prefix: str | None = None) -> pd.DataFrame:
    """Replace each level of ``col`` by its within-level means of ``stats_cols``."""
    if col not in ds.frame.columns:
        raise DataError(f"unknown column {col!r}")
    stats_cols = list(stats_cols)
    if not stats_cols:
        raise DataError("means encoding needs at least one statistics column")
    frame = ds.frame
    if frame[col].nunique() == 0:
        raise DataError(f"column {col!r} has no levels")
    for c in stats_cols:
        if c not in frame.columns:
            raise DataError(f"unknown column {c!r}")
        if not pd.api.types.is_numeric_dtype(frame[c]):
            raise DataError(f"means encoding needs numeric columns; {c!r} is not")
    prefix = prefix or f"{col}_mean"
    means = frame.groupby(col, sort=False)[stats_cols].transform("mean")
    means.columns = [f"{prefix}_{c}" for c in stats_cols]
    return means.reset_index(drop=True)


@dataclass(frozen=True)
class AnalysisData:
    """Lagged analysis sample with the confounder and modifier matrices."""

    ds: PanelDataset
    confounders: pd.DataFrame
    modifiers: pd.DataFrame

    @property
    def y(self) -> np.ndarray:
        return self.ds.values(self.ds.outcome).astype(float)

    @property
    def w(self) -> np.ndarray:
        return self.ds.values(self.ds.treatment).astype(float)

    @property
    def clusters(self) -> np.ndarray:
        return self.ds.values(self.ds.cluster)

    def keys(self) -> pd.DataFrame:
        return self.ds.frame[[self.ds.unit_id, self.ds.wave]].reset_index(drop=True)


def _resolve(names, available: Sequence[str], what: str) -> list[str]:
    missing = [c for c in names if c not in available]
    if missing:
        raise DataError(f"{what} not found in the data: {missing}")
    return list(names)


def prepare(ds: PanelDataset, cfg: PipelineConfig) -> AnalysisData:
    cols = list(ds.frame.columns)
    base_mods = _resolve(cfg.modifiers if cfg.modifiers is not None
                         else ds.columns_with(MODIFIER), cols, "modifiers")
    conf = _resolve(cfg.confounders if cfg.confounders is not None
                    else ds.columns_with(CONFOUNDER), cols, "confounders")
    lag_conf = _resolve(cfg.lag_confounders, cols, "lagged confounders")
    treat = ds.treatment
    to_lag = list(dict.fromkeys(base_mods + ([treat] if cfg.lagged_treatment_modifier else [])
                                + lag_conf))
    if not base_mods and not cfg.lagged_treatment_modifier:
        raise DataError("no effect modifiers configured")
    lagged = lag_columns(ds, to_lag)
    frame = lagged.frame.reset_index(drop=True)
    if np.ptp(lagged.values(treat).astype(float)) == 0:
        raise DataError(f"treatment {treat!r} is constant in the analysis sample")

    mod_names = [c + "_lag" for c in base_mods]
    if cfg.lagged_treatment_modifier:
        mod_names.append(treat + "_lag")
    for c in mod_names:
        if c in lagged.categorical:
            raise DataError(f"modifier {c!r} is categorical; modifiers must be numeric")
    modifiers = frame[mod_names].astype(float)

    parts = []
    for c in conf:
        name = c + "_lag" if c in lag_conf else c
        if c in ds.categorical:
            dummies = pd.get_dummies(frame[name].astype(str), prefix=name, dtype=float)
            parts.append(dummies[sorted(dummies.columns)])
        else:
            parts.append(frame[[name]].astype(float))
    if cfg.wave_dummies:
        waves = sorted(frame[lagged.wave].unique())
        parts.append(pd.DataFrame({f"wave_{int(v)}": (frame[lagged.wave] == v).astype(float)
                                   for v in waves}))
    if cfg.fixed_effects:
        stats_cols = [lagged.outcome, treat] + mod_names
        parts.append(encode_categorical_means(lagged, lagged.unit_id, stats_cols, prefix="fe"))
    confounders = pd.concat(parts, axis=1) if parts else pd.DataFrame(index=frame.index)
    return AnalysisData(lagged, confounders.reset_index(drop=True), modifiers)


# ---- orthogonalization ---------------------------------------------------------

@dataclass(frozen=True)
class OrthogonalizedData:
    y_resid: np.ndarray
    w_resid: np.ndarray
    y_hat: np.ndarray
    w_hat: np.ndarray
    confounders: tuple[str, ...]
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return not self.diagnostics.get("residual_means_ok", True)


def _abs_corr(a: np.ndarray, B: np.ndarray) -> np.ndarray:
    a = a - a.mean()
    B = B - B.mean(axis=0)
    denom = np.sqrt(np.sum(a * a) * np.sum(B * B, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(a @ B) / denom
    return np.where(denom > 0, r, 0.0)


def residual_diagnostics(y, w, y_resid, w_resid, confounders: pd.DataFrame | None) -> dict:
    sd_y, sd_w = float(np.std(y, ddof=1)), float(np.std(w, ddof=1))
    d = {
        "mean_y_resid": float(np.mean(y_resid)),
        "mean_w_resid": float(np.mean(w_resid)),
        "sd_y": sd_y,
        "sd_w": sd_w,
        "sd_w_resid": float(np.std(w_resid, ddof=1)),
        "corr_w_resid_w": float(np.corrcoef(w_resid, w)[0, 1]) if sd_w > 0 else None,
    }
    d["residual_means_ok"] = bool(abs(d["mean_y_resid"]) <= RESID_MEAN_TOL * sd_y
                                  and abs(d["mean_w_resid"]) <= RESID_MEAN_TOL * sd_w)
    if confounders is not None and confounders.shape[1]:
        B = confounders.to_numpy(dtype=float)
        cy, cw = _abs_corr(np.asarray(y_resid), B), _abs_corr(np.asarray(w_resid), B)
        d["max_abs_corr_y_resid"] = float(cy.max())
        d["max_abs_corr_w_resid"] = float(cw.max())
    return d


def orthogonalize(confounders: pd.DataFrame, y, w, clusters, params: ForestParams | None = None,
                  n_threads: int = 1, w_params: ForestParams | None = None,
                  grid: Sequence[Mapping] | None = None) -> OrthogonalizedData:
    """Out-of-bag residuals of outcome and treatment from two regression forests.

    With ``grid``, each forest picks among the parameter overrides by
    out-of-bag squared error; the choices go into the diagnostics.
    """
    if confounders.shape[1] == 0:
        raise DataError("no confounder columns to orthogonalize on")
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    params = params or ForestParams()
    w_params = w_params or params
    chosen = {}

    def residualize(target, base, name):
        cands = [forest_params({**base.to_dict(), **dict(g)}) for g in (grid or [{}])]
        best, losses, _, pred = tune_forest(cands, confounders, target, None, clusters,
                                            kind=REGRESSION, n_threads=n_threads, return_fit=True)
        chosen[name] = {"params": best.to_dict(), "oob_mse": losses}
        return pred

    y_hat = residualize(y, params, "outcome_forest")
    w_hat = residualize(w, w_params, "treatment_forest")
    y_resid, w_resid = y - y_hat, w - w_hat
    diag = residual_diagnostics(y, w, y_resid, w_resid, confounders)
    diag["forests"] = chosen
    if not diag["residual_means_ok"]:
        warnings.warn("orthogonalized residual means exceed 2% of the raw SD", EstimationWarning,
                      stacklevel=2)
    return OrthogonalizedData(y_resid, w_resid, y_hat, w_hat, tuple(confounders.columns), diag)


def center_only(y, w) -> OrthogonalizedData:
    """No confounder adjustment; outcome and treatment are only demeaned."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    y_hat = np.full_like(y, y.mean())
    w_hat = np.full_like(w, w.mean())
    diag = residual_diagnostics(y, w, y - y_hat, w - w_hat, None)
    return OrthogonalizedData(y - y_hat, w - w_hat, y_hat, w_hat, (), diag)


# ---- full run ------------------------------------------------------------------

@dataclass
class PipelineResult:
    analysis: AnalysisData
    orth: OrthogonalizedData
    forest: Forest
    effects: EffectResults
    gates: dict[str, GateReport]
    heatmaps: dict[tuple[str, str], HeatmapReport]
    manifest: dict
    placebo: bool = False
    placebo_seed: int | None = None
    skipped: list[str] = field(default_factory=list)


class _Stages:
    def __init__(self):
        self.times: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except ClimateCFError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.times[name] = round(time.perf_counter() - t0, 6)


def _tuned(grid, base: ForestParams, kind: str, args, n_threads: int) -> tuple[ForestParams, list]:
    candidates = [forest_params({**base.to_dict(), **dict(g)}) for g in grid]
    best, losses = tune_forest(candidates, *args, kind=kind, n_threads=n_threads)
    return best, losses


def permute_treatment(ds: PanelDataset, seed: int) -> PanelDataset:
    """Shuffle the treatment column across the whole panel (a bijection on rows)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A1CEB0]))
    w = ds.values(ds.treatment)
    return ds.with_columns({ds.treatment: w[rng.permutation(w.shape[0])]})


def data_fingerprint(ds: PanelDataset) -> str:
    blob = ds.frame.to_csv(index=False, float_format="%.17g").encode()
    return hashlib.sha256(blob).hexdigest()


def _heatmap_pairs(cfg: PipelineConfig, mods: Sequence[str]) -> list[tuple[str, str]]:
    if cfg.heatmap_pairs is None:
        return list(itertools.combinations(mods, 2))

    def name(m):
        if m in mods:
            return m
        if m + "_lag" in mods:
            return m + "_lag"
        raise DataError(f"heatmap modifier {m!r} is not a modifier")

    return [(name(a), name(b)) for a, b in cfg.heatmap_pairs]


def run_pipeline(ds: PanelDataset, cfg: PipelineConfig, placebo_seed: int | None = None,
                 n_threads: int | None = None) -> PipelineResult:
    """Run every stage; errors come back as StageError naming the stage."""
    cfg.validate()
    threads = n_threads or cfg.threads
    stages = _Stages()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with stages.stage("prepare"):
            if placebo_seed is not None:
                ds = permute_treatment(ds, placebo_seed)
            analysis = prepare(ds, cfg)
        seeds = {k: derive_seed(cfg.seed, k) for k in _STAGE_SEEDS}
        conf_params = forest_params(cfg.confounder_forest)
        cf_params = forest_params(cfg.forest, seeds["causal_forest"])
        tuning_log = {}
        with stages.stage("orthogonalize"):
            if cfg.orthogonalize:
                yp = with_params(conf_params, seed=seeds["outcome_forest"])
                wp = with_params(conf_params, seed=seeds["treatment_forest"])
                orth = orthogonalize(analysis.confounders, analysis.y, analysis.w,
                                     analysis.clusters, yp, threads, wp,
                                     cfg.tuning.get("confounder"))
                for k in ("outcome_forest", "treatment_forest"):
                    tuning_log[k] = orth.diagnostics["forests"][k]["oob_mse"]
                yp = ForestParams(**orth.diagnostics["forests"]["outcome_forest"]["params"])
                wp = ForestParams(**orth.diagnostics["forests"]["treatment_forest"]["params"])
            else:
                yp = wp = None
                orth = center_only(analysis.y, analysis.w)
        with stages.stage("causal_forest"):
            if "causal" in cfg.tuning:
                cf_params, tuning_log["causal_forest"] = _tuned(
                    cfg.tuning["causal"], cf_params, CAUSAL,
                    (analysis.modifiers, orth.y_resid, orth.w_resid, analysis.clusters), threads)
            forest = fit_causal_forest(analysis.modifiers, orth.y_resid, orth.w_resid,
                                       analysis.clusters, cf_params, threads)
            pred = predict_effects(forest, n_threads=threads)
        with stages.stage("average_effect"):
            ate, ate_se, _, n_bad = estimate_average_effect(orth.y_resid, orth.w_resid, pred,
                                                            analysis.clusters)
            _, sd_w = standardize_stats(analysis.ds, analysis.ds.treatment)
            effects = build_results(pred, ate, ate_se, sd_w, n_bad)
        gates, heatmaps, skipped = {}, {}, []
        with stages.stage("reports"):
            mods = list(analysis.modifiers.columns)
            for m in mods:
                x = analysis.modifiers[m].to_numpy()
                if np.ptp(x) == 0:
                    skipped.append(m)
                    warnings.warn(f"modifier {m!r} is constant; no group report", EstimationWarning)
                    continue
                gates[m] = group_average_effects(effects.tau_sd, x, m, cfg.gate_bins,
                                                 placebo_seed is not None)
            for a, b in _heatmap_pairs(cfg, mods):
                if a in skipped or b in skipped:
                    continue
                heatmaps[(a, b)] = effect_heatmap(
                    effects.tau_sd, analysis.modifiers[a].to_numpy(),
                    analysis.modifiers[b].to_numpy(), a, b, cfg.heatmap_bins,
                    placebo_seed is not None)
    for w in caught:
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)

    manifest = {
        "tool": "climate-cf",
        "version": __version__,
        "command": "placebo" if placebo_seed is not None else "fit",
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "data": {
            "source": ds.meta.get("source"),
            "source_sha256": file_fingerprint(ds.meta["source"]) if ds.meta.get("source")
            and Path(str(ds.meta["source"])).exists() else None,
            "analysis_sha256": data_fingerprint(analysis.ds),
            "n_rows": len(analysis.ds),
            "n_units": analysis.ds.n_units,
        },
        "seeds": {"seed": cfg.seed, "placebo_seed": placebo_seed, **seeds},
        "forest_params": {
            "causal_forest": {**cf_params.to_dict(),
                              "mtry_resolved": cf_params.resolved_mtry(CAUSAL, forest.n_features)},
            "outcome_forest": yp.to_dict() if yp else None,
            "treatment_forest": wp.to_dict() if wp else None,
        },
        "tuning": tuning_log,
        "wall_seconds": stages.times,
        "warnings": [str(w.message) for w in caught],
    }
    return PipelineResult(analysis, orth, forest, effects, gates, heatmaps, manifest,
                          placebo_seed is not None, placebo_seed, skipped)


def run_placebo(ds: PanelDataset, cfg: PipelineConfig, seed: int,
                n_threads: int | None = None) -> PipelineResult:
    """The whole pipeline again, on a seeded permutation of the treatment."""
    return run_pipeline(ds, cfg, placebo_seed=seed, n_threads=n_threads)


# ---- outputs -------------------------------------------------------------------

def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if np.isfinite(v) else None
    return v


def results_dict(res: PipelineResult) -> dict:
    return _clean({
        "placebo": res.placebo,
        "placebo_seed": res.placebo_seed,
        "effects": res.effects.summary(),
        "orthogonalization": dict(res.orth.diagnostics),
        "modifiers": list(res.analysis.modifiers.columns),
        "confounder_features": list(res.orth.confounders),
        "effects_file": "effects.csv",
        "gates": {m: {"file": f"gate_{m}.csv", "edges": g.edges, "n": g.n, "mean_tau_sd": g.mean}
                  for m, g in res.gates.items()},
        "heatmaps": [{"a": a, "b": b, "file": f"heatmap_{a}_{b}.csv"} for a, b in res.heatmaps],
        "skipped_modifiers": res.skipped,
    })


def write_outputs(res: PipelineResult, out_dir) -> Path:
    """Write results.json, effects.csv, gate/heatmap CSVs and manifest.json.

    Placebo runs always go to ``<out_dir>/placebo``.
    """
    out = Path(out_dir)
    if res.placebo:
        out = out / "placebo"
    out.mkdir(parents=True, exist_ok=True)
    effects = res.effects.frame(res.analysis.keys())
    atomic_write_csv(out / "effects.csv", effects)
    for m, g in res.gates.items():
        atomic_write_csv(out / f"gate_{m}.csv", g.frame())
    for (a, b), h in res.heatmaps.items():
        atomic_write_csv(out / f"heatmap_{a}_{b}.csv", h.frame())
    atomic_write_json(out / "results.json", results_dict(res))
    atomic_write_json(out / "manifest.json", _clean(res.manifest))
    return out
