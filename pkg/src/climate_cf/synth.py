"""Synthetic household panels with a known effect surface.

Effects depend on the previous wave's asset index, adaptive capacity and
drought exposure:

    tau(x) = beta_0
             + beta_asset * sign(a - a_low) * g(|a - a_low|)
             - beta_adapt * (c - 50) / 50
             + beta_lag * w_lag + beta_lag2 * w_lag ** 2

with g(d) = (2 / pi) * arctan(d / asset_scale), bounded and increasing. The
outcome is Bernoulli on the probability scale,
p = clip(p0 + tau(x) * w + confounder terms + noise, 0.01, 0.99).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .panel import (CLUSTER, CONFOUNDER, MODIFIER, OUTCOME, TREATMENT, UNIT_ID, WAVE,
                    PanelDataset, from_frame)

UNIT_COL = "hhid"
WAVE_COL = "wave"
OUTCOME_COL = "migrant"
TREATMENT_COL = "gs_spei"
CLUSTER_COL = "cluster"
P_MIN, P_MAX = 0.01, 0.99
MAX_CLIP_RATE = 0.10

MODIFIER_COLS = ("asset_index", "adapt_index", "log_consumption", "tertiary_share")
DEMOGRAPHIC_COLS = ("head_age", "head_female", "hh_size", "n_children", "n_working")
SHOCK_COLS = ("idio_shock", "manmade_shock")


@dataclass(frozen=True)
class SynthConfig:
    n_households: int = 2000
    n_waves: int = 3
    a_low: float = 10.0
    a_high: float | None = None
    asset_scale: float = 6.0
    beta_0: float = 0.0
    beta_asset: float = 0.0
    beta_adapt: float = 0.0
    beta_lag: float = 0.0
    beta_lag2: float = 0.0
    p0: float = 0.269
    household_sd: float = 0.05
    noise_sd: float = 0.02
    confounder_effect: float = 0.03
    shock_mean: float = 0.229
    shock_sd: float = 0.337
    # treatment and outcome loadings on a standardized geographic confounder
    confounding: float = 0.0
    confounding_outcome: float = 0.0
    time_trend: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_households < 2 or self.n_waves < 2:
            raise ConfigError("need at least two households and two waves")
        if not 0.0 < self.p0 < 1.0:
            raise ConfigError("p0 must lie in (0, 1)")
        if self.a_high is not None and not self.a_low < self.a_high:
            raise ConfigError("a_low must be below a_high")
        if self.asset_scale <= 0 or self.shock_sd <= 0:
            raise ConfigError("asset_scale and shock_sd must be positive")
        if not -1.0 < self.confounding < 1.0:
            raise ConfigError("confounding must lie in (-1, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class SynthPanel:
    dataset: PanelDataset
    truth: pd.DataFrame
    clip_rate: float


def synth_roles() -> dict[str, str]:
    roles = {UNIT_COL: UNIT_ID, WAVE_COL: WAVE, OUTCOME_COL: OUTCOME, TREATMENT_COL: TREATMENT,
             CLUSTER_COL: CLUSTER}
    roles.update({c: MODIFIER for c in MODIFIER_COLS})
    roles.update({c: CONFOUNDER for c in ("lon", "lat", "region") + DEMOGRAPHIC_COLS + SHOCK_COLS})
    return roles


def oracle_tau(config: SynthConfig, asset, adapt, w_lag) -> np.ndarray:
    """Closed-form effect per unit of treatment at the given lagged characteristics."""
    a = np.asarray(asset, dtype=float)
    c = np.asarray(adapt, dtype=float)
    wl = np.asarray(w_lag, dtype=float)
    d = a - config.a_low
    asset_term = np.sign(d) * (2.0 / np.pi) * np.arctan(np.abs(d) / config.asset_scale)
    if config.a_high is not None:
        # counterfactual: above a_high the shock no longer changes migration
        fade = np.exp(-np.clip(a - config.a_high, 0.0, None) / config.asset_scale)
        asset_term = asset_term * fade
    return (config.beta_0 + config.beta_asset * asset_term
            - config.beta_adapt * (c - 50.0) / 50.0
            + config.beta_lag * wl + config.beta_lag2 * wl ** 2)


def oracle_effect(config: SynthConfig, row: Mapping) -> float:
    """True effect for one analysis row (needs the lagged modifier columns)."""
    keys = ("asset_index_lag", "adapt_index_lag", TREATMENT_COL + "_lag")
    missing = [k for k in keys if k not in row]
    if missing:
        raise DataError(f"row lacks columns needed by the effect oracle: {missing}")
    return float(oracle_tau(config, row[keys[0]], row[keys[1]], row[keys[2]]))


def generate_panel(config: SynthConfig) -> SynthPanel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    H, T = config.n_households, config.n_waves
    hh = np.arange(H)

    # persistent household traits
    lon = rng.uniform(3.0, 14.5, H)
    lat = rng.uniform(4.5, 13.8, H)
    region = (np.digitize(lat, [7.5, 10.5]) * 2 + (lon > 8.5)).astype(int)
    lat_std = (lat - lat.mean()) / lat.std()
    asset_base = np.clip(rng.gamma(1.2, 11.0, H), 0.0, 100.0)
    adapt_base = 100.0 * rng.beta(1.7, 3.6, H)
    tert_base = np.where(rng.random(H) < 0.85, 0.0, rng.beta(1.2, 3.0, H))
    hh_effect = rng.normal(0.0, config.household_sd, H)
    head_age0 = np.clip(rng.normal(53.0, 14.0, H), 17, 108)
    head_female = (rng.random(H) < 0.135).astype(float)
    size0 = 1 + rng.poisson(6.6, H)

    wave_shift = config.time_trend * (np.arange(T) - (T - 1) / 2.0)
    rows = []
    prev = None
    for t in range(T):
        asset = np.clip(asset_base + rng.normal(0.0, 2.0, H), 0.0, 100.0)
        adapt = np.clip(adapt_base + rng.normal(0.0, 3.0, H), 0.0, 100.0)
        z_asset = (asset_base - 13.3) / 12.6
        log_cons = 10.77 + 0.69 * (0.37 * z_asset + np.sqrt(1 - 0.37 ** 2) * rng.normal(size=H))
        tert = np.clip(tert_base + np.where(tert_base > 0, rng.normal(0, 0.03, H), 0.0), 0.0, 1.0)
        hh_size = np.maximum(1, size0 + rng.integers(-1, 2, H))
        n_children = np.minimum(hh_size - 1, rng.binomial(hh_size, 0.38))
        n_working = np.maximum(0, np.minimum(hh_size - n_children, rng.binomial(hh_size, 0.45)))
        idio = (rng.random(H) < 0.16).astype(float)
        manmade = (rng.random(H) < 0.086).astype(float)
        z = rng.normal(size=H)
        k = config.confounding
        w = (config.shock_mean + wave_shift[t]
             + config.shock_sd * (k * lat_std + np.sqrt(1.0 - k * k) * z))

        if prev is None:
            tau = oracle_tau(config, asset, adapt, w)
        else:
            tau = oracle_tau(config, prev["asset"], prev["adapt"], prev["w"])
        conf = (config.confounder_effect * ((idio - 0.16) / 0.367 - 0.5 * (manmade - 0.086) / 0.28
                                            + 0.3 * (hh_size - 7.6) / 3.6)
                + config.confounding_outcome * lat_std
                + config.time_trend * 0.5 * (t - (T - 1) / 2.0))
        raw_p = (config.p0 + tau * w + hh_effect + conf
                 + rng.normal(0.0, config.noise_sd, H))
        clipped = (raw_p < P_MIN) | (raw_p > P_MAX)
        p = np.clip(raw_p, P_MIN, P_MAX)
        y = (rng.random(H) < p).astype(int)
        rows.append(pd.DataFrame({
            UNIT_COL: hh, WAVE_COL: t + 1, OUTCOME_COL: y, TREATMENT_COL: w,
            CLUSTER_COL: hh,
            "asset_index": asset, "adapt_index": adapt, "log_consumption": log_cons,
            "tertiary_share": tert, "lon": lon, "lat": lat, "region": region,
            "head_age": np.round(head_age0 + 3 * t), "head_female": head_female,
            "hh_size": hh_size, "n_children": n_children, "n_working": n_working,
            "idio_shock": idio, "manmade_shock": manmade,
            "_tau": tau if prev is not None else np.nan, "_clipped": clipped,
            "_analysis": prev is not None,
        }))
        prev = {"asset": asset, "adapt": adapt, "w": w}

    frame = pd.concat(rows, ignore_index=True)
    analysis = frame["_analysis"].to_numpy()
    clip_rate = float(frame.loc[analysis, "_clipped"].mean())
    if clip_rate > MAX_CLIP_RATE:
        raise ConfigError(
            f"{clip_rate:.1%} of outcome probabilities were clipped (limit {MAX_CLIP_RATE:.0%}); "
            "effect sizes are too large for the base rate")
    truth = frame.loc[analysis, [UNIT_COL, WAVE_COL, "_tau"]].rename(columns={"_tau": "tau"})
    truth[UNIT_COL] = truth[UNIT_COL].astype(str)
    frame = frame.drop(columns=["_tau", "_clipped", "_analysis"])
    ds = from_frame(frame, synth_roles(), categorical=("region",),
                    meta={"synthetic": True, "synth_config": config.to_dict()})
    return SynthPanel(ds, truth.reset_index(drop=True), clip_rate)
