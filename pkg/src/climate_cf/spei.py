"""SPEI from monthly water balance, and growing-season averages per household.

The water balance D = P - PET is mapped through a three-parameter
log-logistic CDF fitted by unbiased probability-weighted moments, then through
the standard normal quantile function.
"""

from __future__ import annotations

import datetime as dt
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from .errors import ConfigError, DataError, EstimationError, EstimationWarning

MIN_REFERENCE = 30
CDF_FLOOR = 1e-6
CDF_CEIL = 1.0 - 1e-6


@dataclass(frozen=True)
class SpeiModel:
    """Three-parameter log-logistic fitted to a reference water-balance series.

    F(x) = 1 / (1 + (scale / (x - origin)) ** shape) for x > origin.
    """

    shape: float
    scale: float
    origin: float
    n_reference: int
    reference_period: tuple | None = None

    def cdf(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        z = d - self.origin
        out = np.zeros_like(z)
        pos = z > 0
        out[pos] = 1.0 / (1.0 + (self.scale / z[pos]) ** self.shape)
        return out

    def ppf(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return self.origin + self.scale * (q / (1.0 - q)) ** (1.0 / self.shape)

    @property
    def median(self) -> float:
        return self.origin + self.scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference_period"] = list(self.reference_period) if self.reference_period else None
        return d


def compute_water_balance(P, PET) -> pd.DataFrame:
    """Monthly water balance table with columns P, PET and D = P - PET."""
    index = P.index if isinstance(P, pd.Series) else None
    p = np.asarray(P, dtype=float)
    pet = np.asarray(PET, dtype=float)
    if p.shape != pet.shape:
        raise DataError(f"P has {p.size} values but PET has {pet.size}")
    if np.any(p < 0) or np.any(pet < 0):
        raise DataError("precipitation and PET must be non-negative")
    if np.any(~np.isfinite(p)) or np.any(~np.isfinite(pet)):
        raise DataError("precipitation and PET must be finite")
    return pd.DataFrame({"P": p, "PET": pet, "D": p - pet}, index=index)


def _alpha_pwms(x: np.ndarray) -> tuple[float, float, float]:
    """Unbiased estimates of E[X (1 - F)^s] for s = 0, 1, 2."""
    x = np.sort(x)
    n = x.size
    i = np.arange(1, n + 1, dtype=float)
    w0 = x.mean()
    w1 = np.sum((n - i) / (n - 1) * x) / n
    w2 = np.sum((n - i) * (n - i - 1) / ((n - 1) * (n - 2)) * x) / n
    return w0, w1, w2


def fit_reference_distribution(D, reference_period: tuple | None = None) -> SpeiModel:
    """Fit the log-logistic reference distribution by unbiased PWMs.

    The origin is pushed just below the sample minimum when the moment fit
    places it above, so every reference value lies inside the support.
    """
    x = np.asarray(D, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < MIN_REFERENCE:
        raise DataError(f"reference series has {x.size} values; at least {MIN_REFERENCE} needed")
    if np.ptp(x) == 0:
        raise DataError("reference series is constant; the distribution is degenerate")
    w0, w1, w2 = _alpha_pwms(x)
    denom = 6.0 * w1 - w0 - 6.0 * w2
    if denom == 0:
        raise EstimationError("probability-weighted moments are degenerate")
    shape = (2.0 * w1 - w0) / denom
    if not shape > 1.0:
        raise EstimationError(f"fitted shape {shape:.4g} is not > 1; log-logistic fit invalid")
    g = special.gamma(1.0 + 1.0 / shape) * special.gamma(1.0 - 1.0 / shape)
    scale = (w0 - 2.0 * w1) * shape / g
    if not scale > 0:
        raise EstimationError(f"fitted scale {scale:.4g} is not positive")
    origin = w0 - scale * g
    lo = float(x.min())
    if origin >= lo:
        origin = lo - 1e-6 * max(float(np.ptp(x)), 1.0)
        warnings.warn("fitted origin moved below the reference minimum", EstimationWarning,
                      stacklevel=2)
    return SpeiModel(float(shape), float(scale), float(origin), int(x.size),
                     tuple(reference_period) if reference_period else None)


def standardize_to_spei(D, model: SpeiModel) -> np.ndarray:
    """SPEI = Phi^-1(F(D)); probabilities are clamped to [1e-6, 1 - 1e-6]."""
    p = model.cdf(D)
    low = p < CDF_FLOOR
    high = p > CDF_CEIL
    if low.any() or high.any():
        below = int(np.sum(np.asarray(D, dtype=float) <= model.origin))
        warnings.warn(
            f"clamped {int(low.sum() + high.sum())} cumulative probabilities "
            f"({below} values at or below the distribution origin)",
            EstimationWarning, stacklevel=2)
    p = np.clip(p, CDF_FLOOR, CDF_CEIL)
    return stats.norm.ppf(p)


# ---- growing-season windows -------------------------------------------------

def _as_date(d) -> dt.date:
    if isinstance(d, dt.datetime):
        return d.date()
    if isinstance(d, dt.date):
        return d
    try:
        return pd.Timestamp(d).date()
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable date {d!r}") from exc


def growing_season_window(prev_interview, curr_interview,
                          growing_months: Iterable[int]) -> list[tuple[int, int]]:
    """Growing months whose 15th falls strictly between the two interview dates."""
    start, end = _as_date(prev_interview), _as_date(curr_interview)
    if not start < end:
        raise DataError(f"interview dates out of order: {start} then {end}")
    months = set(int(m) for m in growing_months)
    if not months or not months <= set(range(1, 13)):
        raise ConfigError(f"growing months must be a non-empty subset of 1..12, got {sorted(months)}")
    out = []
    y, m = start.year, start.month
    while (y, m) <= (end.year, end.month):
        mid = dt.date(y, m, 15)
        if m in months and start < mid < end:
            out.append((y, m))
        m += 1
        if m == 13:
            y, m = y + 1, 1
    return out


def aggregate_growing_season(spei_months: Mapping[tuple[int, int], float] | pd.Series,
                             window: Sequence[tuple[int, int]], reversed: bool = True) -> float:
    """Mean monthly SPEI over the window; negated when ``reversed`` so that higher is drier."""
    if len(window) == 0:
        raise DataError("growing-season window is empty")
    vals = []
    for ym in window:
        try:
            v = spei_months[tuple(ym)]
        except KeyError:
            raise DataError(f"no SPEI value for {ym[0]}-{ym[1]:02d}") from None
        if not np.isfinite(v):
            raise DataError(f"SPEI for {ym[0]}-{ym[1]:02d} is missing")
        vals.append(float(v))
    mean = float(np.mean(vals))
    return -mean if reversed else mean


# ---- grid-level tables --------------------------------------------------------

def nearest_cell(cells: pd.DataFrame, lon: float, lat: float) -> str:
    """Id of the grid cell whose centre is closest to (lon, lat)."""
    d2 = (cells["lon"].to_numpy(float) - lon) ** 2 + (cells["lat"].to_numpy(float) - lat) ** 2
    return str(cells["cell_id"].iloc[int(np.argmin(d2))])


def spei_table(climate: pd.DataFrame, reference_period: tuple[int, int] | None = None,
               by_calendar_month: bool = True) -> tuple[pd.DataFrame, dict]:
    """SPEI per (cell, year, month) from columns cell_id, year, month and either
    P_mm and PET_mm or a precomputed ``spei`` column.

    Returns the table and the fitted models keyed by cell (and calendar month).
    """
    need = {"cell_id", "year", "month"}
    if not need <= set(climate.columns):
        raise DataError(f"climate table needs columns {sorted(need)}")
    df = climate.copy()
    df["cell_id"] = df["cell_id"].astype(str)
    df["year"] = df["year"].astype(int)
    df["month"] = df["month"].astype(int)
    if "spei" in df.columns:
        return df[["cell_id", "year", "month", "spei"]].reset_index(drop=True), {}
    if not {"P_mm", "PET_mm"} <= set(df.columns):
        raise DataError("climate table needs P_mm and PET_mm, or a precomputed spei column")
    df["D"] = compute_water_balance(df["P_mm"].to_numpy(), df["PET_mm"].to_numpy())["D"].to_numpy()
    df["spei"] = np.nan
    models = {}
    keys = ["cell_id", "month"] if by_calendar_month else ["cell_id"]
    for key, grp in df.groupby(keys, sort=True):
        ref = grp
        if reference_period is not None:
            ref = grp[(grp["year"] >= reference_period[0]) & (grp["year"] <= reference_period[1])]
        model = fit_reference_distribution(ref["D"].to_numpy(), reference_period)
        models[key if isinstance(key, tuple) else (key,)] = model
        df.loc[grp.index, "spei"] = standardize_to_spei(grp["D"].to_numpy(), model)
    return df[["cell_id", "year", "month", "spei"]].reset_index(drop=True), models


def household_treatment(spei: pd.DataFrame, cells: pd.DataFrame, windows: pd.DataFrame,
                        calendar: Mapping[str, Iterable[int]], reversed: bool = True) -> pd.DataFrame:
    """Growing-season SPEI per household wave.

    ``windows`` has unit_id, wave, prev_interview_date, curr_interview_date,
    region, lon, lat; ``calendar`` maps region to its growing months.
    """
    need = {"unit_id", "wave", "prev_interview_date", "curr_interview_date", "region", "lon", "lat"}
    if not need <= set(windows.columns):
        raise DataError(f"household window table needs columns {sorted(need)}")
    lookup = {(r.cell_id, r.year, r.month): r.spei for r in spei.itertuples(index=False)}
    rows = []
    for r in windows.itertuples(index=False):
        region = str(r.region)
        if region not in calendar:
            raise ConfigError(f"no crop calendar for region {region!r}")
        cell = nearest_cell(cells, float(r.lon), float(r.lat))
        window = growing_season_window(r.prev_interview_date, r.curr_interview_date, calendar[region])
        per_cell = {(y, m): lookup.get((cell, y, m), np.nan) for (y, m) in window}
        rows.append({
            "unit_id": r.unit_id,
            "wave": int(r.wave),
            "cell_id": cell,
            "n_months": len(window),
            "gs_spei": aggregate_growing_season(per_cell, window, reversed=reversed),
        })
    return pd.DataFrame(rows)
