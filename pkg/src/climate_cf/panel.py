"""Role-tagged household panels: loading, validation, lagging, summary stats."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .errors import DataError

OUTCOME = "outcome"
TREATMENT = "treatment"
MODIFIER = "modifier"
CONFOUNDER = "confounder"
CLUSTER = "cluster"
UNIT_ID = "unit-id"
WAVE = "wave"
AUXILIARY = "auxiliary"

ROLES = (OUTCOME, TREATMENT, MODIFIER, CONFOUNDER, CLUSTER, UNIT_ID, WAVE, AUXILIARY)
REQUIRED_ROLES = (OUTCOME, TREATMENT, CLUSTER, UNIT_ID, WAVE)
# role-tagged columns that are always numeric
_NUMERIC_ROLES = (OUTCOME, TREATMENT, WAVE)
_KEY_ROLES = (UNIT_ID, CLUSTER)

LAG_SUFFIX = "_lag"
LAG_GAP = "lag_gap"


@dataclass(frozen=True)
class ColumnStats:
    name: str
    role: str
    mean: float | None
    sd: float | None
    min: float | None
    max: float | None


@dataclass(frozen=True)
class PanelDataset:
    """Immutable panel sorted by (unit, wave).

    Build through :func:`from_frame` or :func:`load_panel`; every method that
    changes data returns a new, re-validated dataset with fresh stats.
    """

    frame: pd.DataFrame
    roles: Mapping[str, str]
    categorical: frozenset[str] = frozenset()
    stats: tuple[ColumnStats, ...] = field(default=(), compare=False)
    meta: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.frame)

    def column_for(self, role: str) -> str:
        cols = [c for c, r in self.roles.items() if r == role]
        if len(cols) != 1:
            raise DataError(f"expected exactly one {role!r} column, found {cols}")
        return cols[0]

    def columns_with(self, role: str) -> list[str]:
        return [c for c in self.frame.columns if self.roles.get(c) == role]

    @property
    def outcome(self) -> str:
        return self.column_for(OUTCOME)

    @property
    def treatment(self) -> str:
        return self.column_for(TREATMENT)

    @property
    def unit_id(self) -> str:
        return self.column_for(UNIT_ID)

    @property
    def wave(self) -> str:
        return self.column_for(WAVE)

    @property
    def cluster(self) -> str:
        return self.column_for(CLUSTER)

    @property
    def n_units(self) -> int:
        return int(self.frame[self.unit_id].nunique())

    def values(self, col: str) -> np.ndarray:
        if col not in self.frame.columns:
            raise DataError(f"unknown column {col!r}")
        return self.frame[col].to_numpy()

    def stat(self, col: str) -> ColumnStats:
        for s in self.stats:
            if s.name == col:
                return s
        raise DataError(f"unknown column {col!r}")

    def with_columns(self, new: Mapping[str, Iterable], roles: Mapping[str, str] | None = None,
                     categorical: Iterable[str] = ()) -> "PanelDataset":
        frame = self.frame.copy()
        for name, vals in new.items():
            frame[name] = np.asarray(vals)
        all_roles = dict(self.roles)
        for name in new:
            all_roles.setdefault(name, AUXILIARY)
        all_roles.update(roles or {})
        return from_frame(frame, all_roles, self.categorical | set(categorical), meta=self.meta)

    def with_roles(self, roles: Mapping[str, str]) -> "PanelDataset":
        return from_frame(self.frame, {**self.roles, **roles}, self.categorical, meta=self.meta)

    def subset(self, mask) -> "PanelDataset":
        return from_frame(self.frame.loc[np.asarray(mask, dtype=bool)], self.roles,
                          self.categorical, meta=self.meta)

    def summary(self) -> dict:
        return {
            "n_rows": len(self),
            "n_units": self.n_units,
            "columns": [
                {"name": s.name, "role": s.role, "mean": s.mean, "sd": s.sd,
                 "min": s.min, "max": s.max}
                for s in self.stats
            ],
        }

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False)


def _compute_stats(frame: pd.DataFrame, roles: Mapping[str, str],
                   categorical: frozenset[str]) -> tuple[ColumnStats, ...]:
    out = []
    for col in frame.columns:
        role = roles.get(col, AUXILIARY)
        s = frame[col]
        if col in categorical or role in _KEY_ROLES or not pd.api.types.is_numeric_dtype(s):
            out.append(ColumnStats(col, role, None, None, None, None))
            continue
        v = s.to_numpy(dtype=float)
        sd = float(np.std(v, ddof=1)) if v.size > 1 else float("nan")
        out.append(ColumnStats(col, role, float(np.mean(v)), sd, float(np.min(v)), float(np.max(v))))
    return tuple(out)


def from_frame(frame: pd.DataFrame, roles: Mapping[str, str],
               categorical: Iterable[str] = (), meta: Mapping | None = None) -> PanelDataset:
    """Validate a frame against a role map and wrap it as a PanelDataset."""
    frame = frame.copy()
    categorical = frozenset(categorical)
    unknown = [c for c in roles if c not in frame.columns]
    if unknown:
        raise DataError(f"role map names columns missing from the data: {unknown}")
    bad = {c: r for c, r in roles.items() if r not in ROLES}
    if bad:
        raise DataError(f"unknown roles {bad}; valid roles are {list(ROLES)}")
    full_roles = {c: roles.get(c, AUXILIARY) for c in frame.columns}
    for role in REQUIRED_ROLES:
        cols = [c for c, r in full_roles.items() if r == role]
        if not cols:
            raise DataError(f"missing required role {role!r}")
        if len(cols) > 1:
            raise DataError(f"role {role!r} assigned to several columns: {cols}")
    if len(frame) == 0:
        raise DataError("dataset has no rows")

    tagged = [c for c, r in full_roles.items() if r != AUXILIARY]
    for col in tagged:
        if frame[col].isna().any():
            first = int(np.flatnonzero(frame[col].isna().to_numpy())[0])
            raise DataError(f"missing value in role-tagged column {col!r} (row {first})")

    for col in tagged:
        role = full_roles[col]
        if role in _KEY_ROLES or col in categorical:
            frame[col] = frame[col].astype(str)
            continue
        if role in _NUMERIC_ROLES or role in (MODIFIER, CONFOUNDER):
            converted = pd.to_numeric(frame[col], errors="coerce")
            if converted.isna().any():
                first = int(np.flatnonzero(converted.isna().to_numpy())[0])
                raise DataError(
                    f"unparseable cell in column {col!r}: {frame[col].iloc[first]!r} (row {first})")
            frame[col] = converted
    wave_col = [c for c, r in full_roles.items() if r == WAVE][0]
    unit_col = [c for c, r in full_roles.items() if r == UNIT_ID][0]
    waves = frame[wave_col].to_numpy(dtype=float)
    if not np.all(waves == np.round(waves)):
        raise DataError(f"wave column {wave_col!r} must hold integers")
    frame[wave_col] = waves.astype(np.int64)

    dup = frame.duplicated([unit_col, wave_col], keep=False)
    if dup.any():
        row = frame.loc[dup].iloc[0]
        raise DataError(
            f"duplicate (unit_id, wave) key: ({row[unit_col]}, {row[wave_col]})")
    frame = frame.sort_values([unit_col, wave_col], kind="stable").reset_index(drop=True)
    stats = _compute_stats(frame, full_roles, categorical)
    return PanelDataset(frame, full_roles, categorical, stats, dict(meta or {}))


def load_panel(path, role_map: Mapping[str, str], categorical: Iterable[str] = ()) -> PanelDataset:
    """Read a comma-separated UTF-8 table with a header row and validate it."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, sep=",", encoding="utf-8", dtype=str, keep_default_na=True)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    # numeric-looking auxiliary columns are converted for stats; tagged ones are
    # validated strictly in from_frame
    for col in frame.columns:
        if role_map.get(col, AUXILIARY) == AUXILIARY and col not in categorical:
            conv = pd.to_numeric(frame[col], errors="coerce")
            if not conv.isna().any():
                frame[col] = conv
    return from_frame(frame, role_map, categorical, meta={"source": str(path)})


def lag_columns(ds: PanelDataset, cols: Iterable[str], suffix: str = LAG_SUFFIX,
                roles: Mapping[str, str] | None = None) -> PanelDataset:
    """Attach each unit's previous-observed-wave values and drop rows with no predecessor.

    Gaps lag to the most recent earlier wave; ``lag_gap`` records the distance
    in waves. New columns are tagged auxiliary unless ``roles`` says otherwise.
    """
    cols = list(cols)
    unit, wave = ds.unit_id, ds.wave
    for c in cols:
        if c in (unit, wave):
            raise DataError(f"cannot lag the {ds.roles[c]} column {c!r}")
        if c not in ds.frame.columns:
            raise DataError(f"unknown column {c!r}")
    frame = ds.frame
    grouped = frame.groupby(unit, sort=False)
    prev_wave = grouped[wave].shift(1)
    keep = prev_wave.notna().to_numpy()
    new = {}
    for c in cols:
        new[c + suffix] = grouped[c].shift(1).to_numpy()[keep]
    out = frame.loc[keep].copy()
    for name, vals in new.items():
        out[name] = vals
    out[LAG_GAP] = (frame[wave] - prev_wave).to_numpy()[keep].astype(np.int64)
    if len(out) == 0:
        raise DataError("no unit has an earlier wave; the analysis set is empty")
    new_roles = dict(ds.roles)
    for c in cols:
        new_roles[c + suffix] = AUXILIARY
    new_roles[LAG_GAP] = AUXILIARY
    new_roles.update(roles or {})
    cat = set(ds.categorical) | {c + suffix for c in cols if c in ds.categorical}
    meta = dict(ds.meta)
    meta["lag_rule"] = "most recent earlier observed wave; gap recorded in lag_gap"
    return from_frame(out, new_roles, cat, meta=meta)


def standardize_stats(ds: PanelDataset, col: str) -> tuple[float, float]:
    """Sample mean and standard deviation (n - 1 denominator)."""
    v = np.asarray(ds.values(col), dtype=float)
    if v.size < 2:
        raise DataError(f"column {col!r} needs at least two values")
    if np.ptp(v) == 0:
        raise DataError(f"column {col!r} is constant (sd = 0)")
    sd = float(np.std(v, ddof=1))
    return float(np.mean(v)), sd


def write_summary(ds: PanelDataset, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(ds.summary(), indent=2, allow_nan=True))
