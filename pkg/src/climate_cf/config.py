"""Run configuration: one YAML file drives every subcommand."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, EstimationError
from .forest import ForestParams
from .io import canonical_json
from .panel import REQUIRED_ROLES, ROLES

_FOREST_KEYS = {f.name for f in fields(ForestParams)}


def forest_params(d: Mapping | None, seed: int | None = None) -> ForestParams:
    d = dict(d or {})
    unknown = set(d) - _FOREST_KEYS
    if unknown:
        raise ConfigError(f"unknown forest keys: {sorted(unknown)}")
    if seed is not None:
        d["seed"] = seed
    try:
        params = ForestParams(**d)
        params.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid forest parameters: {exc}") from exc
    except EstimationError as exc:
        raise ConfigError(str(exc)) from exc
    return params


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for ``fit``/``placebo``; file paths are resolved against the config's folder."""

    data: str | None = None
    roles: Mapping[str, str] = field(default_factory=dict)
    categorical: tuple[str, ...] = ()
    # modifiers are used at their previous-wave values; None means every modifier-role column
    modifiers: tuple[str, ...] | None = None
    lagged_treatment_modifier: bool = True
    # None means every confounder-role column
    confounders: tuple[str, ...] | None = None
    lag_confounders: tuple[str, ...] = ()
    fixed_effects: bool = True
    wave_dummies: bool = True
    orthogonalize: bool = True
    forest: Mapping[str, Any] = field(default_factory=dict)
    confounder_forest: Mapping[str, Any] = field(default_factory=dict)
    # out-of-bag selection grids; confounder forests choose mtry by default
    tuning: Mapping[str, Any] = field(default_factory=lambda: {
        "confounder": [{"mtry": None}, {"mtry": "all"}]})
    gate_bins: int = 10
    heatmap_bins: int = 4
    heatmap_pairs: tuple[tuple[str, str], ...] | None = None
    seed: int = 0
    placebo_seed: int | None = None
    threads: int = 1

    def validate(self, require_roles: bool = False) -> None:
        """``require_roles`` is set when the config itself is used to load data."""
        bad = {c: r for c, r in self.roles.items() if r not in ROLES}
        if bad:
            raise ConfigError(f"unknown roles {bad}; valid roles are {list(ROLES)}")
        for role in REQUIRED_ROLES if (require_roles or self.roles) else ():
            if role not in self.roles.values():
                raise ConfigError(f"config roles lack the required role {role!r}")
        if self.gate_bins < 2 or self.heatmap_bins < 2:
            raise ConfigError("gate_bins and heatmap_bins must be at least 2")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        forest_params(self.forest)
        forest_params(self.confounder_forest)
        for key in self.tuning:
            if key not in ("causal", "confounder"):
                raise ConfigError(f"unknown tuning section {key!r}; use 'causal' or 'confounder'")
            grid = self.tuning[key]
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"tuning.{key} must be a non-empty list of parameter sets")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    def with_overrides(self, **changes) -> "PipelineConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def _tuple(v):
    if v is None:
        return None
    if isinstance(v, str):
        return (v,)
    return tuple(tuple(x) if isinstance(x, list) else x for x in v)


def pipeline_config(d: Mapping, base_dir: Path | None = None) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    d = {k: v for k, v in d.items() if k in known}
    for k in ("categorical", "modifiers", "confounders", "lag_confounders", "heatmap_pairs"):
        if k in d:
            d[k] = _tuple(d[k])
    if d.get("categorical") is None:
        d.pop("categorical", None)
    if d.get("lag_confounders") is None:
        d.pop("lag_confounders", None)
    if d.get("data") and base_dir is not None and not Path(d["data"]).is_absolute():
        d["data"] = str(base_dir / d["data"])
    for k in ("roles", "forest", "confounder_forest", "tuning"):
        if d.get(k) is None:
            d.pop(k, None)
        elif not isinstance(d[k], Mapping):
            raise ConfigError(f"{k} must be a mapping")
    try:
        cfg = PipelineConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    """Parse a YAML config file into a plain mapping."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        d = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return d


def dump_config(d: Mapping) -> str:
    return yaml.safe_dump(dict(d), sort_keys=False, default_flow_style=False)
