"""Command-line entry point.

Exit codes: 0 success, 2 usage error or unknown subcommand, 3 configuration
error, 4 data error, 5 estimation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .composite import fit_index, score_index
from .config import PipelineConfig, dump_config, load_config, pipeline_config
from .errors import ClimateCFError, ConfigError, DataError
from .io import (atomic_write_csv, atomic_write_json, atomic_write_text, canonical_json,
                 file_fingerprint, text_fingerprint)
from .panel import load_panel
from .pipeline import run_pipeline, write_outputs
from .spei import household_treatment, spei_table
from .synth import DEMOGRAPHIC_COLS, SynthConfig, generate_panel, synth_roles

log = logging.getLogger("climate_cf")

SUBCOMMANDS = ("spei", "index", "fit", "placebo", "synth", "report")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="climate-cf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name, help_ in (
        ("spei", "growing-season SPEI per household wave"),
        ("index", "composite indices from item columns"),
        ("fit", "full estimation pipeline"),
        ("placebo", "pipeline rerun on a permuted treatment"),
        ("synth", "synthetic panel with known effects"),
        ("report", "text summary of a finished run"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML config file")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        s.add_argument("--placebo-seed", type=int, dest="placebo_seed",
                       help="also run the placebo pipeline with this permutation seed")
        s.add_argument("--stdout", action="store_true",
                       help="print the main table or report on stdout")
    return p


def _config(args, required: bool = True) -> tuple[dict, Path | None]:
    if args.config is None:
        if required:
            raise ConfigError(f"{args.command} needs --config")
        return {}, None
    return load_config(args.config), args.config.resolve().parent


def _manifest(command: str, effective: dict, inputs: dict, seeds: dict, times: dict,
              caught) -> dict:
    return {
        "tool": "climate-cf",
        "version": __version__,
        "command": command,
        "config": effective,
        "config_sha256": text_fingerprint(canonical_json(effective)),
        "data": inputs,
        "seeds": seeds,
        "wall_seconds": times,
        "warnings": [str(w.message) for w in caught],
    }


def _fingerprints(paths: dict) -> dict:
    return {k: {"path": str(v), "sha256": file_fingerprint(v)} for k, v in paths.items()}


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _path(base: Path | None, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() or base is None else base / p


# ---- subcommands ---------------------------------------------------------------

def cmd_spei(args, caught) -> int:
    raw, base = _config(args)
    sec = raw.get("spei")
    if not isinstance(sec, dict):
        raise ConfigError("config has no 'spei' section")
    for key in ("climate", "cells", "windows", "calendar"):
        if key not in sec:
            raise ConfigError(f"spei.{key} is required")
    t0 = time.perf_counter()
    paths = {k: _path(base, sec[k]) for k in ("climate", "cells", "windows")}
    climate, cells, windows = (_read_csv(paths[k]) for k in ("climate", "cells", "windows"))
    cells["cell_id"] = cells["cell_id"].astype(str)
    ref = sec.get("reference_period")
    table, models = spei_table(climate, tuple(ref) if ref else None,
                               by_calendar_month=bool(sec.get("by_calendar_month", True)))
    calendar = {str(k): list(v) for k, v in sec["calendar"].items()}
    treat = household_treatment(table, cells, windows, calendar,
                                reversed=bool(sec.get("reversed", True)))
    times = {"spei": round(time.perf_counter() - t0, 6)}
    out = args.out
    atomic_write_csv(out / "gs_spei.csv", treat)
    atomic_write_csv(out / "spei_monthly.csv", table)
    atomic_write_json(out / "spei_models.json",
                      {"|".join(map(str, k)): m.to_dict() for k, m in models.items()})
    atomic_write_json(out / "manifest.json",
                      _manifest("spei", sec, _fingerprints(paths), {}, times, caught))
    if args.stdout:
        sys.stdout.write(treat.to_csv(index=False, float_format="%.10g"))
    log.info("wrote %d household-wave treatments to %s", len(treat), out / "gs_spei.csv")
    return 0


def cmd_index(args, caught) -> int:
    raw, base = _config(args)
    sec = raw.get("index")
    if not isinstance(sec, dict) or "data" not in sec or "indices" not in sec:
        raise ConfigError("config needs an 'index' section with 'data' and 'indices'")
    t0 = time.perf_counter()
    path = _path(base, sec["data"])
    frame = _read_csv(path)
    models = {}
    for name, items in sec["indices"].items():
        model = fit_index(frame, items)
        frame[name] = score_index(model, frame)
        models[name] = model.to_dict()
    times = {"index": round(time.perf_counter() - t0, 6)}
    atomic_write_csv(args.out / "indices.csv", frame)
    atomic_write_json(args.out / "index_models.json", models)
    atomic_write_json(args.out / "manifest.json",
                      _manifest("index", sec, _fingerprints({"data": path}), {}, times, caught))
    if args.stdout:
        sys.stdout.write(frame.to_csv(index=False, float_format="%.10g"))
    log.info("wrote %d indices to %s", len(models), args.out / "indices.csv")
    return 0


def _pipeline_setup(args) -> tuple[PipelineConfig, object]:
    raw, base = _config(args)
    cfg = pipeline_config(raw, base)
    cfg = cfg.with_overrides(seed=args.seed, threads=args.threads)
    cfg.validate(require_roles=True)
    if not cfg.data:
        raise ConfigError("config key 'data' (panel CSV path) is required")
    ds = load_panel(cfg.data, cfg.roles, cfg.categorical)
    return cfg, ds


def _check_out_dir(out: Path, command: str) -> None:
    """Refuse to mix outputs of different subcommands under one manifest."""
    m = out / "manifest.json"
    if m.exists():
        try:
            prev = json.loads(m.read_text(encoding="utf-8")).get("command", "fit")
        except ValueError:
            prev = None
        if prev != command:
            raise ConfigError(f"{out} already holds {prev!r} outputs; choose another --out")


def cmd_fit(args, caught) -> int:
    _check_out_dir(args.out, "fit")
    cfg, ds = _pipeline_setup(args)
    if args.placebo_seed is not None:
        cfg = cfg.with_overrides(placebo_seed=args.placebo_seed)
    res = run_pipeline(ds, cfg)
    write_outputs(res, args.out)
    if cfg.placebo_seed is not None:
        write_outputs(run_pipeline(ds, cfg, placebo_seed=cfg.placebo_seed), args.out)
    if args.stdout:
        sys.stdout.write(report_text(args.out))
    log.info("ATE %.4g (SE %.4g); outputs in %s", res.effects.ate, res.effects.ate_se, args.out)
    return 0


def cmd_placebo(args, caught) -> int:
    cfg, ds = _pipeline_setup(args)
    # --seed names the permutation here; forests keep the config seed
    raw, base = _config(args)
    cfg = cfg.with_overrides(seed=pipeline_config(raw, base).seed)
    seed = args.seed if args.seed is not None else (args.placebo_seed if args.placebo_seed
                                                    is not None else cfg.placebo_seed)
    if seed is None:
        raise ConfigError("placebo needs --seed or placebo_seed in the config")
    cfg = cfg.with_overrides(placebo_seed=seed)
    res = run_pipeline(ds, cfg, placebo_seed=seed)
    out = write_outputs(res, args.out)
    if args.stdout:
        sys.stdout.write(report_text(out))
    log.info("placebo ATE %.4g (SE %.4g); outputs in %s", res.effects.ate, res.effects.ate_se, out)
    return 0


def cmd_synth(args, caught) -> int:
    raw, _ = _config(args, required=False)
    sec = dict(raw.get("synth") or {})
    if args.seed is not None:
        sec["seed"] = args.seed
    scfg = SynthConfig.from_dict(sec)
    t0 = time.perf_counter()
    sp = generate_panel(scfg)
    times = {"synth": round(time.perf_counter() - t0, 6)}
    out = args.out
    atomic_write_csv(out / "panel.csv", sp.dataset.frame)
    atomic_write_csv(out / "truth.csv", sp.truth)
    # a ready-to-run pipeline config; pipeline keys from the input config are kept
    fit_cfg = {k: v for k, v in raw.items() if k not in ("synth", "data", "roles", "categorical")}
    fit_cfg = {"data": "panel.csv", "roles": synth_roles(), "categorical": ["region"],
               "lag_confounders": list(DEMOGRAPHIC_COLS), **fit_cfg, "synth": scfg.to_dict()}
    atomic_write_text(out / "config.yaml", dump_config(fit_cfg))
    atomic_write_json(out / "manifest.json",
                      _manifest("synth", scfg.to_dict(), {}, {"seed": scfg.seed}, times, caught)
                      | {"clip_rate": sp.clip_rate})
    if args.stdout:
        sys.stdout.write(sp.dataset.frame.to_csv(index=False, float_format="%.10g"))
    log.info("wrote %d rows to %s (clipped probabilities: %.1f%%)", len(sp.dataset),
             out / "panel.csv", 100 * sp.clip_rate)
    return 0


_QUANTILE_KEYS = ("min", "p05", "p25", "p50", "p75", "p95", "max")


def _fmt_pct(v) -> str:
    return "NA" if v is None else f"{100 * v:.1f}%"


def report_text(out_dir: Path) -> str:
    """Headline line, effect-distribution quantiles and one table per modifier."""
    path = Path(out_dir) / "results.json"
    try:
        res = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    e = res["effects"]
    q = e["per_sd_quantiles"]
    lines = []
    if res.get("placebo"):
        lines.append(f"PLACEBO run (permutation seed {res.get('placebo_seed')})")
    lines.append(f"ATE {_fmt_pct(e['ate_per_sd'])} (SE {_fmt_pct(e['ate_se_per_sd'])}); "
                 f"per-row effects from {_fmt_pct(q['min'])} to {_fmt_pct(q['max'])} "
                 f"per treatment SD")
    lines.append(f"(per treatment unit: ATE {e['ate']:.4f}, SE {e['ate_se']:.4f}; "
                 f"treatment SD {e['treatment_sd']:.4f}; n = {e['n_rows']})")
    lines.append("effect quantiles per SD: " + ", ".join(
        f"{k} {_fmt_pct(q[k])}" for k in _QUANTILE_KEYS if k in q))
    share = e.get("share_ci_excluding_zero")
    if share is not None:
        lines.append(f"rows whose 95% interval excludes zero: {100 * share:.1f}%")
    for m, g in res["gates"].items():
        lines.append("")
        lines.append(f"group effects by {m} ({len(g['n'])} bins)")
        lines.append(f"  {'bin':>3}  {'lower':>10}  {'upper':>10}  {'n':>6}  {'effect/SD':>9}")
        for i, n in enumerate(g["n"]):
            lines.append(f"  {i + 1:>3}  {g['edges'][i]:>10.4g}  {g['edges'][i + 1]:>10.4g}  "
                         f"{n:>6}  {_fmt_pct(g['mean_tau_sd'][i]):>9}")
    if res.get("skipped_modifiers"):
        lines.append("")
        lines.append("constant modifiers without group tables: " + ", ".join(res["skipped_modifiers"]))
    return "\n".join(lines) + "\n"


def cmd_report(args, caught) -> int:
    text = report_text(args.out)
    atomic_write_text(args.out / "report.txt", text)
    placebo = args.out / "placebo" / "results.json"
    if placebo.exists():
        atomic_write_text(args.out / "placebo" / "report.txt", report_text(placebo.parent))
    if args.stdout:
        sys.stdout.write(text)
    log.info("wrote %s", args.out / "report.txt")
    return 0


_COMMANDS = {"spei": cmd_spei, "index": cmd_index, "fit": cmd_fit, "placebo": cmd_placebo,
             "synth": cmd_synth, "report": cmd_report}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return ConfigError.exit_code
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            code = _COMMANDS[args.command](args, caught)
        except ClimateCFError as exc:
            code = exc.exit_code
            print(f"error: {exc}", file=sys.stderr)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return code


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    np.seterr(all="ignore")
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
