import json
import re
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from climate_cf.cli import dispatch

SYNTH = {"synth": {"n_households": 120, "beta_0": 0.1, "beta_asset": 0.3, "seed": 4},
         "forest": {"num_trees": 20}, "confounder_forest": {"num_trees": 10},
         "tuning": {"confounder": [{"mtry": None}]}}


def _yaml(path, d):
    path.write_text(yaml.safe_dump(d))
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    cfg = _yaml(d / "in.yaml", SYNTH)
    assert dispatch(["synth", "--config", str(cfg), "--out", str(d / "data")]) == 0
    return d / "data"


@pytest.fixture(scope="module")
def fit_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = dispatch(["fit", "--config", str(synth_dir / "config.yaml"), "--out", str(out),
                     "--placebo-seed", "7"])
    assert code == 0
    return out


def _no_temp_files(d):
    return not [p for p in d.rglob("*") if p.name.startswith(".") or p.suffix == ".tmp"]


def test_synth_outputs(synth_dir):
    panel = pd.read_csv(synth_dir / "panel.csv")
    truth = pd.read_csv(synth_dir / "truth.csv")
    assert len(panel) == 360 and len(truth) == 240
    assert "tau" not in panel.columns
    cfg = yaml.safe_load((synth_dir / "config.yaml").read_text())
    assert cfg["data"] == "panel.csv" and cfg["roles"]["gs_spei"] == "treatment"
    assert cfg["forest"] == {"num_trees": 20}
    m = json.loads((synth_dir / "manifest.json").read_text())
    assert m["command"] == "synth" and 0 <= m["clip_rate"] <= 0.1


def test_fit_outputs(fit_dir):
    names = {p.name for p in fit_dir.iterdir()}
    assert {"effects.csv", "results.json", "manifest.json", "placebo"} <= names
    assert len([n for n in names if n.startswith("gate_")]) == 5
    assert len([n for n in names if n.startswith("heatmap_")]) == 10
    m = json.loads((fit_dir / "manifest.json").read_text())
    for key in ("version", "config_sha256", "data", "seeds", "wall_seconds", "warnings"):
        assert key in m
    assert m["data"]["source_sha256"]
    assert _no_temp_files(fit_dir)


def test_report(fit_dir, capsys):
    capsys.readouterr()
    assert dispatch(["report", "--out", str(fit_dir)]) == 0
    assert capsys.readouterr().out == ""
    text = (fit_dir / "report.txt").read_text()
    head = text.splitlines()[0]
    assert re.fullmatch(r"ATE -?\d+\.\d% \(SE \d+\.\d%\); per-row effects from -?\d+\.\d% "
                        r"to -?\d+\.\d% per treatment SD", head)
    assert len(re.findall(r"^group effects by ", text, re.M)) == 5
    assert (fit_dir / "placebo" / "report.txt").read_text().startswith("PLACEBO")
    assert dispatch(["report", "--out", str(fit_dir), "--stdout"]) == 0
    assert capsys.readouterr().out == text


def test_fit_placebo_equals_placebo(synth_dir, fit_dir, tmp_path):
    out = tmp_path / "p"
    assert dispatch(["placebo", "--config", str(synth_dir / "config.yaml"), "--out", str(out),
                     "--seed", "7"]) == 0
    a, b = fit_dir / "placebo", out / "placebo"
    for name in sorted(p.name for p in a.iterdir() if p.suffix == ".csv") + ["results.json"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    ma.pop("wall_seconds"), mb.pop("wall_seconds")
    assert ma == mb


def test_threads_do_not_change_results(synth_dir, fit_dir, tmp_path):
    out = tmp_path / "t"
    assert dispatch(["fit", "--config", str(synth_dir / "config.yaml"), "--out", str(out),
                     "--threads", "3"]) == 0
    assert (out / "effects.csv").read_bytes() == (fit_dir / "effects.csv").read_bytes()
    assert (out / "results.json").read_bytes() == (fit_dir / "results.json").read_bytes()


def test_synth_manifest_reproducible(tmp_path):
    cfg = _yaml(tmp_path / "c.yaml", SYNTH)
    for d in ("a", "b"):
        assert dispatch(["synth", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    ma, mb = (json.loads((tmp_path / d / "manifest.json").read_text()) for d in ("a", "b"))
    ma.pop("wall_seconds"), mb.pop("wall_seconds")
    assert ma == mb
    assert (tmp_path / "a" / "panel.csv").read_bytes() == (tmp_path / "b" / "panel.csv").read_bytes()


def test_stdout_only_with_flag(tmp_path, capsys):
    cfg = _yaml(tmp_path / "c.yaml", SYNTH)
    capsys.readouterr()
    dispatch(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")])
    assert capsys.readouterr().out == ""
    dispatch(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"), "--stdout"])
    out = capsys.readouterr().out
    assert out.startswith("hhid,wave,migrant")


def test_exit_codes(tmp_path, synth_dir, capsys):
    assert dispatch(["bogus"]) == 2
    assert dispatch([]) == 2
    assert dispatch(["fit"]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("forest: [unclosed")
    assert dispatch(["fit", "--config", str(bad)]) == 3
    assert dispatch(["fit", "--config", str(_yaml(tmp_path / "k.yaml", {
        "data": "x.csv", "roles": {"a": "outcome"}}))]) == 3
    cfg = yaml.safe_load((synth_dir / "config.yaml").read_text())
    missing = dict(cfg, data=str(tmp_path / "nope.csv"))
    assert dispatch(["fit", "--config", str(_yaml(tmp_path / "m.yaml", missing)),
                     "--out", str(tmp_path / "o1")]) == 4
    # a constant treatment leaves nothing to estimate and is rejected up front
    panel = pd.read_csv(synth_dir / "panel.csv")
    panel["gs_spei"] = 0.3
    panel.to_csv(tmp_path / "flat.csv", index=False)
    flat = dict(cfg, data=str(tmp_path / "flat.csv"))
    assert dispatch(["fit", "--config", str(_yaml(tmp_path / "f.yaml", flat)),
                     "--out", str(tmp_path / "o2")]) == 4
    err = capsys.readouterr().err
    assert "error:" in err
    assert dispatch(["report", "--out", str(tmp_path / "empty")]) == 4


def test_estimation_error_exit_code(synth_dir, tmp_path, monkeypatch):
    import climate_cf.cli as cli
    from climate_cf.errors import EstimationError, StageError

    def boom(*a, **k):
        raise StageError("causal_forest", EstimationError("treatment residuals have zero variation"))

    monkeypatch.setattr(cli, "run_pipeline", boom)
    assert dispatch(["fit", "--config", str(synth_dir / "config.yaml"),
                     "--out", str(tmp_path / "o")]) == 5


def test_refuses_mixed_output_dir(synth_dir):
    assert dispatch(["fit", "--config", str(synth_dir / "config.yaml"),
                     "--out", str(synth_dir)]) == 3


def test_index_subcommand(tmp_path):
    rng = np.random.default_rng(0)
    items = pd.DataFrame(rng.integers(0, 2, size=(50, 3)), columns=["tv", "radio", "bike"])
    items.to_csv(tmp_path / "items.csv", index=False)
    cfg = _yaml(tmp_path / "c.yaml", {"index": {"data": "items.csv",
                                                "indices": {"asset_index": ["tv", "radio", "bike"]}}})
    assert dispatch(["index", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = pd.read_csv(tmp_path / "o" / "indices.csv")
    assert out["asset_index"].min() == 0 and out["asset_index"].max() == 100
    model = json.loads((tmp_path / "o" / "index_models.json").read_text())["asset_index"]
    assert set(model) == {"items", "means", "sds", "loadings", "min", "max"}


def test_spei_subcommand(tmp_path):
    rng = np.random.default_rng(1)
    rows = [{"cell_id": "c1", "year": y, "month": m, "P_mm": rng.gamma(2.0, 40.0), "PET_mm": 60.0}
            for y in range(1981, 2019) for m in range(1, 13)]
    pd.DataFrame(rows).to_csv(tmp_path / "climate.csv", index=False)
    pd.DataFrame({"cell_id": ["c1"], "lon": [7.0], "lat": [9.0]}).to_csv(tmp_path / "cells.csv",
                                                                       index=False)
    pd.DataFrame({"unit_id": [1, 2], "wave": [2, 2], "prev_interview_date": ["2015-10-01"] * 2,
                  "curr_interview_date": ["2018-09-10", "2017-01-05"], "region": ["n", "n"],
                  "lon": [7.1, 6.9], "lat": [9.0, 9.1]}).to_csv(tmp_path / "win.csv", index=False)
    cfg = _yaml(tmp_path / "c.yaml", {"spei": {
        "climate": "climate.csv", "cells": "cells.csv", "windows": "win.csv",
        "calendar": {"n": [6, 7, 8, 9]}, "reference_period": [1981, 2010]}})
    assert dispatch(["spei", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    gs = pd.read_csv(tmp_path / "o" / "gs_spei.csv")
    assert gs["n_months"].tolist() == [11, 4]
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["command"] == "spei" and set(m["data"]) == {"climate", "cells", "windows"}
    assert dispatch(["spei", "--config", str(_yaml(tmp_path / "e.yaml", {"spei": {}}))]) == 3


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "climate_cf.cli", "bogus"], capture_output=True,
                       text=True)
    assert r.returncode == 2 and r.stdout == ""
