import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from climate_cf.errors import ConfigError, DataError
from climate_cf.panel import lag_columns
from climate_cf.synth import (MODIFIER_COLS, SynthConfig, TREATMENT_COL, generate_panel,
                              oracle_effect, oracle_tau)


def test_below_threshold_is_negative():
    cfg = SynthConfig(beta_asset=0.5, a_low=10.0)
    tau = oracle_tau(cfg, np.array([0.0, 5.0, 9.9]), 50.0, 0.0)
    assert np.all(tau < 0)
    assert np.all(oracle_tau(cfg, np.array([10.1, 40.0]), 50.0, 0.0) > 0)


def test_concave_in_lagged_shock():
    cfg = SynthConfig(beta_lag=0.1, beta_lag2=-0.2)
    wl = np.linspace(-2, 2, 41)
    tau = oracle_tau(cfg, 20.0, 50.0, wl)
    assert np.all(np.diff(tau, 2) < 0)


def test_asset_gradient_bounded_and_increasing():
    cfg = SynthConfig(beta_asset=1.0)
    a = np.linspace(0, 100, 201)
    tau = oracle_tau(cfg, a, 50.0, 0.0)
    assert np.all(np.diff(tau) >= 0) and np.all(np.abs(tau) < 1.0)


def test_a_high_fades_effect():
    cfg = SynthConfig(beta_asset=0.5, a_high=30.0)
    assert abs(oracle_tau(cfg, 95.0, 50.0, 0.0)) < 1e-3
    assert oracle_tau(cfg, 25.0, 50.0, 0.0) == oracle_tau(SynthConfig(beta_asset=0.5), 25.0, 50.0, 0.0)


def test_zero_betas_zero_effect():
    sp = generate_panel(SynthConfig(n_households=200, seed=1))
    assert np.all(sp.truth["tau"] == 0.0)


def test_base_rate():
    sp = generate_panel(SynthConfig(n_households=2000, n_waves=2, seed=4))
    y = sp.dataset.frame["migrant"]
    assert len(y) == 4000
    assert abs(y.mean() - 0.269) <= 0.02


def test_deterministic():
    a = generate_panel(SynthConfig(n_households=100, beta_asset=0.3, seed=9))
    b = generate_panel(SynthConfig(n_households=100, beta_asset=0.3, seed=9))
    pd.testing.assert_frame_equal(a.dataset.frame, b.dataset.frame)
    pd.testing.assert_frame_equal(a.truth, b.truth)
    c = generate_panel(SynthConfig(n_households=100, beta_asset=0.3, seed=10))
    assert not a.dataset.frame.equals(c.dataset.frame)


def test_truth_matches_oracle():
    cfg = SynthConfig(n_households=300, beta_0=0.05, beta_asset=0.3, beta_adapt=0.2,
                      beta_lag=0.05, beta_lag2=-0.05, seed=2)
    sp = generate_panel(cfg)
    lagged = lag_columns(sp.dataset, list(MODIFIER_COLS) + [TREATMENT_COL]).frame
    merged = lagged.merge(sp.truth, on=["hhid", "wave"])
    assert len(merged) == len(sp.truth) == 600
    oracle = np.array([oracle_effect(cfg, r) for r in merged.to_dict("records")])
    np.testing.assert_array_equal(oracle, merged["tau"].to_numpy())
    # the true ATE is the sample mean of the oracle
    assert sp.truth["tau"].mean() == pytest.approx(oracle.mean())


@given(st.floats(0, 100), st.floats(0, 100), st.floats(-2, 2))
def test_oracle_depends_on_x_only(a, c, wl):
    cfg = SynthConfig(beta_asset=0.4, beta_adapt=0.3, beta_lag=0.1, beta_lag2=-0.1)
    row = {"asset_index_lag": a, "adapt_index_lag": c, "gs_spei_lag": wl, "other": 1.0}
    assert oracle_effect(cfg, row) == oracle_effect(cfg, {**row, "other": -5.0})


def test_oracle_schema_mismatch():
    with pytest.raises(DataError, match="lacks"):
        oracle_effect(SynthConfig(), {"asset_index_lag": 1.0})


def test_clip_rate_limit():
    with pytest.raises(ConfigError, match="clipped"):
        generate_panel(SynthConfig(n_households=300, beta_0=2.0, seed=0))


@pytest.mark.parametrize("bad", [dict(p0=1.2), dict(a_low=10, a_high=5), dict(n_waves=1),
                                 dict(confounding=1.0)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        generate_panel(SynthConfig(**bad))


def test_from_dict_rejects_unknown():
    with pytest.raises(ConfigError, match="unknown"):
        SynthConfig.from_dict({"n_households": 10, "bogus": 1})
    assert SynthConfig.from_dict(SynthConfig(seed=3).to_dict()) == SynthConfig(seed=3)


def test_cell_regressions_recover_effect():
    # a moderate surface: clipping at 0.01/0.99 would attenuate the extreme cells
    cfg = SynthConfig(n_households=20_000, beta_0=0.1, beta_asset=0.3, beta_adapt=0.2, seed=7)
    sp = generate_panel(cfg)
    frame = sp.dataset.frame.merge(sp.truth, on=["hhid", "wave"])
    frame["hhid"] = frame["hhid"].astype(str)
    cells = pd.qcut(frame["tau"], 10, labels=False)
    for _, g in frame.groupby(cells):
        w = g["gs_spei"].to_numpy()
        y = g["migrant"].to_numpy()
        dw = w - w.mean()
        slope = dw @ (y - y.mean()) / (dw @ dw)
        se = np.sqrt(np.mean((y - y.mean() - slope * dw) ** 2) / (dw @ dw))
        assert abs(slope - g["tau"].mean()) < 4 * se
