import datetime as dt
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats

from climate_cf.errors import DataError, EstimationWarning
from climate_cf.spei import (CDF_FLOOR, aggregate_growing_season, compute_water_balance,
                             fit_reference_distribution, growing_season_window,
                             household_treatment, nearest_cell, spei_table,
                             standardize_to_spei)

TRUE = dict(shape=2.5, scale=50.0, origin=-100.0)


def _draw(n, seed):
    # scipy's fisk is the log-logistic; it plays the independent generator
    return stats.fisk.rvs(c=TRUE["shape"], loc=TRUE["origin"], scale=TRUE["scale"], size=n,
                          random_state=np.random.default_rng(seed))


def test_water_balance():
    wb = compute_water_balance([100, 80], [100, 120])
    assert wb["D"].tolist() == [0.0, -40.0]
    months = np.arange(12.0)
    wb = compute_water_balance(months * 10, months)
    assert wb["D"].tolist() == (months * 9).tolist()


def test_water_balance_errors():
    with pytest.raises(DataError):
        compute_water_balance([1, 2], [1])
    with pytest.raises(DataError):
        compute_water_balance([-1, 2], [1, 1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_parameter_recovery(seed):
    m = fit_reference_distribution(_draw(10_000, seed))
    assert m.shape == pytest.approx(TRUE["shape"], rel=0.05)
    assert m.scale == pytest.approx(TRUE["scale"], rel=0.05)
    assert m.origin == pytest.approx(TRUE["origin"], rel=0.05)


def test_degenerate_series():
    with pytest.raises(DataError, match="constant"):
        fit_reference_distribution(np.full(40, 3.0))
    with pytest.raises(DataError):
        fit_reference_distribution(np.arange(10.0))


def test_median_maps_to_zero():
    m = fit_reference_distribution(_draw(2_000, 5))
    assert m.cdf(m.median) == pytest.approx(0.5, abs=1e-12)
    assert abs(standardize_to_spei(m.median, m)) < 1e-9


def test_reference_calibration():
    d = _draw(10_000, 9)
    s = standardize_to_spei(d, fit_reference_distribution(d))
    assert abs(s.mean()) < 0.05
    assert 0.9 <= s.std(ddof=1) <= 1.1


def test_below_support_is_clamped():
    m = fit_reference_distribution(_draw(1_000, 4))
    with pytest.warns(EstimationWarning, match="clamped"):
        s = standardize_to_spei([m.origin - 10.0], m)
    assert s[0] == pytest.approx(stats.norm.ppf(CDF_FLOOR))


@given(st.floats(-99.0, 1e4), st.floats(0.01, 100.0))
def test_spei_monotone(d, step):
    m = fit_reference_distribution(_draw(500, 1))
    a, b = m.cdf([d, d + step])
    assume(1e-6 < a and b < 1 - 1e-6)
    s = standardize_to_spei([d, d + step], m)
    assert s[0] < s[1]


def test_window_example():
    w = growing_season_window("2015-10-01", "2018-09-10", [6, 7, 8, 9])
    expected = [(y, m) for y in (2016, 2017) for m in (6, 7, 8, 9)] + [(2018, 6), (2018, 7),
                                                                       (2018, 8)]
    assert w == expected
    w = growing_season_window(dt.date(2015, 10, 1), dt.date(2018, 9, 20), [6, 7, 8, 9])
    assert w[-1] == (2018, 9)


def test_window_order():
    with pytest.raises(DataError):
        growing_season_window("2018-01-01", "2017-01-01", [6])


def test_aggregate():
    window = [(2016, 6), (2016, 7)]
    spei = {ym: 0.5 for ym in window}
    assert aggregate_growing_season(spei, window, reversed=True) == -0.5
    with pytest.raises(DataError):
        aggregate_growing_season(spei, [], reversed=True)
    with pytest.raises(DataError):
        aggregate_growing_season(spei, [(2016, 8)])


@given(st.lists(st.floats(-4, 4), min_size=1, max_size=24))
def test_aggregate_properties(vals):
    window = [(2000 + i // 12, i % 12 + 1) for i in range(len(vals))]
    spei = dict(zip(window, vals))
    fwd = aggregate_growing_season(spei, window, reversed=False)
    rev = aggregate_growing_season(spei, window, reversed=True)
    assert rev == -fwd
    assert min(vals) - 1e-12 <= fwd <= max(vals) + 1e-12


def test_household_treatment_end_to_end():
    rng = np.random.default_rng(0)
    rows = []
    for cell in ("a", "b"):
        for year in range(1981, 2019):
            for month in range(1, 13):
                p = rng.gamma(2.0, 40.0)
                rows.append({"cell_id": cell, "year": year, "month": month, "P_mm": p,
                             "PET_mm": 60.0})
    climate = pd.DataFrame(rows)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        table, models = spei_table(climate, (1981, 2010))
    assert len(models) == 24
    cells = pd.DataFrame({"cell_id": ["a", "b"], "lon": [5.0, 10.0], "lat": [8.0, 8.0]})
    assert nearest_cell(cells, 9.1, 7.0) == "b"
    windows = pd.DataFrame({"unit_id": [1], "wave": [3], "prev_interview_date": ["2015-10-01"],
                            "curr_interview_date": ["2018-09-10"], "region": ["north"],
                            "lon": [5.2], "lat": [8.1]})
    out = household_treatment(table, cells, windows, {"north": [6, 7, 8, 9]})
    sub = table[(table.cell_id == "a") & table.month.isin([6, 7, 8, 9])
                & (table.year.between(2016, 2018))]
    sub = sub[~((sub.year == 2018) & (sub.month == 9))]
    assert out["n_months"].iloc[0] == 11
    assert out["gs_spei"].iloc[0] == pytest.approx(-sub["spei"].mean())
