import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from climate_cf.config import PipelineConfig
from climate_cf.synth import DEMOGRAPHIC_COLS, SynthConfig, generate_panel

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_numpy():
    with np.errstate(all="ignore"):
        yield


@pytest.fixture(scope="session")
def small_panel():
    return generate_panel(SynthConfig(n_households=150, beta_0=0.1, beta_asset=0.3,
                                      beta_adapt=0.2, seed=3))


@pytest.fixture(scope="session")
def small_config():
    return PipelineConfig(lag_confounders=DEMOGRAPHIC_COLS, forest={"num_trees": 40},
                          confounder_forest={"num_trees": 20}, seed=11)


@pytest.fixture
def no_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record_criterion(capsys):
    """Log one pass/fail line per acceptance criterion."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
