import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from panelcf.panel import PanelMatrix, TreatmentPlan, build_mask

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_panel(values, units=None, times=None):
    values = np.asarray(values, dtype=float)
    n, t = values.shape
    units = units or [f"u{i:02d}" for i in range(n)]
    times = times or list(range(1, t + 1))
    return PanelMatrix(values, units, times)


def trailing_plan(panel, treated_rows, t0):
    """Plan where ``treated_rows`` adopt after time ``t0`` (a time id)."""
    return TreatmentPlan({panel.unit_ids[i]: t0 for i in treated_rows}, panel.unit_ids)


def trailing_mask(panel, treated_rows, t0):
    plan = trailing_plan(panel, treated_rows, t0)
    return build_mask(plan, *panel.shape, panel.time_ids)


def low_rank(n, t, r, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((n, r)) @ rng.standard_normal((r, t))
    return L + noise * rng.standard_normal((n, t))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    def record(criterion, passed, detail):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {status}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
