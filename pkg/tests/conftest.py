import numpy as np
import pytest

from clustinf.covmodel import CovarianceParams, cholesky, exp_cov
from clustinf.geometry import panel_locations
from clustinf.regression import PanelDataset


def make_panel(n_units=40, periods=2, p=2, iv=False, seed=0, theta=0.0, spatial=True):
    """Small two-period panel on random centroids in a 6x6 box."""
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0, 6, size=(n_units, 2))
    unit, period, coords = panel_locations(centroids, periods)
    n = unit.size
    w = rng.standard_normal((n, p))
    if spatial:
        chol = cholesky(exp_cov(CovarianceParams(0.0, 2.0, 1.0), coords, period))
        u = chol @ rng.standard_normal(n)
    else:
        u = rng.standard_normal(n)
    if iv:
        z = rng.standard_normal(n) + 0.3 * w[:, 0]
        v = 0.8 * u + 0.6 * rng.standard_normal(n)
        x = 2.0 * z + 0.5 * w[:, 1] + v
    else:
        z = None
        x = rng.standard_normal(n) + 0.5 * w[:, 0]
    y = 1.0 + theta * x + w @ np.linspace(0.2, -0.2, p) + u
    return PanelDataset(y=y, x=x, w=w, z=z, unit_id=unit, period=period, coords=coords)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ols_panel():
    return make_panel(seed=1)


@pytest.fixture(scope="session")
def iv_panel():
    return make_panel(seed=2, iv=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
