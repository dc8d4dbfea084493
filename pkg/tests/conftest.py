import time

import numpy as np
import pytest

from doblab.estimators import MkcConfig
from doblab.harness import (
    ImmKfDob,
    MkcKfDob,
    MonteCarloConfig,
    run_eta_sweep,
    run_monte_carlo,
)
from doblab.scenario import (
    DEFAULT_D_STAR,
    default_disturbance_profile,
    default_tracking_system,
)

ACCEPT_SEED = 20260810
ETA_GRID = tuple(float(np.exp(k)) for k in (0, 1, 2, 3, 20))
WINDOW = (1260, 1320)


@pytest.fixture(scope="session")
def tracking_setup():
    return default_tracking_system(), default_disturbance_profile()


@pytest.fixture(scope="session")
def eta_sweep_100(tracking_setup):
    """KF-DOB eta sweep, K=100 trials x 2000 steps (criterion 7 and friends)."""
    sys, profile = tracking_setup
    cfg = MonteCarloConfig(
        sys=sys, profile=profile, steps=2000, estimators=(),
        base_seed=ACCEPT_SEED, trials=100, window=WINDOW,
        x0_cov=1e-2 * np.eye(2), eta_grid=ETA_GRID, time_trials=False,
    )
    t0 = time.perf_counter()
    report, rows = run_eta_sweep(cfg, d_star=DEFAULT_D_STAR)
    return report, rows, time.perf_counter() - t0


@pytest.fixture(scope="session")
def remedies_100(tracking_setup):
    """MKCKF-DOB and IMMKF-DOB at the section-5.3 settings, paired with the sweep."""
    sys, profile = tracking_setup
    estimators = (
        MkcKfDob("mkckf_dob", DEFAULT_D_STAR * np.eye(1),
                 MkcConfig(sigma_d=[3.0])),
        ImmKfDob("immkf_dob",
                 (DEFAULT_D_STAR * np.eye(1),
                  float(np.exp(5)) * DEFAULT_D_STAR * np.eye(1)),
                 np.array([[0.98, 0.02], [0.5, 0.5]])),
    )
    cfg = MonteCarloConfig(
        sys=sys, profile=profile, steps=2000, estimators=estimators,
        base_seed=ACCEPT_SEED, trials=100, window=WINDOW,
        x0_cov=1e-2 * np.eye(2), time_trials=False,
    )
    t0 = time.perf_counter()
    report = run_monte_carlo(cfg)
    return report, time.perf_counter() - t0
