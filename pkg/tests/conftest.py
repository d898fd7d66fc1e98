"""Shared fixtures: expensive sample runs are computed once per session."""

import numpy as np
import pytest

from fastslow.drivers import (
    DoublingMap,
    ObservableChannel,
    OuSurrogate,
    autocorrelation,
    sample_invariant_measure,
)


@pytest.fixture(scope="session")
def ou_million():
    """10^6 observable samples of the unit OU surrogate (gamma=1, amplitude=1)."""
    drv = OuSurrogate(
        gamma=1.0, amplitude=1.0, rng=np.random.default_rng(2026), dt_fast=0.05
    )
    return sample_invariant_measure(drv, 1_000_000, burn_in=2_000)


@pytest.fixture(scope="session")
def ou_million_acf(ou_million):
    """Autocorrelation of the unit OU run out to 8 e-folding times."""
    return autocorrelation(ou_million.values, max_lag=170, dt=ou_million.sample_dt)


@pytest.fixture(scope="session")
def doubling_million():
    """10^6 doubling-map samples of the centered observable y - 1/2."""
    drv = DoublingMap(0.0, (ObservableChannel(0, center=0.5, bound=0.5),))
    drv._k = np.array(123_456_789_123_456_789 % (3**39), dtype=np.int64)
    return sample_invariant_measure(drv, 1_000_000)
