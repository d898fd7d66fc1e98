"""Velocity catalog tests: values, Jacobians, divergences."""

import numpy as np
import pytest

from fastslow.errors import ConfigError
from fastslow.velocity import (
    CallableField,
    CellularField,
    LinearField,
    RotationField,
    ShearField,
    UniformField,
    ZeroField,
    make_velocity_field,
)


@pytest.mark.parametrize(
    "field",
    [
        ZeroField(dim=2),
        UniformField(velocity=(0.3, -1.0)),
        ShearField(base=0.2, amplitude=0.8),
        CellularField(amplitude=1.1, wavenumber=2),
        RotationField(rate=0.7, center=(1.0, 2.0)),
        LinearField(matrix=((0.1, 0.5), (-0.3, 0.2))),
    ],
)
def test_jacobian_matches_finite_differences(field):
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(4):
        x = rng.uniform(-2, 2, 2)
        jac = field.jacobian(x)
        fd = np.zeros((2, 2))
        for b in range(2):
            dx = np.zeros(2)
            dx[b] = h
            fd[:, b] = (field(x + dx) - field(x - dx)) / (2 * h)
        assert np.abs(jac - fd).max() < 1e-6


def test_cellular_divergence_free():
    f = CellularField(amplitude=2.0)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 2 * np.pi, (100, 2))
    assert np.abs(f.divergence(x)).max() < 1e-12


def test_catalog_lookup_and_validation():
    f = make_velocity_field("uniform", 2, velocity=(1.0, 2.0))
    assert np.allclose(f(np.zeros(2)), [1.0, 2.0])
    with pytest.raises(ConfigError):
        make_velocity_field("warp", 2)
    with pytest.raises(ConfigError):
        make_velocity_field("cellular", 3)


def test_callable_field_fd_jacobian():
    f = CallableField(lambda x, t: np.sin(x), dim=2)
    x = np.array([0.3, 1.0])
    assert np.abs(f.jacobian(x) - np.diag(np.cos(x))).max() < 1e-6


def test_batched_evaluation_shapes():
    f = CellularField()
    x = np.zeros((7, 2))
    assert f(x).shape == (7, 2)
    assert f.jacobian(x).shape == (7, 2, 2)
    assert f.divergence(x).shape == (7,)
