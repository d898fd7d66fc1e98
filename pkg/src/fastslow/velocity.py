"""Analytic mean-velocity fields u(x, t).

The resolved velocity is an input to the theory, not derived by it, so the
catalog is analytic: every entry has exact values, Jacobians and
divergences, which keeps integrator oracles exact.  All fields are bounded
with bounded derivatives on the periodic box (the rotation field is defined
about a center and is intended for short-horizon, non-wrapping tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "VelocityField",
    "ZeroField",
    "UniformField",
    "ShearField",
    "CellularField",
    "RotationField",
    "LinearField",
    "CallableField",
    "make_velocity_field",
]


class VelocityField:
    """Time-dependent vector field with analytic derivatives."""

    dim: int

    def __call__(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        jac = self.jacobian(x, t)
        return np.trace(jac, axis1=-2, axis2=-1)


@dataclass
class ZeroField(VelocityField):
    dim: int = 1

    def __call__(self, x, t=0.0):
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim,))


@dataclass
class UniformField(VelocityField):
    """Constant advection u = U."""

    velocity: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        self._u = np.asarray(self.velocity, dtype=float)
        self.dim = self._u.shape[0]

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._u, x.shape).copy()

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim,))


@dataclass
class ShearField(VelocityField):
    """Horizontal shear u = (U0 + U1 cos(2 pi n y / L), 0) in two dimensions."""

    base: float = 0.0
    amplitude: float = 1.0
    wavenumber: int = 1
    length: float = 2.0 * np.pi
    dim: int = 2

    def __post_init__(self):
        self._k = 2.0 * np.pi * self.wavenumber / self.length

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = self.base + self.amplitude * np.cos(self._k * x[..., 1])
        return out

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        jac = np.zeros(x.shape + (2,))
        jac[..., 0, 1] = -self.amplitude * self._k * np.sin(self._k * x[..., 1])
        return jac


@dataclass
class CellularField(VelocityField):
    """Taylor-Green cellular flow, divergence-free.

    u = U (sin(kx) cos(ky), -cos(kx) sin(ky)).
    """

    amplitude: float = 1.0
    wavenumber: int = 1
    length: float = 2.0 * np.pi
    dim: int = 2

    def __post_init__(self):
        self._k = 2.0 * np.pi * self.wavenumber / self.length

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        k = self._k
        out = np.empty_like(x)
        out[..., 0] = self.amplitude * np.sin(k * x[..., 0]) * np.cos(k * x[..., 1])
        out[..., 1] = -self.amplitude * np.cos(k * x[..., 0]) * np.sin(k * x[..., 1])
        return out

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        k = self._k
        cx, sx = np.cos(k * x[..., 0]), np.sin(k * x[..., 0])
        cy, sy = np.cos(k * x[..., 1]), np.sin(k * x[..., 1])
        jac = np.empty(x.shape + (2,))
        jac[..., 0, 0] = self.amplitude * k * cx * cy
        jac[..., 0, 1] = -self.amplitude * k * sx * sy
        jac[..., 1, 0] = self.amplitude * k * sx * sy
        jac[..., 1, 1] = -self.amplitude * k * cx * cy
        return jac


@dataclass
class RotationField(VelocityField):
    """Solid-body rotation about a center (not periodic; short-horizon tests)."""

    rate: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    dim: int = 2

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center)
        out = np.empty_like(x)
        out[..., 0] = -self.rate * (x[..., 1] - c[1])
        out[..., 1] = self.rate * (x[..., 0] - c[0])
        return out

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        jac = np.zeros(x.shape + (2,))
        jac[..., 0, 1] = -self.rate
        jac[..., 1, 0] = self.rate
        return jac


@dataclass
class LinearField(VelocityField):
    """u = A (x - center): linear test flows with closed-form trajectories."""

    matrix: tuple = ((0.0,),)
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        self._a = np.asarray(self.matrix, dtype=float)
        self.dim = self._a.shape[0]
        self._c = (
            np.zeros(self.dim) if self.center is None else np.asarray(self.center, dtype=float)
        )

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return (x - self._c) @ self._a.T

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._a, x.shape + (self.dim,)).copy()


class CallableField(VelocityField):
    """Wrap a plain callable; derivatives by central differences if needed."""

    def __init__(self, fn, dim: int, fd_step: float = 1e-6):
        self._fn = fn
        self.dim = dim
        self._h = fd_step

    def __call__(self, x, t=0.0):
        return np.asarray(self._fn(np.asarray(x, dtype=float), t), dtype=float)

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        jac = np.empty(x.shape + (self.dim,))
        for b in range(self.dim):
            dx = np.zeros(self.dim)
            dx[b] = self._h
            jac[..., :, b] = (self(x + dx, t) - self(x - dx, t)) / (2.0 * self._h)
        return jac


_CATALOG = {
    "zero": ZeroField,
    "uniform": UniformField,
    "shear": ShearField,
    "cellular": CellularField,
    "rotation": RotationField,
    "linear": LinearField,
}


def make_velocity_field(kind: str, dim: int, **params) -> VelocityField:
    """Instantiate a catalog field, checking dimensional compatibility."""
    if kind not in _CATALOG:
        raise ConfigError(
            f"unknown velocity kind '{kind}'; choose one of {sorted(_CATALOG)}"
        )
    if kind == "zero":
        return ZeroField(dim=dim)
    try:
        fld = _CATALOG[kind](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for velocity '{kind}': {exc}") from exc
    if fld.dim != dim:
        raise ConfigError(
            f"velocity '{kind}' has dimension {fld.dim}, expected {dim}"
        )
    return fld
