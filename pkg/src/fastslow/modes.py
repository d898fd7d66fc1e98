"""Spatial mode basis and the fluctuating displacement field.

The displacement field is expanded in trigonometric vector modes on a
periodic box,

    phi_i(x) = amplitude_i * cos(k_i . x + phase_i) * direction_i,

with integer wavevector indices (k = 2 pi n / L), so gradients and Hessians
are analytic and pairwise orthogonality under the domain-average inner
product holds whenever wavevector indices differ.  Low-wavenumber defaults
realize fields that vary slowly in space; amplitude caps keep
Id + grad(zeta) safely invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatchError, NearSingularError
from .seeding import ROLE_MODES, substream

__all__ = [
    "TrigMode",
    "ModeBasis",
    "DisplacementState",
    "eval_zeta",
    "dzeta_dt",
    "zeta_jacobian",
    "mean_map_jacobian",
    "centering_residual",
    "random_low_wavenumber_basis",
]

_ORTHOGONALITY_TOL = 1e-10


@dataclass(frozen=True)
class TrigMode:
    """One trigonometric vector mode with analytic derivatives."""

    wavevector: tuple[int, ...]  # integer indices n; k = 2 pi n / L
    amplitude: float = 1.0
    phase: float = 0.0
    direction: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise ConfigError("mode direction must be nonzero")
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "direction", tuple(d / n))
        if len(self.wavevector) != len(self.direction):
            raise DimensionMismatchError("wavevector and direction dimensions differ")


@dataclass
class ModeBasis:
    """M orthogonal spatial modes on a d-dimensional periodic box."""

    lengths: tuple[float, ...]  # box side lengths
    modes: tuple[TrigMode, ...]

    _k: np.ndarray = field(init=False, repr=False)  # (M, d) physical wavevectors
    _amp: np.ndarray = field(init=False, repr=False)  # (M,)
    _phase: np.ndarray = field(init=False, repr=False)  # (M,)
    _dir: np.ndarray = field(init=False, repr=False)  # (M, d)

    def __post_init__(self):
        self.lengths = tuple(float(l) for l in self.lengths)
        if any(l <= 0 for l in self.lengths):
            raise ConfigError("box side lengths must be positive")
        d = len(self.lengths)
        for m in self.modes:
            if len(m.wavevector) != d:
                raise DimensionMismatchError(
                    f"mode wavevector dimension {len(m.wavevector)} != domain dimension {d}"
                )
        L = np.asarray(self.lengths)
        self._k = 2.0 * np.pi * np.asarray([m.wavevector for m in self.modes], dtype=float) / L
        self._amp = np.asarray([m.amplitude for m in self.modes], dtype=float)
        self._phase = np.asarray([m.phase for m in self.modes], dtype=float)
        self._dir = np.asarray([m.direction for m in self.modes], dtype=float)
        self._check_orthogonality()

    @property
    def dim(self) -> int:
        return len(self.lengths)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Map positions into the fundamental domain [0, L)."""
        return np.mod(x, np.asarray(self.lengths))

    def mode_matrix(self, x: np.ndarray) -> np.ndarray:
        """Mode values Phi(x): shape (..., d, M), column i = phi_i(x)."""
        x = np.asarray(x, dtype=float)
        ph = x @ self._k.T + self._phase  # (..., M)
        vals = self._amp * np.cos(ph)  # (..., M)
        return vals[..., None, :] * self._dir.T  # (..., d, M)

    def mode_jacobians(self, x: np.ndarray) -> np.ndarray:
        """Gradients: shape (..., M, d, d), entry [m, a, b] = d phi_m,a / d x_b."""
        x = np.asarray(x, dtype=float)
        ph = x @ self._k.T + self._phase
        slope = -self._amp * np.sin(ph)  # (..., M)
        outer = self._dir[:, :, None] * self._k[:, None, :]  # (M, d, d)
        return slope[..., None, None] * outer

    def mode_hessians(self, x: np.ndarray) -> np.ndarray:
        """Second derivatives: (..., M, d, d, d), [m, a, b, c] = d2 phi_m,a / dx_b dx_c."""
        x = np.asarray(x, dtype=float)
        ph = x @ self._k.T + self._phase
        curv = -self._amp * np.cos(ph)  # (..., M)
        outer = (
            self._dir[:, :, None, None]
            * self._k[:, None, :, None]
            * self._k[:, None, None, :]
        )  # (M, d, d, d)
        return curv[..., None, None, None] * outer

    def sup_norms(self) -> np.ndarray:
        """Per-mode sup norm of |phi_i| (= amplitude)."""
        return np.abs(self._amp.copy())

    def gradient_sup_norms(self) -> np.ndarray:
        """Per-mode bound on the spectral norm of grad phi_i (= |A| ||k||)."""
        return np.abs(self._amp) * np.linalg.norm(self._k, axis=1)

    def _check_orthogonality(self) -> None:
        # Rectangle-rule quadrature on a uniform periodic grid is exact for
        # trigonometric products once the grid resolves the sum wavevectors.
        d = self.dim
        max_n = 0
        for m in self.modes:
            max_n = max(max_n, max(abs(int(n)) for n in m.wavevector))
        pts = max(8, 4 * max_n + 4)
        axes = [np.linspace(0.0, L, pts, endpoint=False) for L in self.lengths]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = self.mode_matrix(grid)  # (G, d, M)
        gram = np.einsum("gdi,gdj->ij", vals, vals) / grid.shape[0]
        off = gram - np.diag(np.diag(gram))
        worst = np.abs(off).max() if self.n_modes > 1 else 0.0
        if worst > _ORTHOGONALITY_TOL:
            raise ConfigError(
                f"modes are not pairwise orthogonal: max off-diagonal {worst:.2e}"
            )


def random_low_wavenumber_basis(
    dim: int,
    n_modes: int,
    lengths: tuple[float, ...] | None = None,
    amplitude: float = 0.5,
    max_wavenumber: int = 2,
    seed: int = 0,
) -> ModeBasis:
    """Generate distinct low-wavenumber modes with random phases/directions.

    Orthogonality is guaranteed by giving every mode a distinct wavevector
    index (the constant mode n = 0 is never produced here).
    """
    if lengths is None:
        lengths = (2.0 * np.pi,) * dim
    rng = substream(seed, ROLE_MODES)
    candidates = []
    ranges = [range(-max_wavenumber, max_wavenumber + 1)] * dim
    grids = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, dim)
    for n in grids:
        if np.any(n != 0):
            candidates.append(tuple(int(v) for v in n))
    # Keep one of each {n, -n} pair: cos modes at opposite wavevectors overlap.
    unique = []
    seen = set()
    for n in candidates:
        if n not in seen and tuple(-v for v in n) not in seen:
            seen.add(n)
            unique.append(n)
    if n_modes > len(unique):
        raise ConfigError(
            f"cannot place {n_modes} distinct modes with max wavenumber {max_wavenumber}"
        )
    order = rng.permutation(len(unique))
    modes = []
    for idx in order[:n_modes]:
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        modes.append(
            TrigMode(
                wavevector=unique[idx],
                amplitude=amplitude,
                phase=float(rng.uniform(0.0, 2.0 * np.pi)),
                direction=tuple(direction),
            )
        )
    return ModeBasis(lengths=lengths, modes=tuple(modes))


@dataclass
class DisplacementState:
    """Displacement coefficients c with the amplitude cap that bounds them.

    The cap guarantees sup_x ||grad zeta|| <= sum_i cap_i |A_i| ||k_i|| < 1,
    the sufficient condition for Id + grad zeta to stay invertible.
    """

    coeffs: np.ndarray
    amplitude_cap: np.ndarray | float = np.inf

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)

    def clipped(self) -> np.ndarray:
        return np.clip(self.coeffs, -np.asarray(self.amplitude_cap), np.asarray(self.amplitude_cap))


def grad_zeta_sup_bound(basis: ModeBasis, coeff_bounds: np.ndarray) -> float:
    """Worst-case sup_x ||grad zeta||_2 over |c_i| <= coeff_bounds."""
    return float(np.sum(np.abs(coeff_bounds) * basis.gradient_sup_norms()))


def eval_zeta(basis: ModeBasis, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Displacement zeta(x) = sum_i c_i phi_i(x); linear in the coefficients."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.n_modes:
        raise DimensionMismatchError(
            f"got {coeffs.shape[-1]} coefficients for {basis.n_modes} modes"
        )
    phi = basis.mode_matrix(basis.wrap(x))
    return np.einsum("...dm,...m->...d", phi, coeffs)


def dzeta_dt(basis: ModeBasis, observables: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Displacement velocity sum_i lambda_i phi_i(x) - same linear kernel as eval_zeta."""
    return eval_zeta(basis, observables, x)


def zeta_jacobian(basis: ModeBasis, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """grad zeta(x) = sum_i c_i grad phi_i(x), shape (..., d, d)."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.n_modes:
        raise DimensionMismatchError(
            f"got {coeffs.shape[-1]} coefficients for {basis.n_modes} modes"
        )
    jacs = basis.mode_jacobians(basis.wrap(x))
    return np.einsum("...mab,...m->...ab", jacs, coeffs)


_MIN_SINGULAR_VALUE = 1e-6


def mean_map_jacobian(
    basis: ModeBasis, coeffs: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """J = Id + grad zeta(x) and its inverse (direct solve).

    Raises near-singular when the smallest singular value of J drops below
    1e-6, reporting the offending position and coefficients.
    """
    gz = zeta_jacobian(basis, coeffs, x)
    jac = gz + np.eye(basis.dim)
    smin = np.linalg.svd(jac, compute_uv=False)[..., -1]
    if np.any(smin < _MIN_SINGULAR_VALUE):
        raise NearSingularError(
            f"Id + grad zeta nearly singular (min singular value {np.min(smin):.3e}) "
            f"at x={np.asarray(x)!r} with c={np.asarray(coeffs)!r}",
            op="mean_map_jacobian",
        )
    inv = np.linalg.solve(jac, np.broadcast_to(np.eye(basis.dim), jac.shape).copy())
    return jac, inv


def centering_residual(
    basis: ModeBasis,
    observables: np.ndarray,
    coeffs: np.ndarray | None,
    probes: np.ndarray,
) -> float:
    """Empirical centering defect max_x || mean_t J(x, c_t)^-1 Phi(x) lambda_t ||.

    A vanishing residual certifies that the fast forcing, pulled back to
    mean coordinates, has zero mean - the condition that makes the limit
    diffusive rather than drifting.  ``coeffs`` may be None (frozen
    displacement, J = Id) or a per-sample array aligned with
    ``observables``.
    """
    lam = np.asarray(observables, dtype=float)
    if lam.ndim != 2 or lam.shape[1] != basis.n_modes:
        raise DimensionMismatchError("observables must have shape (N, M)")
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if coeffs is not None:
        cs = np.asarray(coeffs, dtype=float)
        if cs.shape != lam.shape:
            raise DimensionMismatchError(
                "coefficient samples must align with observable samples"
            )
    worst = 0.0
    lam_mean = lam.mean(axis=0)
    for x in probes:
        phi = basis.mode_matrix(basis.wrap(x))  # (d, M)
        if coeffs is None:
            residual = phi @ lam_mean
        else:
            forcing = lam @ phi.T  # (N, d)
            _, inv = mean_map_jacobian(basis, cs, np.broadcast_to(x, (cs.shape[0], basis.dim)))
            residual = np.einsum("nab,nb->na", inv, forcing).mean(axis=0)
        worst = max(worst, float(np.linalg.norm(residual)))
    return worst
