"""Deterministic fast-slow Lagrangian particle integration.

The slow particle obeys

    (Id + grad zeta(qbar)) qbar' = u(qbar + zeta(qbar), t) - (1/eps) sum_i lambda_i phi_i(qbar)

with the fast driver running at rate 1/eps^2.  The fast subsystem is stepped
at its own fixed fast step; the observables (lambda, c) are frozen across
each fast substep and the slow state advances by one explicit 4th-order step
per substep.  This operator splitting resolves the 1/eps^2 stiffness
explicitly; no discretization is prescribed by the theory.

Slow positions are tracked unwrapped (winding counts are recorded), so
endpoint statistics for homogenization experiments are meaningful; recorded
trajectory positions are reported inside the fundamental domain.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .drivers import FastDriver, ObservableChannel, observe
from .errors import (
    ConfigError,
    DimensionMismatchError,
    IntegrationDivergedError,
    NearSingularError,
    StepSizeGuardError,
)
from .modes import ModeBasis, grad_zeta_sup_bound, mean_map_jacobian
from .seeding import ROLE_ENSEMBLE, ROLE_INITIAL, substream
from .velocity import VelocityField

__all__ = [
    "CouplingSpec",
    "MultiscaleState",
    "TrajectoryRecord",
    "slow_rhs",
    "step_multiscale",
    "simulate_multiscale",
    "run_multiscale_ensemble",
]

STEP_GUARD_LIMIT = 0.1


@dataclass
class CouplingSpec:
    """How the displacement coefficients c evolve along the fast trajectory.

    ``frozen``: c stays at zero; the forcing reduces exactly to
    sum_i lambda_i phi_i(qbar).

    ``coupled``: c is read off the same driver trajectory as lambda but from
    distinct observable channels, clipped to per-mode caps.  Evolving c as a
    bounded zero-mean observable (rather than integrating the displacement
    velocity, which would random-walk without bound) keeps the
    diffeomorphism invariant enforceable.
    """

    kind: str = "frozen"
    channels: tuple[ObservableChannel, ...] = ()
    caps: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("frozen", "coupled"):
            raise ConfigError(f"coupling kind must be frozen|coupled, got {self.kind!r}")
        if self.kind == "coupled":
            if not self.channels:
                raise ConfigError("coupled displacement requires observable channels")
            if self.caps is None:
                bounds = [ch.bound for ch in self.channels]
                if any(b is None for b in bounds):
                    raise ConfigError(
                        "coupled displacement channels need bounds or explicit caps"
                    )
                self.caps = np.asarray(bounds, dtype=float)
            else:
                self.caps = np.asarray(self.caps, dtype=float)

    @property
    def frozen(self) -> bool:
        return self.kind == "frozen"

    def validate_against(self, basis: ModeBasis) -> float:
        """Reject configurations that cannot guarantee Id + grad zeta invertible.

        Returns the worst-case sup ||grad zeta|| bound.
        """
        if self.frozen:
            return 0.0
        if len(self.channels) != basis.n_modes:
            raise ConfigError(
                f"{len(self.channels)} coefficient channels for {basis.n_modes} modes"
            )
        bound = grad_zeta_sup_bound(basis, self.caps)
        if bound >= 1.0:
            raise NearSingularError(
                f"worst-case sup ||grad zeta|| = {bound:.3f} >= 1: "
                "Id + grad zeta may become singular; reduce mode amplitudes or caps",
                op="coupling-validate",
            )
        return bound

    def coefficients(self, driver: FastDriver) -> np.ndarray | None:
        """Current displacement coefficients, or None when frozen."""
        if self.frozen:
            return None
        c = observe(driver.state, self.channels)
        return np.clip(c, -self.caps, self.caps)


@dataclass
class MultiscaleState:
    """Slow position(s), fast driver, displacement coefficients, clock and eps.

    ``qbar`` is kept unwrapped; shapes (d,) or (n, d) are both supported and
    the fast driver batch must match.
    """

    qbar: np.ndarray
    driver: FastDriver
    coeffs: np.ndarray | None
    t: float
    eps: float

    def __post_init__(self):
        self.qbar = np.asarray(self.qbar, dtype=float)
        if not 0.0 < self.eps <= 1.0:
            raise ConfigError(f"eps must lie in (0, 1], got {self.eps}")


def _forcing(basis: ModeBasis, q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """sum_i lambda_i phi_i(q) with lambda either shared (M,) or per-member (n, M)."""
    phi = basis.mode_matrix(basis.wrap(q))
    if lam.ndim == 1:
        return phi @ lam
    return np.einsum("ndm,nm->nd", phi, lam)


def _zeta(basis: ModeBasis, q: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    return _forcing(basis, q, coeffs)


def _rhs(
    basis: ModeBasis,
    u: VelocityField,
    q: np.ndarray,
    t: float,
    lam: np.ndarray,
    coeffs: np.ndarray | None,
    eps: float,
) -> np.ndarray:
    qw = basis.wrap(q)
    stiff = _forcing(basis, qw, lam) / eps
    if coeffs is None:
        return u(qw, t) - stiff
    zeta = _zeta(basis, qw, coeffs)
    drive = u(qw + zeta, t) - stiff
    cc = coeffs if coeffs.ndim == qw.ndim else np.broadcast_to(coeffs, qw.shape[:-1] + coeffs.shape)
    _, inv = mean_map_jacobian(basis, cc, qw)
    return np.einsum("...ab,...b->...a", inv, drive)


def slow_rhs(
    state: MultiscaleState, basis: ModeBasis, u: VelocityField
) -> np.ndarray:
    """Current slow velocity J^-1 [u(qbar + zeta, t) - (1/eps) sum lambda_i phi_i]."""
    lam = state.driver.observables()
    return _rhs(basis, u, state.qbar, state.t, lam, state.coeffs, state.eps)


def _rk4(basis, u, q, t, h, lam, coeffs, eps):
    k1 = _rhs(basis, u, q, t, lam, coeffs, eps)
    k2 = _rhs(basis, u, q + 0.5 * h * k1, t + 0.5 * h, lam, coeffs, eps)
    k3 = _rhs(basis, u, q + 0.5 * h * k2, t + 0.5 * h, lam, coeffs, eps)
    k4 = _rhs(basis, u, q + h * k3, t + h, lam, coeffs, eps)
    return q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _substep_plan(dt_slow: float, eps: float, driver: FastDriver) -> tuple[int, float]:
    """Split the fast span dt_slow/eps^2 into driver-sized substeps."""
    span = dt_slow / (eps * eps)
    natural = driver.natural_dt
    if driver.kind == "doubling_map":
        n_sub = int(round(span))
        if n_sub < 1 or abs(span - n_sub) > 1e-9 * max(1.0, span):
            raise ConfigError(
                "doubling_map driver requires dt_slow/eps^2 to be a positive integer "
                f"(got {span})",
                op="step_multiscale",
            )
        return n_sub, 1.0
    n_sub = max(1, math.ceil(span / natural - 1e-12))
    return n_sub, span / n_sub


def check_step_guard(
    dt_slow: float, eps: float, basis: ModeBasis, driver: FastDriver
) -> None:
    """Stiff-forcing step guard: dt_slow * sup||phi|| * sup|lambda| / eps <= 0.1."""
    if driver.n_channels != basis.n_modes:
        raise DimensionMismatchError(
            f"driver supplies {driver.n_channels} observable channels for "
            f"{basis.n_modes} modes"
        )
    forcing_bound = float(np.sum(basis.sup_norms() * driver.observable_bounds()))
    stiff = dt_slow * forcing_bound / eps
    if stiff > STEP_GUARD_LIMIT + 1e-12:
        raise StepSizeGuardError(
            f"dt_slow={dt_slow} too large: stiff-forcing number {stiff:.3f} > "
            f"{STEP_GUARD_LIMIT} (forcing bound {forcing_bound:.3f}, eps={eps})",
            op="step_multiscale",
            eps=eps,
        )


def step_multiscale(
    state: MultiscaleState,
    dt_slow: float,
    basis: ModeBasis,
    u: VelocityField,
    coupling: CouplingSpec | None = None,
    guard: bool = True,
) -> MultiscaleState:
    """Advance the coupled system by one slow step (in place).

    The fast driver advances by dt_slow/eps^2 of fast time in n_sub substeps;
    observables are sampled at substep times and held constant across each
    substep while the slow state takes one RK4 step.
    """
    coupling = coupling or CouplingSpec()
    if guard:
        check_step_guard(dt_slow, state.eps, basis, state.driver)
    n_sub, dt_fast = _substep_plan(dt_slow, state.eps, state.driver)
    h = dt_slow / n_sub
    q, t0 = state.qbar, state.t
    for j in range(n_sub):
        lam = state.driver.observables()
        coeffs = coupling.coefficients(state.driver)
        q = _rk4(basis, u, q, t0 + j * h, h, lam, coeffs, state.eps)
        state.driver.step(dt_fast)
    if not np.all(np.isfinite(q)):
        raise IntegrationDivergedError("slow-state", state.driver.step_count)
    state.qbar, state.t = q, t0 + dt_slow
    state.coeffs = coupling.coefficients(state.driver)
    return state


@dataclass
class TrajectoryRecord:
    """Recorded slow trajectory: wrapped positions plus winding counts.

    ``wrapped + windings * L`` reconstructs the continuous (unwrapped) path.
    """

    times: np.ndarray  # (K,)
    wrapped: np.ndarray  # (K, n, d)
    windings: np.ndarray  # (K, n, d) integer
    domain: tuple[float, ...]
    seed: int | None = None

    def unwrapped(self) -> np.ndarray:
        return self.wrapped + self.windings * np.asarray(self.domain)

    @property
    def n_members(self) -> int:
        return self.wrapped.shape[1]

    @property
    def dt(self) -> float:
        if len(self.times) < 2:
            return 0.0
        return float(self.times[1] - self.times[0])


def simulate_multiscale(
    state: MultiscaleState,
    basis: ModeBasis,
    u: VelocityField,
    coupling: CouplingSpec | None,
    dt_slow: float,
    t_final: float,
    output_stride: int = 1,
    seed: int | None = None,
) -> tuple[TrajectoryRecord, MultiscaleState]:
    """Integrate to t_final, recording every output_stride slow steps.

    Deterministic and reproducible from the seed that built the state.
    """
    n_steps = int(round(t_final / dt_slow))
    if abs(n_steps * dt_slow - t_final) > 1e-9 * max(1.0, abs(t_final)):
        raise ConfigError(
            f"t_final={t_final} is not an integer number of slow steps dt_slow={dt_slow}"
        )
    if output_stride < 1:
        raise ConfigError("output_stride must be >= 1")
    coupling = coupling or CouplingSpec()
    check_step_guard(dt_slow, state.eps, basis, state.driver)
    lengths = np.asarray(basis.lengths)
    times, wrapped, windings = [], [], []

    def record():
        times.append(state.t)
        q = np.atleast_2d(state.qbar)
        w = np.floor_divide(q, lengths).astype(np.int64)
        windings.append(w)
        wrapped.append(q - w * lengths)

    record()
    for i in range(1, n_steps + 1):
        step_multiscale(state, dt_slow, basis, u, coupling, guard=False)
        state.t = i * dt_slow
        if i % output_stride == 0 or i == n_steps:
            record()
    rec = TrajectoryRecord(
        times=np.asarray(times),
        wrapped=np.stack(wrapped, axis=0),
        windings=np.stack(windings, axis=0),
        domain=basis.lengths,
        seed=seed,
    )
    return rec, state


def _concat_records(parts: list[TrajectoryRecord]) -> TrajectoryRecord:
    return TrajectoryRecord(
        times=parts[0].times,
        wrapped=np.concatenate([p.wrapped for p in parts], axis=1),
        windings=np.concatenate([p.windings for p in parts], axis=1),
        domain=parts[0].domain,
        seed=parts[0].seed,
    )


def run_multiscale_ensemble(
    driver_factory,
    n_members: int,
    basis: ModeBasis,
    u: VelocityField,
    coupling: CouplingSpec | None,
    eps: float,
    dt_slow: float,
    t_final: float,
    output_stride: int = 1,
    seed: int = 0,
    initial: np.ndarray | str = "uniform",
    shared_driver: bool = False,
    chunk_size: int = 4096,
    threads: int = 1,
) -> TrajectoryRecord:
    """Integrate an ensemble of slow particles.

    ``driver_factory(rng, n)`` must return a fast driver carrying ``n``
    independent states (or a single state when ``n`` is None), burnt in and
    ready to sample.  Two ensemble flavors:

    * independent (default): every member owns a fast realization; the
      randomness of the homogenized limit comes from the fast initial
      conditions.  Used for weak-convergence experiments.
    * shared_driver: one fast realization advects all members, which differ
      only by their label (initial position).  This is the physical setting
      of the displacement-statistics pipeline: many particles, one flow.

    Members are processed in fixed-size chunks with per-chunk substreams, so
    results do not depend on the number of worker threads.
    """
    if n_members < 1:
        raise ConfigError("ensemble size must be >= 1")
    coupling = coupling or CouplingSpec()
    coupling.validate_against(basis)
    lengths = np.asarray(basis.lengths)

    def initial_positions(rng: np.random.Generator, n: int) -> np.ndarray:
        if isinstance(initial, str):
            if initial != "uniform":
                raise ConfigError(f"unknown initial-position rule {initial!r}")
            return rng.uniform(0.0, 1.0, size=(n, basis.dim)) * lengths
        x0 = np.asarray(initial, dtype=float)
        return np.broadcast_to(x0, (n, basis.dim)).copy()

    if shared_driver:
        rng_drv = substream(seed, ROLE_ENSEMBLE, 0)
        driver = driver_factory(rng_drv, None)
        x0 = initial_positions(substream(seed, ROLE_INITIAL, 0), n_members)
        state = MultiscaleState(
            qbar=x0, driver=driver, coeffs=coupling.coefficients(driver), t=0.0, eps=eps
        )
        rec, _ = simulate_multiscale(
            state, basis, u, coupling, dt_slow, t_final, output_stride, seed=seed
        )
        return rec

    chunks = [
        (ci, min(chunk_size, n_members - ci * chunk_size))
        for ci in range((n_members + chunk_size - 1) // chunk_size)
    ]

    def run_chunk(arg):
        ci, n = arg
        driver = driver_factory(substream(seed, ROLE_ENSEMBLE, ci + 1), n)
        x0 = initial_positions(substream(seed, ROLE_INITIAL, ci + 1), n)
        state = MultiscaleState(
            qbar=x0, driver=driver, coeffs=coupling.coefficients(driver), t=0.0, eps=eps
        )
        rec, _ = simulate_multiscale(
            state, basis, u, coupling, dt_slow, t_final, output_stride, seed=seed
        )
        return rec

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    return _concat_records(parts)
