"""Stochastic integrators for the homogenized slow dynamics.

Two conventions are exposed and never defaulted silently:

* Ito (Euler-Maruyama) for dX = Ubar(X) dt + sigma(X) dW -- the form the
  homogenized limit takes.
* Stratonovich (Heun predictor-corrector, midpoint in the noise) for the
  transport form dq = u dt + sum_i xi_i(q) o dW_i.  Heun converges to the
  Stratonovich solution without derivative evaluations of xi.

Particle density transport is realized as particle advection with a
Jacobian-determinant side integration: d(ln J) = div(u) dt + sum_i
div(xi_i) o dW_i, so the density proxy rho_0 / J_t expresses the stochastic
continuity equation particle-wise.  Total particle weight is a bookkeeping
identity and is conserved bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrationDivergedError
from .seeding import ROLE_SDE, substream
from .velocity import VelocityField

__all__ = [
    "SdeSpec",
    "euler_maruyama_step",
    "stratonovich_heun_step",
    "simulate_sde_ensemble",
    "SdeEnsembleReport",
    "advect_density_particles",
    "TransportResult",
    "sigma_rows_as_xi",
]


@dataclass
class SdeSpec:
    """Coefficient fields plus integration and ensemble parameters.

    ``drift(x, t)`` returns (..., d); ``sigma(x, t)`` returns (..., d, m).
    ``interpretation`` must be given explicitly: 'ito' or 'stratonovich'.
    """

    drift: object
    sigma: object
    interpretation: str
    dt: float
    t_final: float
    n_members: int = 1
    seed: int = 0
    x0: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        if self.interpretation not in ("ito", "stratonovich"):
            raise ConfigError(
                f"interpretation must be 'ito' or 'stratonovich', got {self.interpretation!r}"
            )
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.t_final < 0:
            raise ConfigError("t_final must be nonnegative")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))

    @property
    def dim(self) -> int:
        return self.x0.shape[-1]

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_final / self.dt))
        if abs(n * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ConfigError("t_final must be an integer number of steps dt")
        return n


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise IntegrationDivergedError(what, -1, f"non-finite {what} state")
    return x


def euler_maruyama_step(
    x: np.ndarray, spec: SdeSpec, dw: np.ndarray, t: float = 0.0
) -> np.ndarray:
    """One Ito step X + Ubar(X) dt + sigma(X) dW (dW already scaled by sqrt(dt))."""
    if spec.interpretation != "ito":
        raise ConfigError("euler_maruyama_step requires interpretation='ito'")
    sig = np.asarray(spec.sigma(x, t), dtype=float)
    out = x + spec.drift(x, t) * spec.dt + np.einsum("...dm,...m->...d", sig, dw)
    return _check_finite(out, "euler-maruyama")


def stratonovich_heun_step(
    q: np.ndarray,
    u_field,
    xi,
    dt: float,
    dw: np.ndarray,
    t: float = 0.0,
) -> np.ndarray:
    """Heun (midpoint-in-noise) step for dq = u dt + sum_i xi_i(q) o dW_i.

    ``xi(q, t)`` returns the stacked noise fields with shape (..., m, d)
    (row i is xi_i).  Predictor: q* = q + u(q) dt + xi(q) dW.  Corrector
    applies the averages (u(q) + u(q*)) / 2 and (xi(q) + xi(q*)) / 2 to the
    same increments, so the deterministic part is second order and the noise
    converges to the Stratonovich solution.
    """
    xi_q = np.asarray(xi(q, t), dtype=float)
    u_q = u_field(q, t)
    q_pred = q + u_q * dt + np.einsum("...md,...m->...d", xi_q, dw)
    u_mid = 0.5 * (u_q + u_field(q_pred, t + dt))
    xi_mid = 0.5 * (xi_q + np.asarray(xi(q_pred, t + dt), dtype=float))
    out = q + u_mid * dt + np.einsum("...md,...m->...d", xi_mid, dw)
    return _check_finite(out, "stratonovich-heun")


def sigma_rows_as_xi(sigma_fn):
    """Adapt a sigma(x, t) -> (..., d, d) field to stacked xi rows (..., m, d)."""

    def xi(x, t=0.0):
        return np.asarray(sigma_fn(x, t), dtype=float)

    return xi


@dataclass
class SdeEnsembleReport:
    """Endpoint statistics of an SDE ensemble, with standard errors."""

    mean: np.ndarray  # (d,)
    mean_stderr: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d)
    var_stderr: np.ndarray  # (d,)
    cdf_grid: np.ndarray  # (d, n_grid)
    cdf: np.ndarray  # (d, n_grid)
    n_members: int
    seed: int
    endpoints: np.ndarray | None = None  # (n, d) raw samples (optional)


def _ensemble_stats(ends: np.ndarray, seed: int, n_grid: int, keep: bool):
    n, d = ends.shape
    mean = ends.mean(axis=0)
    cov = np.cov(ends.T).reshape(d, d)
    mean_se = ends.std(axis=0, ddof=1) / np.sqrt(n)
    centered = ends - mean
    # stderr of the sample variance via the fourth moment
    m4 = (centered**4).mean(axis=0)
    var = centered.var(axis=0, ddof=0)
    var_se = np.sqrt(np.maximum(m4 - var**2, 0.0) / n)
    grid = np.empty((d, n_grid))
    cdf = np.empty((d, n_grid))
    for a in range(d):
        lo, hi = ends[:, a].min(), ends[:, a].max()
        pad = 1e-12 + 0.05 * (hi - lo)
        grid[a] = np.linspace(lo - pad, hi + pad, n_grid)
        cdf[a] = np.searchsorted(np.sort(ends[:, a]), grid[a], side="right") / n
    return SdeEnsembleReport(
        mean=mean,
        mean_stderr=mean_se,
        cov=cov,
        var_stderr=var_se,
        cdf_grid=grid,
        cdf=cdf,
        n_members=n,
        seed=seed,
        endpoints=ends if keep else None,
    )


def simulate_sde_ensemble(
    spec: SdeSpec, n_cdf_grid: int = 101, keep_endpoints: bool = True
) -> SdeEnsembleReport:
    """Integrate an ensemble and report endpoint moments and empirical CDF.

    The variate stream is a pure function of (seed, member index, step
    index): one (n, m) block of increments is drawn per step, member i
    reading column block i.  Reports are assembled in fixed order, so a
    given (spec, seed) is bit-reproducible.
    """
    rng = substream(spec.seed, ROLE_SDE)
    d = spec.dim
    x = np.broadcast_to(spec.x0, (spec.n_members, d)).astype(float).copy()
    # number of independent noises: columns of sigma
    m = np.asarray(spec.sigma(x[:1], 0.0), dtype=float).shape[-1]
    sqrt_dt = np.sqrt(spec.dt)
    t = 0.0
    if spec.interpretation == "stratonovich":
        xi = sigma_rows_as_xi(spec.sigma)
        for k in range(spec.n_steps):
            dw = rng.standard_normal((spec.n_members, m)) * sqrt_dt
            x = stratonovich_heun_step(x, spec.drift, xi, spec.dt, dw, t)
            t += spec.dt
    else:
        for k in range(spec.n_steps):
            dw = rng.standard_normal((spec.n_members, m)) * sqrt_dt
            x = euler_maruyama_step(x, spec, dw, t)
            t += spec.dt
    return _ensemble_stats(x, spec.seed, n_cdf_grid, keep_endpoints)


@dataclass
class TransportResult:
    """Advected particles with mass and Jacobian diagnostics."""

    positions: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)
    jacobians: np.ndarray  # (n,) flow-map Jacobian determinants J_t
    density_ratio: np.ndarray  # (n,) rho_t / rho_0 = 1 / J_t
    total_weight_initial: float
    total_weight_final: float

    @property
    def mass_conserved(self) -> bool:
        return self.total_weight_initial == self.total_weight_final


def advect_density_particles(
    positions: np.ndarray,
    weights: np.ndarray,
    u_field: VelocityField,
    xi_fields: list[VelocityField],
    dt: float,
    t_final: float,
    seed: int = 0,
) -> TransportResult:
    """Transport weighted particles along dq = u dt + sum_i xi_i(q) o dW_i.

    Positions advance by Stratonovich Heun steps; alongside each particle the
    log-Jacobian of the flow map is integrated with the same scheme,
    d(ln J) = div(u) dt + sum_i div(xi_i) o dW_i.  The recorded density proxy
    rho_t / rho_0 = 1 / J_t is the particle statement of the stochastic
    continuity equation; divergence-free fields keep J_t = 1.

    Total weight is exactly conserved: weights are never touched.
    """
    q = np.atleast_2d(np.asarray(positions, dtype=float)).copy()
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ConfigError("particle weights must be nonnegative")
    if w.shape[0] != q.shape[0]:
        raise ConfigError("weights must align with particle positions")
    n, d = q.shape
    m = len(xi_fields)
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigError("t_final must be an integer number of steps dt")
    total_before = float(np.sum(w))

    def xi(x, t=0.0):
        out = np.empty(x.shape[:-1] + (m, d))
        for i, f in enumerate(xi_fields):
            out[..., i, :] = f(x, t)
        return out

    rng = substream(seed, ROLE_SDE, 1)
    sqrt_dt = np.sqrt(dt)
    log_jac = np.zeros(n)
    t = 0.0

    def div_xi(x, tt):
        if m == 0:
            return np.zeros((x.shape[0], 0))
        return np.stack([f.divergence(x, tt) for f in xi_fields], axis=-1)

    for _ in range(n_steps):
        dw = rng.standard_normal((n, m)) * sqrt_dt
        # positions: Heun predictor/corrector
        xi_q = xi(q, t)
        u_q = u_field(q, t)
        q_pred = q + u_q * dt + np.einsum("nmd,nm->nd", xi_q, dw)
        u_mid = 0.5 * (u_q + u_field(q_pred, t + dt))
        xi_mid = 0.5 * (xi_q + xi(q_pred, t + dt))
        q_new = q + u_mid * dt + np.einsum("nmd,nm->nd", xi_mid, dw)
        # log-Jacobian: same scheme on the divergences
        div_u_mid = 0.5 * (u_field.divergence(q, t) + u_field.divergence(q_pred, t + dt))
        div_xi_mid = 0.5 * (div_xi(q, t) + div_xi(q_pred, t + dt))
        log_jac = log_jac + div_u_mid * dt + np.einsum("nm,nm->n", div_xi_mid, dw)
        q = q_new
        t += dt
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(log_jac)):
            raise IntegrationDivergedError("transport", n_steps)
    jac = np.exp(log_jac)
    return TransportResult(
        positions=q,
        weights=w,
        jacobians=jac,
        density_ratio=1.0 / jac,
        total_weight_initial=total_before,
        total_weight_final=float(np.sum(w)),
    )
