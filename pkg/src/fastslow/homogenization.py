"""Homogenized drift and diffusion estimation from fast-driver statistics.

The effective slow dynamics is an Ito SDE with

    drift:      Ubar(q) = < J^-1 u(q + zeta(q)) >  +  int_0^inf ds < (f0 . grad) f0(s) >
    diffusion:  (1/2) sigma sigma^T
                = int_0^inf ds sum_ij < lam_i(0) lam_j(s) J^-1 phi_i phi_j^T J^-T >

with f0 = -J^-1 sum_i lam_i phi_i and J = Id + grad zeta.  In frozen-zeta
mode (J = Id) both reduce to contractions of the time-integrated
autocorrelation G with the analytic modes; in full mode the J-dependent
factors are averaged over paired (c, lambda) samples jointly with the
lagged products.

The factor sigma is the symmetric PSD square root: sigma is only defined up
to right-orthogonal factors, and the symmetric root is basis-stable and
continuous in the diffusion matrix.  The noise fields xi_i are its rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drivers import (
    Acf,
    FixedLag,
    GreenKuboResult,
    TruncationRule,
    autocorrelation,
    green_kubo_integral,
)
from .errors import (
    ConfigError,
    DimensionMismatchError,
    ExtrapolationError,
    FileFormatError,
    NotPsdError,
)
from .modes import ModeBasis, mean_map_jacobian
from .velocity import VelocityField

__all__ = [
    "outer",
    "PairedSamples",
    "estimate_diffusion_tensor",
    "estimate_drift",
    "factor_diffusion",
    "extract_xi",
    "CoefficientEstimate",
    "CoefficientTable",
    "estimate_coefficients",
    "write_coefficients",
    "read_coefficients",
    "CoefficientField",
]


def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Outer product (a (x) b)_ij = a_i b_j of two equal-length vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionMismatchError(
            f"outer product needs equal-length vectors, got {a.shape} and {b.shape}"
        )
    return np.multiply.outer(a, b)


@dataclass
class PairedSamples:
    """Time-aligned (lambda, c) samples from one driver trajectory."""

    observables: np.ndarray  # (N, M)
    coeffs: np.ndarray | None  # (N, M) or None in frozen mode
    sample_dt: float

    def __post_init__(self):
        self.observables = np.asarray(self.observables, dtype=float)
        if self.observables.ndim != 2:
            raise DimensionMismatchError("observables must have shape (N, M)")
        if self.coeffs is not None:
            self.coeffs = np.asarray(self.coeffs, dtype=float)
            if self.coeffs.shape != self.observables.shape:
                raise DimensionMismatchError(
                    "coefficient samples must align with observable samples"
                )

    @property
    def n_samples(self) -> int:
        return self.observables.shape[0]


def _lagged_matrix_integrand(
    basis: ModeBasis, qbar: np.ndarray, samples: PairedSamples, n_lags: int
) -> np.ndarray:
    """Per-lag empirical < f0(0) (x) J(0)^-1 Phi lam(k) > matrices, shape (L+1, d, d).

    The Jacobian factor rides the base time: entry k averages
    (J^-1(t) Phi lam(t)) (x) (J^-1(t) Phi lam(t+k)) over t.
    """
    lam = samples.observables - samples.observables.mean(axis=0)
    n = lam.shape[0]
    phi = basis.mode_matrix(basis.wrap(qbar))  # (d, M)
    forcing = lam @ phi.T  # (N, d)
    if samples.coeffs is None:
        inv = None
        p = forcing
    else:
        _, inv = mean_map_jacobian(
            basis, samples.coeffs, np.broadcast_to(qbar, (n, basis.dim))
        )
        p = np.einsum("nab,nb->na", inv, forcing)
    out = np.empty((n_lags + 1, basis.dim, basis.dim))
    for k in range(n_lags + 1):
        if inv is None:
            lagged = forcing[k:]
        else:
            lagged = np.einsum("nab,nb->na", inv[: n - k], forcing[k:])
        out[k] = np.einsum("na,nb->ab", p[: n - k], lagged) / (n - k)
    return out


def estimate_diffusion_tensor(
    basis: ModeBasis,
    qbar: np.ndarray,
    acf: Acf | None = None,
    samples: PairedSamples | None = None,
    truncation: TruncationRule | None = None,
) -> tuple[np.ndarray, GreenKuboResult]:
    """Diffusion tensor D = (1/2) sigma sigma^T at a probe position.

    Frozen mode (pass ``acf``): D = sum_ij Gsym_ij phi_i(q) phi_j(q)^T with
    Gsym the symmetrized time-integrated autocorrelation.  Full mode (pass
    ``samples`` with coefficients): the J^-1 phi_i phi_j^T J^-T factor is
    averaged jointly with the lagged products.  The result is symmetrized.
    """
    qbar = np.asarray(qbar, dtype=float)
    if (acf is None) == (samples is None):
        raise ConfigError("pass exactly one of acf (frozen mode) or samples (full mode)")
    if acf is not None:
        if truncation is None:
            raise ConfigError("frozen-mode estimation requires a truncation rule")
        gk = green_kubo_integral(acf, truncation)
        phi = basis.mode_matrix(basis.wrap(qbar))  # (d, M)
        d_mat = phi @ gk.symmetrized @ phi.T
        return 0.5 * (d_mat + d_mat.T), gk

    if truncation is None:
        raise ConfigError("full-mode estimation requires a truncation rule")
    lagged_acf = autocorrelation(
        samples.observables, max_lag=_needed_lags(truncation), dt=samples.sample_dt
    )
    gk_meta = green_kubo_integral(lagged_acf, truncation)
    integrand = _lagged_matrix_integrand(basis, qbar, samples, gk_meta.lag_used)
    d_mat = np.trapezoid(integrand, dx=samples.sample_dt, axis=0)
    d_mat = 0.5 * (d_mat + d_mat.T)
    return d_mat, GreenKuboResult(
        matrix=gk_meta.matrix, lag_used=gk_meta.lag_used, time_used=gk_meta.time_used
    )


def _needed_lags(truncation: TruncationRule) -> int:
    if isinstance(truncation, FixedLag):
        return truncation.lag
    raise ConfigError(
        "full-mode estimation needs an explicit fixed-lag truncation window"
    )


def _grad_f0_frozen(basis: ModeBasis, qbar: np.ndarray) -> np.ndarray:
    """(M, d, d) stack of -grad phi_m at the probe (frozen-mode grad f0 pieces)."""
    return -basis.mode_jacobians(basis.wrap(qbar))


def _drift_correction_frozen(
    basis: ModeBasis, qbar: np.ndarray, acf: Acf, truncation: TruncationRule
) -> tuple[np.ndarray, GreenKuboResult]:
    """int_0^inf <(f0 . grad) f0(s)> ds = sum_ab G_ab (phi_a . grad) phi_b at the probe.

    Uses the unsymmetrized G: index a rides the time-0 factor, b the lagged,
    differentiated one.
    """
    gk = green_kubo_integral(acf, truncation)
    phi = basis.mode_matrix(basis.wrap(qbar))  # (d, M)
    grads = basis.mode_jacobians(basis.wrap(qbar))  # (M, d, d): [b, i, j] = d phi_b,i / dx_j
    # (phi_a . grad) phi_b, contracted against G_ab
    corr = np.einsum("ab,ja,bij->i", gk.matrix, phi, grads)
    return corr, gk


def _grad_f0_full(
    basis: ModeBasis,
    qbar: np.ndarray,
    coeffs: np.ndarray,
    lam: np.ndarray,
) -> np.ndarray:
    """Spatial gradient of f0 = -J^-1 Phi lam at the probe for each sample.

    grad f0 = J^-1 (grad J) J^-1 Phi lam - J^-1 grad(Phi lam); grad J uses
    the analytic mode Hessians.
    """
    n = lam.shape[0]
    x = np.broadcast_to(qbar, (n, basis.dim))
    phi = basis.mode_matrix(basis.wrap(qbar))  # (d, M)
    grads = basis.mode_jacobians(basis.wrap(qbar))  # (M, d, d)
    hess = basis.mode_hessians(basis.wrap(qbar))  # (M, d, d, d)
    _, inv = mean_map_jacobian(basis, coeffs, x)  # (n, d, d)
    forcing = lam @ phi.T  # (n, d)
    grad_forcing = np.einsum("nm,mij->nij", lam, grads)  # (n, d, d)
    grad_jac = np.einsum("nm,mibj->nibj", coeffs, hess)  # (n, d, d, d): d J_ib / dx_j
    jinv_f = np.einsum("nab,nb->na", inv, forcing)
    term1 = np.einsum("nia,nabj,nb->nij", inv, grad_jac, jinv_f)
    term2 = np.einsum("nia,naj->nij", inv, grad_forcing)
    return term1 - term2  # (n, d, d): [i, j] = d f0_i / dx_j


def estimate_drift(
    basis: ModeBasis,
    qbar: np.ndarray,
    u: VelocityField,
    acf: Acf | None = None,
    samples: PairedSamples | None = None,
    truncation: TruncationRule | None = None,
    t: float = 0.0,
) -> tuple[np.ndarray, GreenKuboResult]:
    """Homogenized drift Ubar(q): averaged mean flow plus fluctuation correction.

    The correction is the time-integrated form int_0^inf <(f0 . grad) f0(s)> ds
    evaluated by lagged sample averages and analytic mode derivatives.  In one
    dimension it equals (1/2) dD/dx: Stratonovich-type noise.
    """
    qbar = np.asarray(qbar, dtype=float)
    if (acf is None) == (samples is None):
        raise ConfigError("pass exactly one of acf (frozen mode) or samples (full mode)")

    if acf is not None:
        if truncation is None:
            raise ConfigError("frozen-mode estimation requires a truncation rule")
        mean_flow = u(basis.wrap(qbar), t)
        corr, gk = _drift_correction_frozen(basis, qbar, acf, truncation)
        return mean_flow + corr, gk

    if truncation is None:
        raise ConfigError("full-mode estimation requires a truncation rule")
    lam = samples.observables - samples.observables.mean(axis=0)
    n = lam.shape[0]
    lagged_acf = autocorrelation(lam, max_lag=_needed_lags(truncation), dt=samples.sample_dt)
    gk = green_kubo_integral(lagged_acf, truncation)

    if samples.coeffs is None:
        mean_flow = u(basis.wrap(qbar), t)
        corr, _ = _drift_correction_frozen(basis, qbar, lagged_acf, truncation)
        return mean_flow + corr, gk

    coeffs = samples.coeffs
    x = np.broadcast_to(qbar, (n, basis.dim))
    xw = basis.wrap(qbar)
    phi = basis.mode_matrix(xw)
    zeta = coeffs @ phi.T  # (n, d)
    _, inv = mean_map_jacobian(basis, coeffs, x)
    u_vals = u(xw + zeta, t)  # (n, d)
    mean_flow = np.einsum("nab,nb->na", inv, u_vals).mean(axis=0)

    forcing = lam @ phi.T
    f0 = -np.einsum("nab,nb->na", inv, forcing)  # (n, d)
    lag = gk.lag_used
    integrand = np.empty((lag + 1, basis.dim))
    for k in range(lag + 1):
        grad_f0_lag = _grad_f0_full(basis, qbar, coeffs[k:], lam[k:])
        integrand[k] = np.einsum("nij,nj->ni", grad_f0_lag, f0[: n - k]).mean(axis=0)
    corr = np.trapezoid(integrand, dx=samples.sample_dt, axis=0)
    return mean_flow + corr, gk


_PSD_CLIP_REL = 1e-4


def factor_diffusion(d2: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root sigma of D2 = sigma sigma^T.

    Eigenvalues are clipped at zero from below; a clip larger than
    1e-4 * ||D2|| signals estimator failure, not a numerical nit.
    """
    d2 = np.asarray(d2, dtype=float)
    if d2.ndim != 2 or d2.shape[0] != d2.shape[1]:
        raise DimensionMismatchError("factor_diffusion expects a square matrix")
    if np.abs(d2 - d2.T).max() > 1e-8:
        raise ConfigError("diffusion matrix must be symmetric within 1e-8")
    w, v = np.linalg.eigh(0.5 * (d2 + d2.T))
    clip = max(0.0, float(-w.min()))
    scale = float(np.abs(w).max())
    if clip > _PSD_CLIP_REL * max(scale, 1e-300):
        raise NotPsdError(
            f"negative eigenvalue {-clip:.3e} exceeds {_PSD_CLIP_REL} * ||D2||: "
            "diffusion estimate is not PSD",
            op="factor_diffusion",
            clip=clip,
        )
    sigma = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (sigma + sigma.T)


def extract_xi(sigma: np.ndarray, drop_tol: float = 1e-12) -> list[np.ndarray]:
    """Noise fields xi_i = rows of sigma; near-zero rows are dropped."""
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(np.isfinite(sigma)):
        raise ConfigError("sigma must be finite")
    return [row.copy() for row in sigma if np.linalg.norm(row) >= drop_tol]


@dataclass
class CoefficientEstimate:
    """Estimated SDE coefficients at one probe position."""

    at: np.ndarray  # (d,)
    drift: np.ndarray  # (d,)
    diffusion_matrix: np.ndarray  # (d, d), the value of sigma sigma^T
    sigma: np.ndarray  # (d, d)
    xi: list[np.ndarray]
    truncation_lag: float
    sample_count: int

    def validate(self) -> None:
        a = self.diffusion_matrix
        if np.abs(a - a.T).max() > 1e-10:
            raise ConfigError("diffusion matrix asymmetric beyond 1e-10")
        if np.abs(self.sigma @ self.sigma.T - a).max() > 1e-10:
            raise ConfigError("sigma sigma^T does not reconstruct the diffusion matrix")


@dataclass
class CoefficientTable:
    """Coefficients on a probe lattice, plus estimation metadata."""

    axes: list[np.ndarray]  # d arrays of strictly increasing probe coordinates
    entries: list[CoefficientEstimate]  # row-major over the lattice
    truncation_lag: float
    sample_count: int
    seed: int = 0

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)


def estimate_coefficients(
    basis: ModeBasis,
    axes: list[np.ndarray],
    u: VelocityField,
    acf: Acf | None = None,
    samples: PairedSamples | None = None,
    truncation: TruncationRule | None = None,
    seed: int = 0,
    sample_count: int = 0,
) -> CoefficientTable:
    """Estimate drift, diffusion, sigma and xi on a probe lattice."""
    axes = [np.asarray(a, dtype=float) for a in axes]
    if len(axes) != basis.dim:
        raise DimensionMismatchError(
            f"{len(axes)} probe axes for a {basis.dim}-dimensional domain"
        )
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, basis.dim)
    entries = []
    lag_time = 0.0
    n_used = sample_count
    for q in mesh:
        d_mat, gk = estimate_diffusion_tensor(
            basis, q, acf=acf, samples=samples, truncation=truncation
        )
        drift, _ = estimate_drift(
            basis, q, u, acf=acf, samples=samples, truncation=truncation
        )
        dm = 2.0 * d_mat  # diffusion_matrix stores sigma sigma^T
        sigma = factor_diffusion(dm)
        est = CoefficientEstimate(
            at=q.copy(),
            drift=drift,
            diffusion_matrix=dm,
            sigma=sigma,
            xi=extract_xi(sigma),
            truncation_lag=gk.time_used,
            sample_count=n_used,
        )
        est.validate()
        entries.append(est)
        lag_time = gk.time_used
    return CoefficientTable(
        axes=axes,
        entries=entries,
        truncation_lag=lag_time,
        sample_count=n_used,
        seed=seed,
    )


_COEFF_MAGIC = "fastslow-coefficients v1"


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=float).reshape(-1))


def write_coefficients(table: CoefficientTable, path) -> None:
    """Versioned self-describing text format; floats round-trip bit-exactly."""
    lines = [_COEFF_MAGIC]
    lines.append(f"dim {table.dim}")
    lines.append(f"truncation_lag {repr(float(table.truncation_lag))}")
    lines.append(f"sample_count {table.sample_count}")
    lines.append(f"seed {table.seed}")
    for a in table.axes:
        lines.append(f"axis {len(a)} {_fmt(a)}")
    lines.append(f"probes {len(table.entries)}")
    for e in table.entries:
        lines.append(f"at {_fmt(e.at)}")
        lines.append(f"drift {_fmt(e.drift)}")
        lines.append(f"diffusion {_fmt(e.diffusion_matrix)}")
        lines.append(f"sigma {_fmt(e.sigma)}")
        lines.append(f"xi {len(e.xi)} {_fmt(np.concatenate(e.xi) if e.xi else [])}".rstrip())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_coefficients(path) -> CoefficientTable:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _COEFF_MAGIC:
        raise FileFormatError(f"not a coefficient file: {path}")
    it = iter(lines[1:])

    def take(prefix):
        ln = next(it)
        if not ln.startswith(prefix + " "):
            raise FileFormatError(f"expected '{prefix} ...' line, got {ln!r}")
        return ln[len(prefix) + 1 :]

    dim = int(take("dim"))
    trunc = float(take("truncation_lag"))
    count = int(take("sample_count"))
    seed = int(take("seed"))
    axes = []
    for _ in range(dim):
        parts = take("axis").split()
        n = int(parts[0])
        axes.append(np.array([float(v) for v in parts[1 : n + 1]]))
    n_probes = int(take("probes"))
    entries = []
    for _ in range(n_probes):
        at = np.array([float(v) for v in take("at").split()])
        drift = np.array([float(v) for v in take("drift").split()])
        dm = np.array([float(v) for v in take("diffusion").split()]).reshape(dim, dim)
        sigma = np.array([float(v) for v in take("sigma").split()]).reshape(dim, dim)
        xi_parts = take("xi").split()
        n_xi = int(xi_parts[0])
        flat = np.array([float(v) for v in xi_parts[1:]])
        xi = [flat[i * dim : (i + 1) * dim] for i in range(n_xi)]
        entries.append(
            CoefficientEstimate(
                at=at,
                drift=drift,
                diffusion_matrix=dm,
                sigma=sigma,
                xi=xi,
                truncation_lag=trunc,
                sample_count=count,
            )
        )
    return CoefficientTable(
        axes=axes, entries=entries, truncation_lag=trunc, sample_count=count, seed=seed
    )


class CoefficientField:
    """Multilinear interpolation of lattice coefficients for SDE integration.

    Queries are restricted to the probe lattice hull: estimated coefficients
    outside the sampled region are meaningless, so extrapolation raises.
    """

    def __init__(self, table: CoefficientTable):
        self.table = table
        self._axes = [np.asarray(a) for a in table.axes]
        if any(len(a) < 2 for a in self._axes):
            raise ConfigError("interpolation needs at least 2 probes per axis")
        shape = table.shape
        d = table.dim
        self._drift = np.stack([e.drift for e in table.entries]).reshape(shape + (d,))
        self._sigma = np.stack([e.sigma for e in table.entries]).reshape(shape + (d, d))
        self.dim = d

    def _locate(self, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        idx, frac = [], []
        for a, ax in zip(range(self.dim), self._axes):
            xa = x[..., a]
            lo, hi = ax[0], ax[-1]
            tol = 1e-9 * max(1.0, abs(hi - lo))
            if np.any(xa < lo - tol) or np.any(xa > hi + tol):
                raise ExtrapolationError(
                    f"position outside probe lattice hull [{lo}, {hi}] on axis {a}",
                    op="coefficient-field",
                )
            xa = np.clip(xa, lo, hi)
            i = np.clip(np.searchsorted(ax, xa, side="right") - 1, 0, len(ax) - 2)
            idx.append(i)
            frac.append((xa - ax[i]) / (ax[i + 1] - ax[i]))
        return idx, frac

    def _interp(self, grid: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        idx, frac = self._locate(x)
        out = None
        for corner in range(1 << self.dim):
            weight = None
            sel = []
            for a in range(self.dim):
                bit = (corner >> a) & 1
                w = frac[a] if bit else (1.0 - frac[a])
                weight = w if weight is None else weight * w
                sel.append(idx[a] + bit)
            vals = grid[tuple(sel)]
            contrib = weight[..., None] if vals.ndim == x.ndim else weight[..., None, None]
            contrib = contrib * vals
            out = contrib if out is None else out + contrib
        return out

    def drift(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return self._interp(self._drift, x)

    def sigma(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return self._interp(self._sigma, x)
