"""Fast drivers: chaotic and surrogate dynamics supplying zero-mean observables.

Three driver kinds are provided:

* ``lorenz63``     -- the classical Lorenz system, the default strongly
  chaotic driver (RK4 at a fixed fast step).
* ``doubling_map`` -- the angle-doubling map on [0, 1), iterated in exact
  integer arithmetic so the orbit does not collapse in floating point.
* ``ou_surrogate`` -- an Ornstein-Uhlenbeck process stepped with its exact
  transition kernel.  It is stochastic, not chaotic; it is included because
  it is the only driver with closed-form time-integrated autocorrelations
  and therefore serves as the estimator oracle (oracle-only in production
  terms).

Driver state may be a single vector or a batch ``(n, dim)``; all stepping
is vectorized over the batch axis.  Observables are defined per channel as
``((y[coord] ** degree) - center) / scale + bias``; centered, variance
normalized coordinates are the default map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter

from .errors import (
    ConfigError,
    DimensionMismatchError,
    InsufficientLagsError,
    IntegrationDivergedError,
    TooFewSamplesError,
)

__all__ = [
    "ObservableChannel",
    "FastDriver",
    "Lorenz63",
    "DoublingMap",
    "OuSurrogate",
    "ObservableSamples",
    "Acf",
    "FixedLag",
    "FirstZeroCrossing",
    "GreenKuboResult",
    "step_driver",
    "sample_states",
    "sample_invariant_measure",
    "autocorrelation",
    "green_kubo_integral",
    "default_truncation",
    "channel_statistics",
    "calibrate_channels",
    "observe",
]

# Stability bound for the explicit RK4 Lorenz step.
LORENZ_MAX_DT = 0.02
# After burn-in the Lorenz trajectory must stay inside this norm ball.
LORENZ_NORM_BOUND = 100.0

# Doubling-map modulus: an odd power of three, so the multiplication-by-two
# orbit has period 2 * 3**38 and the exact rational orbit equidistributes.
_DOUBLING_MODULUS = 3**39


@dataclass(frozen=True)
class ObservableChannel:
    """One zero-mean observable channel of the fast state.

    ``bound`` is a magnitude bound on the channel value used by step-size
    guards; it is analytic where possible and calibrated otherwise.
    ``bias`` injects an artificial mean (diagnostic configs only).
    """

    coord: int = 0
    degree: int = 1
    center: float = 0.0
    scale: float = 1.0
    bias: float = 0.0
    bound: float | None = None


def observe(y: np.ndarray, channels: tuple[ObservableChannel, ...]) -> np.ndarray:
    """Evaluate observable channels on state(s) ``y`` of shape (..., dim)."""
    cols = []
    for ch in channels:
        v = y[..., ch.coord]
        if ch.degree != 1:
            v = v**ch.degree
        cols.append((v - ch.center) / ch.scale + ch.bias)
    return np.stack(cols, axis=-1)


class FastDriver:
    """Base class: fast dynamics plus its observable map."""

    kind = "abstract"

    def __init__(self, state: np.ndarray, channels: tuple[ObservableChannel, ...]):
        self.state = np.atleast_1d(np.asarray(state, dtype=float))
        self.channels = tuple(channels)
        self.step_count = 0

    @property
    def dim(self) -> int:
        return self.state.shape[-1]

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def natural_dt(self) -> float:
        """Fast-time length of one step at the driver's own step size."""
        raise NotImplementedError

    def observables(self) -> np.ndarray:
        return observe(self.state, self.channels)

    def observe_channels(self, channels: tuple[ObservableChannel, ...]) -> np.ndarray:
        return observe(self.state, channels)

    def observable_bounds(self) -> np.ndarray:
        bounds = [ch.bound for ch in self.channels]
        if any(b is None for b in bounds):
            raise ConfigError(
                "observable channels carry no magnitude bound; calibrate first",
                op="observable_bounds",
            )
        return np.asarray(bounds, dtype=float)

    def _advance(self, dt_fast: float) -> None:
        raise NotImplementedError

    def step(self, dt_fast: float) -> "FastDriver":
        self._advance(float(dt_fast))
        self.step_count += 1
        if not np.all(np.isfinite(self.state)):
            raise IntegrationDivergedError(self.kind, self.step_count)
        return self

    def copy(self) -> "FastDriver":
        raise NotImplementedError


def _lorenz_rhs(x, y, z, sigma, rho, beta):
    return sigma * (y - x), x * (rho - z) - y, x * y - beta * z


class Lorenz63(FastDriver):
    """Lorenz-63 with the classical parameters; fixed-step RK4."""

    kind = "lorenz63"

    def __init__(
        self,
        state=(1.0, 1.0, 1.0),
        channels=(ObservableChannel(0), ObservableChannel(1), ObservableChannel(2)),
        sigma: float = 10.0,
        rho: float = 28.0,
        beta: float = 8.0 / 3.0,
        dt_fast: float = 0.005,
    ):
        super().__init__(np.asarray(state, dtype=float), channels)
        if self.state.shape[-1] != 3:
            raise DimensionMismatchError("lorenz63 state must have dimension 3")
        if not 0 < dt_fast <= LORENZ_MAX_DT:
            raise ConfigError(
                f"lorenz63 dt_fast={dt_fast} outside stability bound (0, {LORENZ_MAX_DT}]"
            )
        self.sigma, self.rho, self.beta = float(sigma), float(rho), float(beta)
        self.dt_fast = float(dt_fast)

    @property
    def natural_dt(self) -> float:
        return self.dt_fast

    def _advance(self, dt_fast: float) -> None:
        if dt_fast > LORENZ_MAX_DT:
            raise ConfigError(
                f"lorenz63 step {dt_fast} exceeds stability bound {LORENZ_MAX_DT}"
            )
        if self.state.ndim == 1:
            self.state = np.array(
                _lorenz_rk4_scalar(
                    self.state[0], self.state[1], self.state[2],
                    dt_fast, self.sigma, self.rho, self.beta,
                )
            )
            return
        x, y, z = self.state[..., 0], self.state[..., 1], self.state[..., 2]
        h = dt_fast
        k1 = _lorenz_rhs(x, y, z, self.sigma, self.rho, self.beta)
        k2 = _lorenz_rhs(
            x + 0.5 * h * k1[0], y + 0.5 * h * k1[1], z + 0.5 * h * k1[2],
            self.sigma, self.rho, self.beta,
        )
        k3 = _lorenz_rhs(
            x + 0.5 * h * k2[0], y + 0.5 * h * k2[1], z + 0.5 * h * k2[2],
            self.sigma, self.rho, self.beta,
        )
        k4 = _lorenz_rhs(
            x + h * k3[0], y + h * k3[1], z + h * k3[2],
            self.sigma, self.rho, self.beta,
        )
        for i in range(3):
            self.state[..., i] += (h / 6.0) * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])

    def copy(self) -> "Lorenz63":
        c = Lorenz63(
            self.state.copy(), self.channels,
            self.sigma, self.rho, self.beta, self.dt_fast,
        )
        c.step_count = self.step_count
        return c


def _lorenz_rk4_scalar(x, y, z, h, sigma, rho, beta):
    # Plain-float path: ~10x faster than (3,) ndarray arithmetic in long loops.
    k1x, k1y, k1z = sigma * (y - x), x * (rho - z) - y, x * y - beta * z
    x2, y2, z2 = x + 0.5 * h * k1x, y + 0.5 * h * k1y, z + 0.5 * h * k1z
    k2x, k2y, k2z = sigma * (y2 - x2), x2 * (rho - z2) - y2, x2 * y2 - beta * z2
    x3, y3, z3 = x + 0.5 * h * k2x, y + 0.5 * h * k2y, z + 0.5 * h * k2z
    k3x, k3y, k3z = sigma * (y3 - x3), x3 * (rho - z3) - y3, x3 * y3 - beta * z3
    x4, y4, z4 = x + h * k3x, y + h * k3y, z + h * k3z
    k4x, k4y, k4z = sigma * (y4 - x4), x4 * (rho - z4) - y4, x4 * y4 - beta * z4
    return (
        x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x),
        y + (h / 6.0) * (k1y + 2 * k2y + 2 * k3y + k4y),
        z + (h / 6.0) * (k1z + 2 * k2z + 2 * k3z + k4z),
    )


class DoublingMap(FastDriver):
    """Angle doubling y -> 2y mod 1, iterated exactly on k/m rationals.

    Floating-point iteration of 2y mod 1 hits 0 after ~53 steps (the binary
    expansion shifts out); iterating k -> 2k mod m on integers with odd
    modulus m keeps the orbit exact and statistically faithful.  One step
    advances fast time by 1; dt_fast is ignored.
    """

    kind = "doubling_map"

    def __init__(self, state=0.3, channels=(ObservableChannel(0, center=0.5, bound=0.5),)):
        y = np.asarray(state, dtype=float)
        if np.any((y < 0.0) | (y >= 1.0)):
            raise ConfigError("doubling_map state must lie in [0, 1)")
        # 0-d for a single trajectory, (n,) for a batch; the trailing state
        # axis is added by the ``state`` property.  2k stays below 2**63 - 1
        # for the 3**39 modulus, so the batched step is safe in int64.
        self._k = np.round(y * _DOUBLING_MODULUS).astype(np.int64) % _DOUBLING_MODULUS
        self.channels = tuple(channels)
        self.step_count = 0

    @property
    def state(self) -> np.ndarray:
        return (self._k / _DOUBLING_MODULUS)[..., None]

    @property
    def natural_dt(self) -> float:
        return 1.0

    def _advance(self, dt_fast: float) -> None:
        # dt_fast ignored: one map iteration per step.
        self._k = (self._k << 1) % _DOUBLING_MODULUS

    def step(self, dt_fast: float) -> "DoublingMap":
        self._advance(float(dt_fast))
        self.step_count += 1
        return self

    def sample_orbit(self, n_steps: int) -> np.ndarray:
        """Advance n_steps and return all visited y values (current included)."""
        if self._k.size != 1:
            raise ConfigError("sample_orbit requires a single-trajectory driver")
        k = int(self._k.reshape(-1)[0])
        m = _DOUBLING_MODULUS
        out = np.empty(n_steps + 1, dtype=np.int64)
        for i in range(n_steps + 1):
            out[i] = k
            k = (k << 1) % m
        self._k = np.full_like(self._k, out[-1])
        self.step_count += n_steps
        return out / m

    def copy(self) -> "DoublingMap":
        c = DoublingMap(0.0, self.channels)
        c._k = self._k.copy()
        c.step_count = self.step_count
        return c


class OuSurrogate(FastDriver):
    """Scalar Ornstein-Uhlenbeck surrogate, stepped with the exact transition.

    dY = -gamma Y dt + amplitude dW; stationary variance amplitude^2/(2 gamma),
    stationary covariance C(s) = amplitude^2/(2 gamma) * exp(-gamma s).
    Consumes exactly one normal variate per state component per step.
    """

    kind = "ou_surrogate"

    def __init__(
        self,
        gamma: float = 1.0,
        amplitude: float = 1.0,
        state=0.0,
        channels=(ObservableChannel(0),),
        rng: np.random.Generator | None = None,
        dt_fast: float = 0.05,
    ):
        if gamma <= 0 or amplitude <= 0:
            raise ConfigError("ou_surrogate requires gamma > 0 and amplitude > 0")
        y = np.atleast_1d(np.asarray(state, dtype=float))
        if y.shape[-1] != 1:
            y = y[..., None]
        super().__init__(y, channels)
        self.gamma, self.amplitude = float(gamma), float(amplitude)
        self.dt_fast = float(dt_fast)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @property
    def natural_dt(self) -> float:
        return self.dt_fast

    @property
    def stationary_std(self) -> float:
        return self.amplitude / math.sqrt(2.0 * self.gamma)

    def _advance(self, dt_fast: float) -> None:
        a = math.exp(-self.gamma * dt_fast)
        b = self.amplitude * math.sqrt((1.0 - a * a) / (2.0 * self.gamma))
        eta = self.rng.standard_normal(self.state.shape)
        self.state = a * self.state + b * eta

    def transition_coefficients(self, dt_fast: float) -> tuple[float, float]:
        a = math.exp(-self.gamma * dt_fast)
        b = self.amplitude * math.sqrt((1.0 - a * a) / (2.0 * self.gamma))
        return a, b

    def copy(self) -> "OuSurrogate":
        c = OuSurrogate(
            self.gamma, self.amplitude, self.state.copy(), self.channels,
            rng=np.random.default_rng(), dt_fast=self.dt_fast,
        )
        c.rng.bit_generator.state = self.rng.bit_generator.state
        c.step_count = self.step_count
        return c


def step_driver(driver: FastDriver, dt_fast: float) -> FastDriver:
    """Advance the fast driver by one step of fast time dt_fast.

    Deterministic given (state, dt_fast, stream position); the OU surrogate
    consumes exactly one normal variate per component per step.
    """
    if dt_fast <= 0:
        raise ConfigError(f"dt_fast must be positive, got {dt_fast}", op="step_driver")
    return driver.step(dt_fast)


@dataclass
class ObservableSamples:
    """Observable time series lambda(y_t) with its sample means."""

    values: np.ndarray  # (N, M)
    mean: np.ndarray  # (M,)
    sample_dt: float  # fast time between consecutive samples

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]


def sample_states(
    driver: FastDriver, n_samples: int, burn_in: int = 0, stride: int = 1
) -> np.ndarray:
    """Record driver states (N, dim): burn, then sample every ``stride`` steps.

    The current (post-burn-in) state is recorded first, so a single sample
    with no burn-in is exactly the initial state.
    """
    if n_samples < 1:
        raise TooFewSamplesError("n_samples must be >= 1", op="sample_states")
    if stride < 1 or burn_in < 0:
        raise ConfigError("stride must be >= 1 and burn_in >= 0")
    dt = driver.natural_dt
    total = burn_in + (n_samples - 1) * stride

    if isinstance(driver, OuSurrogate) and driver.state.size == 1:
        path = _ou_path(driver, total)
        states = path[burn_in::stride][:, None]
    elif isinstance(driver, DoublingMap) and driver._k.size == 1:
        orbit = driver.sample_orbit(total)
        states = orbit[burn_in::stride][:, None]
    elif isinstance(driver, Lorenz63) and driver.state.ndim == 1:
        states = _lorenz_path(driver, total, burn_in, stride)
    else:
        rows = []
        for j in range(total + 1):
            if j >= burn_in and (j - burn_in) % stride == 0:
                rows.append(np.atleast_1d(driver.state).copy())
            if j < total:
                driver.step(dt)
        states = np.stack(rows, axis=0)

    if not np.all(np.isfinite(states)):
        raise IntegrationDivergedError(driver.kind, driver.step_count)
    return states


def sample_invariant_measure(
    driver: FastDriver,
    n_samples: int,
    burn_in: int = 0,
    stride: int = 1,
) -> ObservableSamples:
    """Empirical sample of the invariant measure through the observable map.

    Discards ``burn_in`` steps, then records observables every ``stride``
    steps.  The long-trajectory sample stands in for the abstract invariant
    measure: ergodic average = ensemble average.
    """
    states = sample_states(driver, n_samples, burn_in, stride)
    values = observe(states, driver.channels)
    return ObservableSamples(
        values=values, mean=values.mean(axis=0), sample_dt=driver.natural_dt * stride
    )


def _ou_path(driver: OuSurrogate, n_steps: int) -> np.ndarray:
    """States y_0..y_n of the exact OU chain, drawn as one variate block."""
    a, b = driver.transition_coefficients(driver.natural_dt)
    y0 = float(driver.state.reshape(-1)[0])
    if n_steps == 0:
        return np.array([y0])
    eta = driver.rng.standard_normal(n_steps)
    # y[k] = a*y[k-1] + b*eta[k]: a linear recurrence, evaluated by lfilter.
    tail = lfilter([b], [1.0, -a], eta, zi=np.array([a * y0]))[0]
    driver.state = np.array([tail[-1]])
    driver.step_count += n_steps
    return np.concatenate([[y0], tail])


def _lorenz_path(driver: Lorenz63, total: int, burn_in: int, stride: int) -> np.ndarray:
    x, y, z = (float(v) for v in driver.state)
    h, sig, rho, beta = driver.dt_fast, driver.sigma, driver.rho, driver.beta
    n_rec = (total - burn_in) // stride + 1
    out = np.empty((n_rec, 3))
    r = 0
    for j in range(total + 1):
        if j >= burn_in and (j - burn_in) % stride == 0:
            out[r, 0], out[r, 1], out[r, 2] = x, y, z
            r += 1
        if j < total:
            x, y, z = _lorenz_rk4_scalar(x, y, z, h, sig, rho, beta)
    driver.state = np.array([x, y, z])
    driver.step_count += total
    return out


def channel_statistics(
    driver: FastDriver,
    channels: tuple[ObservableChannel, ...],
    n_samples: int,
    burn_in: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel (mean, std, max-abs-deviation) over a calibration run.

    Statistics are taken of RAW channel values (center 0, scale 1, no bias)
    so callers can derive centers and scales from them.
    """
    raw = tuple(replace(ch, center=0.0, scale=1.0, bias=0.0) for ch in channels)
    probe = driver.copy()
    probe.channels = raw
    samples = sample_invariant_measure(probe, n_samples, burn_in=burn_in, stride=1)
    mean = samples.values.mean(axis=0)
    std = samples.values.std(axis=0)
    maxdev = np.abs(samples.values - mean).max(axis=0)
    return mean, std, maxdev


def calibrate_channels(
    driver: FastDriver,
    channels: tuple[ObservableChannel, ...],
    n_samples: int = 200_000,
    burn_in: int = 2_000,
    normalize: bool = True,
    bound_margin: float = 1.15,
) -> tuple[ObservableChannel, ...]:
    """Fill centers (empirical mean), scales (std, optional) and bounds.

    Guarantees the zero-mean observable requirement by construction, up to
    the sampling error of the calibration run.
    """
    mean, std, maxdev = channel_statistics(driver, channels, n_samples, burn_in)
    out = []
    for i, ch in enumerate(channels):
        scale = float(std[i]) if normalize else ch.scale
        if scale <= 0:
            raise ConfigError(f"channel {i} has zero variance; cannot normalize")
        out.append(
            replace(
                ch,
                center=float(mean[i]),
                scale=scale,
                bound=float(maxdev[i] / scale) * bound_margin,
            )
        )
    return tuple(out)


@dataclass
class Acf:
    """Matrix-valued autocorrelation C_ij(k dt) = <lambda_i(0) lambda_j(k dt)>."""

    values: np.ndarray  # (max_lag + 1, M, M)
    dt: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            raise DimensionMismatchError("Acf values must have shape (L+1, M, M)")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("Acf contains non-finite entries")
        c0 = self.values[0]
        if np.abs(c0 - c0.T).max() > 1e-10:
            raise ConfigError("C(0) must be symmetric within 1e-10")

    @property
    def max_lag(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def trace(self) -> np.ndarray:
        return np.trace(self.values, axis1=1, axis2=2)


def autocorrelation(samples: np.ndarray, max_lag: int, dt: float) -> Acf:
    """Empirical lagged covariance of an observable sequence.

    C_ij(k) = (1/(N-k)) sum_t lambda_i(t) lambda_j(t+k) after removing the
    sample means; C(0) is symmetrized.  Computed via FFT channel pair by
    channel pair (identical sums to the direct loop, up to roundoff).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    if max_lag < 1:
        raise ConfigError("max_lag must be >= 1", op="autocorrelation")
    if n <= 10 * max_lag:
        raise TooFewSamplesError(
            f"need more than 10*max_lag={10 * max_lag} samples, got {n}",
            op="autocorrelation",
        )
    x = x - x.mean(axis=0)
    nfft = 1 << int(np.ceil(np.log2(n + max_lag + 1)))
    spectra = np.fft.rfft(x, n=nfft, axis=0)
    counts = (n - np.arange(max_lag + 1)).astype(float)
    values = np.empty((max_lag + 1, m, m))
    for i in range(m):
        for j in range(m):
            cc = np.fft.irfft(np.conj(spectra[:, i]) * spectra[:, j], n=nfft)
            values[:, i, j] = cc[: max_lag + 1] / counts
    values[0] = 0.5 * (values[0] + values[0].T)
    return Acf(values=values, dt=float(dt))


@dataclass(frozen=True)
class FixedLag:
    """Integrate the autocorrelation up to a fixed lag index."""

    lag: int


@dataclass(frozen=True)
class FirstZeroCrossing:
    """Integrate up to the first lag where the autocorrelation trace crosses zero."""


TruncationRule = FixedLag | FirstZeroCrossing


@dataclass
class GreenKuboResult:
    """Time-integrated autocorrelation G = int_0^T C(s) ds with its truncation."""

    matrix: np.ndarray  # (M, M)
    lag_used: int
    time_used: float

    @property
    def symmetrized(self) -> np.ndarray:
        return 0.5 * (self.matrix + self.matrix.T)


def _resolve_truncation_lag(acf: Acf, truncation: TruncationRule) -> int:
    if isinstance(truncation, FixedLag):
        lag = int(truncation.lag)
        if lag < 1 or lag > acf.max_lag:
            raise InsufficientLagsError(
                f"truncation lag {lag} outside available range [1, {acf.max_lag}]",
                op="green_kubo_integral",
            )
        return lag
    if isinstance(truncation, FirstZeroCrossing):
        tr = acf.trace()
        crossings = np.nonzero(tr[1:] <= 0.0)[0]
        if crossings.size == 0:
            raise InsufficientLagsError(
                "autocorrelation trace never crosses zero within available lags",
                op="green_kubo_integral",
            )
        return int(crossings[0]) + 1
    raise ConfigError(f"unknown truncation rule {truncation!r}")


def green_kubo_integral(acf: Acf, truncation: TruncationRule) -> GreenKuboResult:
    """Trapezoidal quadrature of the autocorrelation over [0, truncation].

    For map drivers (dt = 1) this is the discrete convention
    C(0)/2 + sum_{n>=1} C(n) + C(L)/2.
    """
    lag = _resolve_truncation_lag(acf, truncation)
    g = np.trapezoid(acf.values[: lag + 1], dx=acf.dt, axis=0)
    return GreenKuboResult(matrix=g, lag_used=lag, time_used=lag * acf.dt)


def default_truncation(acf: Acf, efolds: int = 8) -> FixedLag:
    """Fixed-lag window covering ``efolds`` e-folding estimates of the trace.

    The e-folding lag is the first lag where the trace drops below
    trace(0)/e.  Raises if that window exceeds the available lags.
    """
    tr = acf.trace()
    below = np.nonzero(tr <= tr[0] / math.e)[0]
    if below.size == 0:
        raise InsufficientLagsError(
            "cannot estimate e-folding lag: trace never decays below 1/e",
            op="default_truncation",
        )
    lag = int(efolds * below[0])
    if lag > acf.max_lag:
        raise InsufficientLagsError(
            f"default window {lag} lags exceeds available {acf.max_lag}",
            op="default_truncation",
        )
    return FixedLag(max(lag, 1))
