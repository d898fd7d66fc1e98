"""Displacement-statistics pipeline: filter, bin, covariances, orthogonal modes.

Estimation recipe for the noise fields from Lagrangian data: compute many
trajectories of one flow, low-pass each trajectory to get its mean path,
difference to obtain displacement series, bin displacements by the coarse
grid box containing the filtered position, and take spectral decompositions
of the binned covariance statistics.

The low-pass step is temporal zero-phase smoothing along each trajectory
(a symmetric moving average with window shrinkage at the ends, which
preserves affine signals exactly); a slowly-varying spatial filter of path
ensembles has no well-defined per-trajectory meaning.
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    MisalignedBatchError,
)
from .stats import CovarianceAccumulator

__all__ = [
    "TrajectoryBatch",
    "BoxGrid",
    "BoxStatistics",
    "EofResult",
    "low_pass_filter",
    "displacement_series",
    "bin_and_covary",
    "compute_eofs",
    "box_mean_snapshots",
    "load_trajectories_csv",
    "save_trajectories_csv",
    "write_eof_result",
]


@dataclass
class TrajectoryBatch:
    """Uniformly sampled trajectories: positions (n_traj, n_times, d)."""

    positions: np.ndarray
    dt: float
    domain: tuple[float, ...]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 3:
            raise DimensionMismatchError("positions must have shape (n_traj, n_times, d)")
        if not np.all(np.isfinite(self.positions)):
            raise ConfigError("trajectory positions must be finite")
        if self.dt <= 0:
            raise ConfigError("sampling interval dt must be positive")

    @property
    def n_traj(self) -> int:
        return self.positions.shape[0]

    @property
    def n_times(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


def low_pass_filter(batch: TrajectoryBatch, cutoff_period: float) -> TrajectoryBatch:
    """Zero-phase moving average with window ~ cutoff_period / dt (odd-forced).

    End points use symmetrically shrunk windows, so the output stays aligned
    sample-for-sample with the input and affine-in-time signals pass through
    unchanged everywhere.
    """
    if cutoff_period < 4.0 * batch.dt:
        raise ConfigError(
            f"cutoff_period={cutoff_period} must be at least 4*dt={4 * batch.dt}"
        )
    window = int(round(cutoff_period / batch.dt))
    if window % 2 == 0:
        window += 1
    if window > batch.n_times:
        raise ConfigError(
            f"trajectories of {batch.n_times} samples are shorter than the "
            f"{window}-sample filter window"
        )
    half = window // 2
    x = batch.positions
    n = batch.n_times
    csum = np.concatenate(
        [np.zeros_like(x[:, :1]), np.cumsum(x, axis=1)], axis=1
    )  # (n_traj, n+1, d)
    idx = np.arange(n)
    h = np.minimum(half, np.minimum(idx, n - 1 - idx))
    lo, hi = idx - h, idx + h + 1
    smoothed = (csum[:, hi] - csum[:, lo]) / (hi - lo)[None, :, None]
    return TrajectoryBatch(positions=smoothed, dt=batch.dt, domain=batch.domain)


@dataclass
class DisplacementSeries:
    """Per-sample displacement zeta_t = raw - filtered, with centering report."""

    values: np.ndarray  # (n_traj, n_times, d)
    filtered_positions: np.ndarray  # (n_traj, n_times, d)
    dt: float
    domain: tuple[float, ...]
    interior_mean_magnitude: np.ndarray  # (n_traj,) max-norm of interior mean


def displacement_series(
    raw: TrajectoryBatch, filtered: TrajectoryBatch, centering_tolerance: float | None = None
) -> DisplacementSeries:
    """Elementwise difference raw - filtered with a centering diagnostic.

    The per-trajectory mean of the interior displacement samples is reported
    (an echo of the centering condition); when a tolerance is supplied,
    trajectories exceeding it raise.
    """
    if raw.positions.shape != filtered.positions.shape or raw.dt != filtered.dt:
        raise MisalignedBatchError("raw and filtered batches are not aligned")
    zeta = raw.positions - filtered.positions
    n = raw.n_times
    interior = zeta[:, n // 10 : n - n // 10]
    mags = np.linalg.norm(interior.mean(axis=1), axis=-1)
    if centering_tolerance is not None and np.any(mags > centering_tolerance):
        raise ConfigError(
            f"displacement mean magnitude {mags.max():.3e} exceeds centering "
            f"tolerance {centering_tolerance:.3e}"
        )
    return DisplacementSeries(
        values=zeta,
        filtered_positions=filtered.positions,
        dt=raw.dt,
        domain=raw.domain,
        interior_mean_magnitude=mags,
    )


@dataclass
class BoxGrid:
    """Coarse box lattice covering the periodic domain."""

    domain: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if len(self.domain) != len(self.shape):
            raise DimensionMismatchError("grid shape and domain dimensions differ")
        if any(s < 1 for s in self.shape):
            raise ConfigError("grid shape entries must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_boxes(self) -> int:
        return int(np.prod(self.shape))

    def box_index(self, x: np.ndarray) -> np.ndarray:
        """Flat box index for positions (wrapped into the domain)."""
        x = np.asarray(x, dtype=float)
        lengths = np.asarray(self.domain)
        shape = np.asarray(self.shape)
        frac = np.mod(x, lengths) / lengths
        ij = np.minimum((frac * shape).astype(int), shape - 1)
        return np.ravel_multi_index(tuple(ij[..., a] for a in range(self.dim)), self.shape)

    def centers(self) -> np.ndarray:
        """Box centers, row-major, shape (n_boxes, d)."""
        axes = [
            (np.arange(s) + 0.5) * (L / s) for s, L in zip(self.shape, self.domain)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


@dataclass
class BoxStatistics:
    """Per-box displacement statistics from one-pass accumulation."""

    grid: BoxGrid
    counts: np.ndarray  # (n_boxes,)
    means: np.ndarray  # (n_boxes, d)
    covariances: np.ndarray  # (n_boxes, d, d)
    occupied: np.ndarray  # (n_boxes,) bool; False = flagged empty


def bin_and_covary(
    zeta: DisplacementSeries | np.ndarray,
    grid: BoxGrid,
    positions: np.ndarray | None = None,
    min_count: int = 10,
    chunk: int = 262_144,
) -> BoxStatistics:
    """Assign displacement samples to boxes and accumulate per-box covariances.

    Samples are keyed by the box containing their filtered position
    (out-of-domain positions are wrapped).  Accumulation is one-pass with
    stable pairwise merges; boxes with fewer than ``min_count`` samples are
    flagged empty and excluded from the mode stage.
    """
    if isinstance(zeta, DisplacementSeries):
        values = zeta.values.reshape(-1, zeta.values.shape[-1])
        pos = zeta.filtered_positions.reshape(-1, zeta.values.shape[-1])
    else:
        if positions is None:
            raise ConfigError("raw zeta arrays need matching positions")
        values = np.asarray(zeta, dtype=float).reshape(-1, np.asarray(zeta).shape[-1])
        pos = np.asarray(positions, dtype=float).reshape(-1, values.shape[-1])
        if pos.shape != values.shape:
            raise MisalignedBatchError("zeta samples and positions are not aligned")
    d = values.shape[-1]
    accs = [CovarianceAccumulator(d) for _ in range(grid.n_boxes)]
    for start in range(0, values.shape[0], chunk):
        v = values[start : start + chunk]
        b = grid.box_index(pos[start : start + chunk])
        if len(v) == 0:
            continue
        order = np.argsort(b, kind="stable")
        b_sorted, v_sorted = b[order], v[order]
        edges = np.flatnonzero(np.diff(b_sorted)) + 1
        box_ids = b_sorted[np.concatenate([[0], edges])]
        for seg, box in zip(np.split(v_sorted, edges), box_ids):
            accs[box].update(seg)
    counts = np.array([a.count for a in accs])
    means = np.stack([a.mean for a in accs])
    covs = np.stack(
        [
            a.covariance() if a.count >= max(2, min_count) else np.zeros((d, d))
            for a in accs
        ]
    )
    occupied = counts >= min_count
    return BoxStatistics(
        grid=grid, counts=counts, means=means, covariances=covs, occupied=occupied
    )


@dataclass
class EofResult:
    """Retained orthogonal modes of one covariance (or snapshot) matrix."""

    modes: np.ndarray  # (p, k), orthonormal columns
    values: np.ndarray  # (k,) nonincreasing eigenvalues
    retained_fraction: float

    def __post_init__(self):
        if np.any(np.diff(self.values) > 1e-12):
            raise ConfigError("mode values must be nonincreasing")
        if not 0.0 <= self.retained_fraction <= 1.0 + 1e-12:
            raise ConfigError("retained-variance fraction must lie in [0, 1]")


def compute_eofs(matrix: np.ndarray, k: int) -> EofResult:
    """Spectral decomposition of a covariance, or of snapshots' covariance.

    A square symmetric input is treated as a covariance matrix; otherwise
    rows are snapshots and the (row-centered) sample covariance is
    decomposed.  Modes carry a deterministic sign: the largest-magnitude
    entry of each mode is positive.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatchError("expected a 2-d array")
    if a.shape[0] == a.shape[1] and np.abs(a - a.T).max() <= 1e-10 * max(
        1.0, np.abs(a).max()
    ):
        cov = 0.5 * (a + a.T)
        rank_bound = cov.shape[0]
    else:
        snaps = a - a.mean(axis=0)
        if a.shape[0] < 2:
            raise ConfigError("need at least 2 snapshots")
        cov = snaps.T @ snaps / (a.shape[0] - 1)
        rank_bound = min(a.shape[0] - 1, a.shape[1])
    if k < 1 or k > rank_bound:
        raise ConfigError(f"k={k} exceeds rank bound {rank_bound}")
    w, v = np.linalg.eigh(cov)
    w = w[::-1]
    v = v[:, ::-1]
    total = float(np.sum(np.clip(w, 0.0, None)))
    modes = v[:, :k].copy()
    for j in range(k):
        lead = np.argmax(np.abs(modes[:, j]))
        if modes[lead, j] < 0:
            modes[:, j] = -modes[:, j]
    retained = float(np.sum(np.clip(w[:k], 0.0, None)) / total) if total > 0 else 0.0
    return EofResult(modes=modes, values=w[:k].copy(), retained_fraction=retained)


def box_mean_snapshots(
    zeta: DisplacementSeries, grid: BoxGrid, min_count: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked box-mean displacement fields per time: shape (n_times, n_boxes * d).

    Snapshot t averages the displacement of the trajectories currently in
    each box; boxes below ``min_count`` at a given time contribute zero.
    Returns (snapshots, coverage fraction per box over time).
    """
    n_traj, n_times, d = zeta.values.shape
    nb = grid.n_boxes
    snaps = np.zeros((n_times, nb, d))
    hits = np.zeros((n_times, nb), dtype=int)
    for t in range(n_times):
        b = grid.box_index(zeta.filtered_positions[:, t])
        np.add.at(snaps[t], b, zeta.values[:, t])
        np.add.at(hits[t], b, 1)
    good = hits >= min_count
    with np.errstate(invalid="ignore", divide="ignore"):
        snaps = np.where(good[:, :, None], snaps / np.maximum(hits, 1)[:, :, None], 0.0)
    coverage = good.mean(axis=0)
    return snaps.reshape(n_times, nb * d), coverage


def save_trajectories_csv(batch: TrajectoryBatch, path) -> None:
    """CSV with columns traj_id, t, x1..xd (positions as stored: continuous)."""
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["traj_id", "t"] + [f"x{i + 1}" for i in range(batch.dim)])
        for j in range(batch.n_traj):
            for i in range(batch.n_times):
                w.writerow(
                    [j, repr(float(i * batch.dt))]
                    + [repr(float(v)) for v in batch.positions[j, i]]
                )


def load_trajectories_csv(path, domain: tuple[float, ...]) -> TrajectoryBatch:
    """Read the CSV trajectory format (uniform sampling enforced)."""
    rows: dict[int, list[tuple[float, list[float]]]] = {}
    with open(path, newline="") as fh:
        r = _csv.reader(fh)
        header = next(r, None)
        if header is None or header[:2] != ["traj_id", "t"]:
            raise FileFormatError(f"not a trajectory CSV: {path}")
        d = len(header) - 2
        for row in r:
            rows.setdefault(int(row[0]), []).append(
                (float(row[1]), [float(v) for v in row[2:]])
            )
    if not rows:
        raise FileFormatError("trajectory CSV contains no rows")
    ids = sorted(rows)
    lengths = {len(rows[i]) for i in ids}
    if len(lengths) != 1:
        raise MisalignedBatchError("trajectories have unequal lengths")
    n_times = lengths.pop()
    pos = np.empty((len(ids), n_times, d))
    dts = set()
    for jj, i in enumerate(ids):
        entries = sorted(rows[i], key=lambda e: e[0])
        ts = np.array([e[0] for e in entries])
        if n_times > 1:
            step = np.diff(ts)
            if np.abs(step - step[0]).max() > 1e-9 * max(1.0, abs(step[0])):
                raise MisalignedBatchError("nonuniform sampling in trajectory CSV")
            dts.add(round(float(step[0]), 12))
        pos[jj] = [e[1] for e in entries]
    dt = dts.pop() if dts else 1.0
    if dts:
        raise MisalignedBatchError("trajectories carry different sampling intervals")
    return TrajectoryBatch(positions=pos, dt=float(dt), domain=tuple(domain))


_EOF_MAGIC = "fastslow-eof v1"


def write_eof_result(
    stats: BoxStatistics,
    per_box_modes: list[EofResult | None],
    path,
) -> None:
    """Versioned text file: grid spec, then per-box mean/covariance/modes/values."""
    lines = [_EOF_MAGIC]
    lines.append("domain " + " ".join(repr(float(v)) for v in stats.grid.domain))
    lines.append("shape " + " ".join(str(int(s)) for s in stats.grid.shape))
    for b in range(stats.grid.n_boxes):
        lines.append(f"box {b} count {int(stats.counts[b])} occupied {int(stats.occupied[b])}")
        lines.append("mean " + " ".join(repr(float(v)) for v in stats.means[b]))
        lines.append(
            "covariance " + " ".join(repr(float(v)) for v in stats.covariances[b].reshape(-1))
        )
        r = per_box_modes[b]
        if r is None:
            lines.append("modes 0")
        else:
            k = r.modes.shape[1]
            lines.append(
                f"modes {k} values "
                + " ".join(repr(float(v)) for v in r.values)
                + " retained "
                + repr(float(r.retained_fraction))
            )
            for j in range(k):
                lines.append("mode " + " ".join(repr(float(v)) for v in r.modes[:, j]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
