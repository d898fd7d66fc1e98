"""End-to-end experiment runners behind the command-line harness.

Each runner consumes a validated config plus an output directory and writes:

* ``report.csv``      -- long-format statistics (columns: stat, value, stderr),
* experiment-specific artifacts (coefficient files, trajectory records,
  displacement-statistics files, endpoint samples),
* ``manifest.json``   -- config hash, seeds, versions, wall time.

All report files are byte-reproducible from (config, seed); the manifest
additionally records wall time and is therefore excluded from byte
comparisons.
"""

from __future__ import annotations

import csv as _csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__ as _version
from .config import (
    build_basis,
    build_channels,
    build_coupling,
    build_driver_factory,
    build_truncation,
    build_velocity,
    dump_config,
    probe_axes,
    resolve_truncation,
    validate_config,
)
from .drivers import autocorrelation, observe, sample_states
from .errors import ConfigError, ToolError
from .eof import (
    BoxGrid,
    TrajectoryBatch,
    bin_and_covary,
    box_mean_snapshots,
    compute_eofs,
    displacement_series,
    low_pass_filter,
    write_eof_result,
)
from .homogenization import (
    CoefficientField,
    CoefficientTable,
    PairedSamples,
    estimate_coefficients,
    read_coefficients,
    write_coefficients,
)
from .modes import centering_residual
from .multiscale import run_multiscale_ensemble
from .sde import SdeSpec, simulate_sde_ensemble
from .seeding import ROLE_DRIVER, substream
from .stats import max_ks_distance, principal_angles
from .velocity import make_velocity_field

__all__ = ["run_experiment", "weak_convergence_test", "ConvergenceReport"]


class CriterionFailedError(ToolError):
    category = "criterion-failed"


class CenteringViolatedError(ToolError):
    category = "centering-violated"


def _write_report(path: Path, rows: list[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["stat", "value", "stderr"])
        for stat, value, stderr in rows:
            w.writerow([stat, repr(float(value)), repr(float(stderr))])


def _write_manifest(out: Path, kind: str, cfg: dict, seed: int, t0: float, files: list[str], threads: int) -> None:
    manifest = {
        "kind": kind,
        "config_sha256": hashlib.sha256(dump_config(cfg).encode()).hexdigest(),
        "seed": seed,
        "threads": threads,
        "version": _version,
        "wall_time_s": time.time() - t0,
        "outputs": sorted(files),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolved_seed(cfg: dict, seed_override: int | None) -> int:
    if seed_override is not None:
        return int(seed_override)
    return int(cfg.get("seed", 0))


def _sub_seed(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# coefficient estimation pipeline


def _collect_samples(cfg: dict, seed: int, coupling):
    est = cfg["estimation"]
    channels = build_channels(cfg, seed)
    factory = build_driver_factory(cfg, channels)
    driver = factory(substream(seed, ROLE_DRIVER), None)
    n = int(est.get("n_samples", 100_000))
    burn = int(est.get("burn_in", 1_000))
    stride = int(est.get("stride", 1))
    states = sample_states(driver, n, burn, stride)
    lam = observe(states, channels)
    dt = driver.natural_dt * stride
    if coupling is not None and not coupling.frozen:
        cs = np.clip(observe(states, coupling.channels), -coupling.caps, coupling.caps)
        return PairedSamples(lam, cs, dt)
    return PairedSamples(lam, None, dt)


def _estimate_table(cfg: dict, seed: int) -> CoefficientTable:
    basis = build_basis(cfg)
    u = build_velocity(cfg, basis.dim)
    coupling = build_coupling(cfg, seed, basis)
    est = cfg["estimation"]
    samples = _collect_samples(cfg, seed, coupling)
    max_lag = int(est.get("max_lag", 200))
    acf = autocorrelation(samples.observables, max_lag, samples.sample_dt)
    trunc = resolve_truncation(build_truncation(est.get("truncation", {})), acf)
    axes = probe_axes(est["probes"], basis.dim)
    if samples.coeffs is None:
        table = estimate_coefficients(
            basis, axes, u, acf=acf, truncation=trunc,
            seed=seed, sample_count=samples.n_samples,
        )
    else:
        table = estimate_coefficients(
            basis, axes, u, samples=samples, truncation=trunc,
            seed=seed, sample_count=samples.n_samples,
        )
    return table


def run_estimate_coefficients(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    table = _estimate_table(cfg, seed)
    coeff_path = out / "coefficients.txt"
    write_coefficients(table, coeff_path)
    rows = [("probes", len(table.entries), 0.0), ("truncation_lag", table.truncation_lag, 0.0)]
    for e in table.entries[: min(len(table.entries), 8)]:
        tag = "probe(" + ",".join(f"{v:.6g}" for v in e.at) + ")"
        for i, v in enumerate(e.drift):
            rows.append((f"{tag}/drift[{i}]", v, 0.0))
        for i in range(e.diffusion_matrix.shape[0]):
            for j in range(e.diffusion_matrix.shape[1]):
                rows.append((f"{tag}/sigma2[{i},{j}]", e.diffusion_matrix[i, j], 0.0))
    _write_report(out / "report.csv", rows)
    return {"files": ["coefficients.txt", "report.csv"], "n_probes": len(table.entries)}


# ---------------------------------------------------------------------------
# multiscale simulation


def _run_ensemble(cfg: dict, seed: int, eps: float, threads: int):
    basis = build_basis(cfg)
    u = build_velocity(cfg, basis.dim)
    coupling = build_coupling(cfg, seed, basis)
    channels = build_channels(cfg, seed)
    factory = build_driver_factory(cfg, channels)
    ens = cfg["ensemble"]
    integ = cfg["integration"]
    init_block = ens.get("initial", {"kind": "uniform"})
    if init_block.get("kind", "uniform") == "point":
        initial = np.asarray(
            [float(v) for v in init_block.get("position", np.zeros(basis.dim))]
        )
    else:
        initial = "uniform"
    rec = run_multiscale_ensemble(
        factory,
        int(ens.get("size", 1000)),
        basis,
        u,
        coupling,
        eps=eps,
        dt_slow=float(integ["dt_slow"]),
        t_final=float(integ["t_final"]),
        output_stride=int(integ.get("output_stride", 1)),
        seed=seed,
        initial=initial,
        shared_driver=ens.get("kind", "independent") == "shared",
        chunk_size=int(ens.get("chunk_size", 4096)),
        threads=threads,
    )
    return rec, basis


def _moment_rows(prefix: str, ends: np.ndarray) -> list[tuple[str, float, float]]:
    n, d = ends.shape
    rows = []
    mean = ends.mean(axis=0)
    se = ends.std(axis=0, ddof=1) / np.sqrt(n)
    centered = ends - mean
    var = centered.var(axis=0, ddof=1)
    m4 = (centered**4).mean(axis=0)
    var_se = np.sqrt(np.maximum(m4 - centered.var(axis=0, ddof=0) ** 2, 0.0) / n)
    for i in range(d):
        rows.append((f"{prefix}mean[{i}]", mean[i], se[i]))
        rows.append((f"{prefix}var[{i}]", var[i], var_se[i]))
    return rows


def run_simulate_multiscale(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    integ = cfg["integration"]
    rec, basis = _run_ensemble(cfg, seed, float(integ["eps"]), threads)
    np.savez_compressed(
        out / "trajectories.npz",
        times=rec.times,
        wrapped=rec.wrapped,
        windings=rec.windings,
        domain=np.asarray(rec.domain),
        seed=np.asarray([seed]),
    )
    ends = rec.unwrapped()[-1]
    rows = [("members", rec.n_members, 0.0), ("t_final", rec.times[-1], 0.0)]
    rows += _moment_rows("endpoint/", ends)
    _write_report(out / "report.csv", rows)
    with open(out / "endpoints.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(ends.shape[1])])
        for row in ends:
            w.writerow([repr(float(v)) for v in row])
    return {"files": ["trajectories.npz", "report.csv", "endpoints.csv"]}


# ---------------------------------------------------------------------------
# SDE simulation


def _constant_sigma_fn(matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype=float)

    def sigma(x, t=0.0):
        x = np.asarray(x)
        return np.broadcast_to(matrix, x.shape[:-1] + matrix.shape).copy()

    return sigma


def _build_sde_spec(cfg: dict, seed: int) -> SdeSpec:
    blk = cfg["sde"]
    source = blk.get("source", {"kind": "file"})
    kind = source.get("kind", "file")
    x0 = np.asarray([float(v) for v in blk.get("x0", [0.0])])
    if kind == "file":
        table = read_coefficients(source["path"])
        field = CoefficientField(table)
        drift, sigma = field.drift, field.sigma
    elif kind == "estimate":
        table = _estimate_table(cfg, seed)
        field = CoefficientField(table)
        drift, sigma = field.drift, field.sigma
    elif kind == "analytic":
        dim = x0.shape[0]
        drift_blk = source.get("drift", {"kind": "zero"})
        params = {k: v for k, v in drift_blk.items() if k != "kind"}
        if "velocity" in params:
            params["velocity"] = tuple(float(v) for v in params["velocity"])
        if "matrix" in params:
            params["matrix"] = tuple(tuple(float(v) for v in r) for r in params["matrix"])
        drift = make_velocity_field(drift_blk.get("kind", "zero"), dim, **params)
        sig_blk = source.get("sigma", {"kind": "constant", "matrix": [[0.0]]})
        if sig_blk.get("kind", "constant") != "constant":
            raise ConfigError("analytic sigma supports kind 'constant' only")
        sigma = _constant_sigma_fn(np.asarray(sig_blk["matrix"], dtype=float))
    else:
        raise ConfigError(f"unknown sde source kind '{kind}'")
    return SdeSpec(
        drift=drift,
        sigma=sigma,
        interpretation=blk.get("interpretation", "ito"),
        dt=float(blk["dt"]),
        t_final=float(blk.get("t_final", cfg.get("integration", {}).get("t_final", 1.0))),
        n_members=int(blk.get("size", 1000)),
        seed=seed,
        x0=x0,
    )


def run_simulate_sde(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    spec = _build_sde_spec(cfg, seed)
    report = simulate_sde_ensemble(spec)
    rows = [("members", report.n_members, 0.0)]
    for i in range(spec.dim):
        rows.append((f"mean[{i}]", report.mean[i], report.mean_stderr[i]))
        rows.append((f"var[{i}]", report.cov[i, i], report.var_stderr[i]))
    for i in range(spec.dim):
        for j in range(spec.dim):
            rows.append((f"cov[{i},{j}]", report.cov[i, j], 0.0))
    _write_report(out / "report.csv", rows)
    files = ["report.csv"]
    if cfg["sde"].get("keep_endpoints", False):
        with open(out / "endpoints.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(spec.dim)])
            for row in report.endpoints:
                w.writerow([repr(float(v)) for v in row])
        files.append("endpoints.csv")
    return {"files": files, "mean": report.mean, "cov": report.cov}


# ---------------------------------------------------------------------------
# weak convergence


@dataclass
class EpsReport:
    eps: float
    mean: np.ndarray
    mean_stderr: np.ndarray
    var: np.ndarray
    var_stderr: np.ndarray
    ks: float
    runtime_s: float
    seed: int


@dataclass
class ConvergenceReport:
    """Per-eps endpoint statistics against the homogenized SDE reference."""

    entries: list[EpsReport]
    reference_var: np.ndarray
    predicted_var: np.ndarray
    ks_slack: float

    @property
    def ks_values(self) -> list[float]:
        return [e.ks for e in self.entries]

    @property
    def monotone_ok(self) -> bool:
        ks = self.ks_values
        return all(b <= self.ks_slack * a for a, b in zip(ks, ks[1:]))


def weak_convergence_test(cfg: dict, seed: int, threads: int = 1) -> tuple[ConvergenceReport, np.ndarray]:
    """Compare multiscale endpoint laws against the homogenized SDE ensemble.

    For each eps (strictly decreasing) the multiscale ensemble runs to the
    slow horizon; the reference SDE ensemble uses coefficients estimated
    from the fast driver (or the configured analytic/file source).  Reports
    first and second endpoint moments with standard errors and the
    two-sample KS distance (max over coordinates), and checks the
    documented monotonicity criterion ks[i+1] <= slack * ks[i].
    """
    conv = cfg["converge"]
    eps_list = [float(e) for e in conv["eps_list"]]
    slack = float(conv.get("ks_slack", 1.5))

    ens = cfg["ensemble"]
    init_block = ens.get("initial", {})
    if init_block.get("kind") != "point":
        raise ConfigError("converge requires ensemble.initial.kind = point")
    x0 = np.asarray([float(v) for v in init_block["position"]])

    sde_cfg = dict(cfg)
    sde_cfg["sde"] = dict(cfg["sde"])
    sde_cfg["sde"].setdefault("x0", [float(v) for v in x0])
    sde_cfg["sde"].setdefault("source", {"kind": "estimate"})
    spec = _build_sde_spec(sde_cfg, _sub_seed(seed, 1))
    ref_report = simulate_sde_ensemble(spec)
    ref_ends = ref_report.endpoints
    t_final = float(cfg["integration"]["t_final"])
    predicted_var = np.diag(
        np.asarray(spec.sigma(x0[None, :], 0.0), dtype=float)[0]
        @ np.asarray(spec.sigma(x0[None, :], 0.0), dtype=float)[0].T
    ) * t_final

    entries = []
    for i, eps in enumerate(eps_list):
        eps_seed = _sub_seed(seed, 100 + i)
        t0 = time.time()
        rec, _ = _run_ensemble(cfg, eps_seed, eps, threads)
        ends = rec.unwrapped()[-1]
        ks = max_ks_distance(ends, ref_ends)
        n = ends.shape[0]
        centered = ends - ends.mean(axis=0)
        m4 = (centered**4).mean(axis=0)
        var0 = centered.var(axis=0, ddof=0)
        entries.append(
            EpsReport(
                eps=eps,
                mean=ends.mean(axis=0),
                mean_stderr=ends.std(axis=0, ddof=1) / np.sqrt(n),
                var=ends.var(axis=0, ddof=1),
                var_stderr=np.sqrt(np.maximum(m4 - var0**2, 0.0) / n),
                ks=ks,
                runtime_s=time.time() - t0,
                seed=eps_seed,
            )
        )
    report = ConvergenceReport(
        entries=entries,
        reference_var=np.diag(ref_report.cov),
        predicted_var=predicted_var,
        ks_slack=slack,
    )
    return report, ref_ends


def run_converge(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    report, _ = weak_convergence_test(cfg, seed, threads)
    rows = [("ks_slack", report.ks_slack, 0.0), ("monotone_ok", float(report.monotone_ok), 0.0)]
    for i, v in enumerate(report.predicted_var):
        rows.append((f"predicted_var[{i}]", v, 0.0))
    for i, v in enumerate(report.reference_var):
        rows.append((f"reference_var[{i}]", v, 0.0))
    for e in report.entries:
        tag = f"eps={e.eps:.6g}/"
        for i in range(len(e.mean)):
            rows.append((f"{tag}mean[{i}]", e.mean[i], e.mean_stderr[i]))
            rows.append((f"{tag}var[{i}]", e.var[i], e.var_stderr[i]))
        rows.append((f"{tag}ks", e.ks, 0.0))
        rows.append((f"{tag}seed", e.seed, 0.0))
        rows.append((f"{tag}runtime_s", e.runtime_s, 0.0))
    _write_report(out / "report.csv", rows)
    if not report.monotone_ok:
        raise CriterionFailedError(
            f"KS distances {report.ks_values} violate the monotonicity criterion "
            f"(slack {report.ks_slack})",
            op="converge",
        )
    return {"files": ["report.csv"], "ks": report.ks_values}


# ---------------------------------------------------------------------------
# displacement-statistics pipeline


def box_averaged_modes(basis, grid: BoxGrid, sub: int = 8) -> np.ndarray:
    """Planted modes averaged over each box: columns (n_boxes * d, M)."""
    centers = grid.centers()
    widths = np.asarray(grid.domain) / np.asarray(grid.shape)
    offsets = [(np.arange(sub) + 0.5) / sub - 0.5 for _ in range(grid.dim)]
    mesh = np.stack(np.meshgrid(*offsets, indexing="ij"), axis=-1).reshape(-1, grid.dim)
    acc = np.zeros((grid.n_boxes, basis.dim, basis.n_modes))
    for off in mesh:
        acc += basis.mode_matrix(centers + off * widths)
    acc /= mesh.shape[0]
    return acc.reshape(grid.n_boxes * basis.dim, basis.n_modes)


def run_eof(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    eof_blk = cfg["eof"]
    integ = cfg["integration"]
    rec, basis = _run_ensemble(cfg, seed, float(integ["eps"]), threads)
    batch = TrajectoryBatch(
        positions=rec.unwrapped().transpose(1, 0, 2), dt=rec.dt, domain=basis.lengths
    )
    filt = low_pass_filter(batch, float(eof_blk["cutoff_period"]))
    disp = displacement_series(batch, filt)
    grid = BoxGrid(domain=basis.lengths, shape=tuple(int(s) for s in eof_blk["grid_shape"]))
    stats = bin_and_covary(disp, grid, min_count=int(eof_blk.get("min_count", 10)))
    k = int(eof_blk.get("n_modes", basis.n_modes))
    per_box = [
        compute_eofs(stats.covariances[b], min(k, basis.dim)) if stats.occupied[b] else None
        for b in range(grid.n_boxes)
    ]
    write_eof_result(stats, per_box, out / "eof.txt")

    snaps, coverage = box_mean_snapshots(
        disp, grid, min_count=int(eof_blk.get("snapshot_min_count", 4))
    )
    global_modes = compute_eofs(snaps, k)
    rows = [
        ("boxes", grid.n_boxes, 0.0),
        ("occupied", int(stats.occupied.sum()), 0.0),
        ("coverage_min", coverage.min(), 0.0),
        ("retained_fraction", global_modes.retained_fraction, 0.0),
    ]
    for j, v in enumerate(global_modes.values):
        rows.append((f"eof_value[{j}]", v, 0.0))
    angle = None
    if eof_blk.get("reference") == "planted":
        planted = box_averaged_modes(basis, grid)
        angle = float(principal_angles(global_modes.modes, planted).max())
        rows.append(("principal_angle_max", angle, 0.0))
    _write_report(out / "report.csv", rows)
    return {"files": ["eof.txt", "report.csv"], "angle": angle}


# ---------------------------------------------------------------------------
# centering diagnostic


def run_centering_check(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    cent = cfg["centering"]
    basis = build_basis(cfg)
    coupling = build_coupling(cfg, seed, basis)
    channels = build_channels(cfg, seed)
    factory = build_driver_factory(cfg, channels)
    driver = factory(substream(seed, ROLE_DRIVER), None)
    n = int(cent.get("n_samples", 100_000))
    states = sample_states(
        driver, n, int(cent.get("burn_in", 1_000)), int(cent.get("stride", 1))
    )
    lam = observe(states, channels)
    cs = None
    if not coupling.frozen:
        cs = np.clip(observe(states, coupling.channels), -coupling.caps, coupling.caps)
    if "probes" in cent:
        axes = probe_axes(cent["probes"], basis.dim)
    else:
        axes = [np.linspace(0.0, L, 5, endpoint=False) for L in basis.lengths]
    probes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, basis.dim)
    residual = centering_residual(basis, lam, cs, probes)

    # CLT bound: factor * sqrt(sum_i (std(lam_i) * sup|phi_i|)^2 / N)
    factor = float(cent.get("tolerance_factor", 3.0))
    stds = lam.std(axis=0)
    bound = factor * float(
        np.sqrt(np.sum((stds * basis.sup_norms()) ** 2) / lam.shape[0])
    )
    rows = [
        ("residual", residual, 0.0),
        ("bound", bound, 0.0),
        ("n_samples", lam.shape[0], 0.0),
    ]
    for i, m in enumerate(lam.mean(axis=0)):
        rows.append((f"lambda_mean[{i}]", m, stds[i] / np.sqrt(lam.shape[0])))
    _write_report(out / "report.csv", rows)
    if residual > bound:
        raise CenteringViolatedError(
            f"centering residual {residual:.3e} exceeds the CLT bound {bound:.3e}",
            op="centering-check",
            residual=residual,
            bound=bound,
        )
    return {"files": ["report.csv"], "residual": residual, "bound": bound}


# ---------------------------------------------------------------------------
# dispatch


_RUNNERS = {
    "simulate-multiscale": run_simulate_multiscale,
    "estimate-coefficients": run_estimate_coefficients,
    "simulate-sde": run_simulate_sde,
    "converge": run_converge,
    "eof": run_eof,
    "centering-check": run_centering_check,
}


def run_experiment(
    kind: str,
    cfg: dict,
    out_dir,
    seed: int | None = None,
    threads: int = 1,
) -> dict:
    """Validate, execute and report one experiment; returns a summary dict.

    Reports are written before any criterion failure is raised, so a
    nonzero exit still leaves the full evidence on disk.
    """
    validate_config(cfg, kind)
    seed_val = _resolved_seed(cfg, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        summary = _RUNNERS[kind](cfg, out, seed_val, threads)
    except ToolError as exc:
        _write_manifest(out, kind, cfg, seed_val, t0, [], threads)
        raise
    _write_manifest(out, kind, cfg, seed_val, t0, summary.get("files", []), threads)
    summary["seed"] = seed_val
    summary["out"] = str(out)
    return summary
