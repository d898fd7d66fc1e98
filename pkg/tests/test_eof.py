"""Displacement-statistics pipeline tests: filtering, binning, mode recovery."""

import numpy as np
import pytest

from fastslow.eof import (
    BoxGrid,
    TrajectoryBatch,
    bin_and_covary,
    box_mean_snapshots,
    compute_eofs,
    displacement_series,
    load_trajectories_csv,
    low_pass_filter,
    save_trajectories_csv,
    write_eof_result,
)
from fastslow.errors import ConfigError, MisalignedBatchError
from fastslow.stats import CovarianceAccumulator, ks_distance, principal_angles

TWO_PI = 2.0 * np.pi


def batch_from(fn, n_traj=3, n_times=200, dt=0.1, d=1, domain=None):
    t = np.arange(n_times) * dt
    pos = np.stack([np.atleast_2d(fn(j, t)).reshape(n_times, d) for j in range(n_traj)])
    return TrajectoryBatch(positions=pos, dt=dt, domain=domain or (TWO_PI,) * d)


class TestLowPassFilter:
    def test_constant_unchanged(self):
        b = batch_from(lambda j, t: np.full_like(t, 2.5))
        f = low_pass_filter(b, cutoff_period=2.0)
        assert np.allclose(f.positions, 2.5, atol=1e-14)

    def test_linear_preserved_everywhere(self):
        b = batch_from(lambda j, t: 0.7 * t + j)
        f = low_pass_filter(b, cutoff_period=2.0)
        # symmetric (shrinking) windows preserve affine signals exactly
        assert np.abs(f.positions - b.positions).max() < 1e-12

    def test_fast_sinusoid_attenuated(self):
        cutoff = 4.0
        period = cutoff / 10.0
        b = batch_from(lambda j, t: np.sin(TWO_PI * t / period), n_times=2000, dt=0.01)
        f = low_pass_filter(b, cutoff_period=cutoff)
        w = int(round(cutoff / 0.01)) | 1
        interior = slice(w, 2000 - w)
        in_amp = np.abs(b.positions[:, interior]).max()
        out_amp = np.abs(f.positions[:, interior]).max()
        assert out_amp <= 0.2 * in_amp
        # moving-average transfer oracle |sin(pi f W)/(W sin(pi f))|
        fr = 0.01 / period
        gain = abs(np.sin(np.pi * fr * w) / (w * np.sin(np.pi * fr)))
        assert out_amp <= max(2.0 * gain, 0.2) * in_amp

    def test_idempotence_on_passband(self):
        rng = np.random.default_rng(0)
        slow = np.cumsum(rng.standard_normal(2000)) * 0.01
        b = batch_from(lambda j, t: slow, n_traj=1, n_times=2000, dt=0.01)
        f1 = low_pass_filter(b, cutoff_period=1.0)
        f2 = low_pass_filter(f1, cutoff_period=1.0)
        w = 101
        e1 = np.sum((f1.positions[:, w:-w] - b.positions[:, w:-w]) ** 2)
        e2 = np.sum((f2.positions[:, w:-w] - f1.positions[:, w:-w]) ** 2)
        base = np.sum(f1.positions[:, w:-w] ** 2)
        assert e2 <= 0.05 * base or e2 <= e1

    def test_window_longer_than_trajectory_rejected(self):
        b = batch_from(lambda j, t: t, n_times=20)
        with pytest.raises(ConfigError):
            low_pass_filter(b, cutoff_period=10.0)

    def test_cutoff_floor(self):
        b = batch_from(lambda j, t: t)
        with pytest.raises(ConfigError):
            low_pass_filter(b, cutoff_period=0.2)


class TestDisplacementSeries:
    def test_identical_batches_give_zero(self):
        b = batch_from(lambda j, t: np.sin(t))
        d = displacement_series(b, b)
        assert np.all(d.values == 0.0)

    def test_constant_offset_absorbed_by_filter(self):
        base = batch_from(lambda j, t: np.full_like(t, 1.0))
        filtered = low_pass_filter(base, 2.0)
        d = displacement_series(base, filtered)
        assert np.abs(d.values).max() < 1e-12

    def test_planted_oscillation_recovered(self):
        period = 0.2
        drift = lambda t: 0.3 * t
        osc = lambda t: 0.5 * np.sin(TWO_PI * t / period)
        b = batch_from(lambda j, t: drift(t) + osc(t), n_times=4000, dt=0.01)
        f = low_pass_filter(b, cutoff_period=2.0)
        d = displacement_series(b, f)
        w = 201
        t = np.arange(4000) * 0.01
        target = osc(t)[w:-w]
        got = d.values[0, w:-w, 0]
        energy_ratio = np.sum(got * target) ** 2 / (np.sum(got**2) * np.sum(target**2))
        assert np.sum(got**2) >= 0.9 * np.sum(target**2)
        assert energy_ratio >= 0.9

    def test_misalignment_rejected(self):
        a = batch_from(lambda j, t: t, n_times=100)
        b = batch_from(lambda j, t: t, n_times=101)
        with pytest.raises(MisalignedBatchError):
            displacement_series(a, b)


class TestBinning:
    def test_single_box_equals_batch_covariance(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5000, 2)) * [1.0, 0.3]
        pos = rng.uniform(0, 1, (5000, 2))
        grid = BoxGrid(domain=(TWO_PI, TWO_PI), shape=(1, 1))
        stats = bin_and_covary(z, grid, positions=pos)
        assert np.abs(stats.covariances[0] - np.cov(z.T)).max() < 1e-12

    def test_two_boxes_planted_statistics(self):
        rng = np.random.default_rng(2)
        n = 20_000
        left = rng.standard_normal((n, 1)) * 0.5
        right = rng.standard_normal((n, 1)) * 2.0
        z = np.concatenate([left, right])
        pos = np.concatenate([np.full((n, 1), 1.0), np.full((n, 1), 4.5)])
        grid = BoxGrid(domain=(TWO_PI,), shape=(2,))
        stats = bin_and_covary(z, grid, positions=pos)
        assert stats.covariances[0][0, 0] == pytest.approx(0.25, rel=0.05)
        assert stats.covariances[1][0, 0] == pytest.approx(4.0, rel=0.05)

    def test_empty_box_flagged(self):
        z = np.zeros((50, 1))
        pos = np.full((50, 1), 0.5)
        grid = BoxGrid(domain=(TWO_PI,), shape=(4,))
        stats = bin_and_covary(z, grid, positions=pos, min_count=5)
        assert stats.occupied[0]
        assert not stats.occupied[1:].any()

    def test_out_of_domain_positions_wrapped(self):
        z = np.ones((10, 1))
        pos = np.full((10, 1), TWO_PI + 0.5)  # wraps to 0.5
        grid = BoxGrid(domain=(TWO_PI,), shape=(4,))
        stats = bin_and_covary(z, grid, positions=pos, min_count=1)
        assert stats.counts[0] == 10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((4000, 2))
        pos = rng.uniform(0, TWO_PI, (4000, 2))
        grid = BoxGrid(domain=(TWO_PI, TWO_PI), shape=(2, 2))
        a = bin_and_covary(z, grid, positions=pos)
        perm = rng.permutation(4000)
        b = bin_and_covary(z[perm], grid, positions=pos[perm])
        assert np.abs(a.covariances - b.covariances).max() < 1e-12
        assert np.abs(a.means - b.means).max() < 1e-13


class TestCovarianceAccumulator:
    def test_matches_numpy(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((997, 3))
        acc = CovarianceAccumulator(3)
        for start in range(0, 997, 100):
            acc.update(x[start : start + 100])
        assert np.abs(acc.covariance() - np.cov(x.T)).max() < 1e-12
        assert np.abs(acc.mean - x.mean(axis=0)).max() < 1e-13

    def test_merge_associative(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((300, 2))
        parts = [CovarianceAccumulator(2).update(x[i::3]) for i in range(3)]
        ab_c = CovarianceAccumulator(2).merge(parts[0]).merge(parts[1]).merge(parts[2])
        direct = CovarianceAccumulator(2).update(
            np.concatenate([x[0::3], x[1::3], x[2::3]])
        )
        assert np.abs(ab_c.covariance() - direct.covariance()).max() < 1e-12


class TestComputeEofs:
    def test_diagonal_covariance(self):
        r = compute_eofs(np.diag([4.0, 1.0]), k=2)
        assert np.allclose(r.values, [4.0, 1.0])
        assert np.allclose(np.abs(r.modes), np.eye(2), atol=1e-14)
        assert r.retained_fraction == pytest.approx(1.0)

    def test_isotropic_half_retained(self):
        r = compute_eofs(0.7 * np.eye(2), k=1)
        assert r.retained_fraction == pytest.approx(0.5)

    def test_planted_subspace_recovery(self):
        rng = np.random.default_rng(6)
        p, k, n = 12, 2, 3000
        basis = np.linalg.qr(rng.standard_normal((p, k)))[0]
        snaps = (rng.standard_normal((n, k)) * [2.0, 1.0]) @ basis.T
        snaps += 1e-4 * rng.standard_normal((n, p))
        r = compute_eofs(snaps, k=2)
        angles = principal_angles(r.modes, basis)
        assert angles.max() < 1e-3

    def test_sign_convention_deterministic(self):
        cov = np.array([[2.0, -0.5], [-0.5, 1.0]])
        r = compute_eofs(cov, k=2)
        for j in range(2):
            lead = np.argmax(np.abs(r.modes[:, j]))
            assert r.modes[lead, j] > 0

    def test_modes_orthonormal(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((6, 6))
        r = compute_eofs(a @ a.T, k=4)
        assert np.abs(r.modes.T @ r.modes - np.eye(4)).max() < 1e-10

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            compute_eofs(np.eye(3), k=4)


class TestSnapshots:
    def test_single_box_snapshot_is_member_mean(self):
        rng = np.random.default_rng(8)
        zeta = rng.standard_normal((20, 5, 1))
        pos = np.full((20, 5, 1), 1.0)
        from fastslow.eof import DisplacementSeries

        d = DisplacementSeries(
            values=zeta, filtered_positions=pos, dt=0.1, domain=(TWO_PI,),
            interior_mean_magnitude=np.zeros(20),
        )
        grid = BoxGrid(domain=(TWO_PI,), shape=(1,))
        snaps, cov = box_mean_snapshots(d, grid, min_count=1)
        assert np.allclose(snaps[:, 0], zeta.mean(axis=0)[:, 0], atol=1e-14)
        assert cov[0] == 1.0


class TestIo:
    def test_csv_round_trip(self, tmp_path):
        b = batch_from(lambda j, t: np.sin(t) + j, n_traj=2, n_times=50)
        p = tmp_path / "traj.csv"
        save_trajectories_csv(b, p)
        back = load_trajectories_csv(p, domain=b.domain)
        assert back.dt == pytest.approx(b.dt)
        assert np.array_equal(back.positions, b.positions)

    def test_csv_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("nope,nope\n1,2\n")
        from fastslow.errors import FileFormatError

        with pytest.raises(FileFormatError):
            load_trajectories_csv(p, domain=(1.0,))

    def test_eof_file_written(self, tmp_path):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((2000, 2))
        pos = rng.uniform(0, TWO_PI, (2000, 2))
        grid = BoxGrid(domain=(TWO_PI, TWO_PI), shape=(2, 2))
        stats = bin_and_covary(z, grid, positions=pos)
        per_box = [
            compute_eofs(stats.covariances[b], 2) if stats.occupied[b] else None
            for b in range(grid.n_boxes)
        ]
        p = tmp_path / "eof.txt"
        write_eof_result(stats, per_box, p)
        text = p.read_text()
        assert text.startswith("fastslow-eof v1")
        assert "covariance" in text and "mode " in text


class TestKs:
    def test_identical_samples_zero(self):
        x = np.linspace(0, 1, 100)
        assert ks_distance(x, x) == 0.0

    def test_disjoint_samples_one(self):
        assert ks_distance(np.zeros(50), np.ones(50)) == 1.0

    def test_shifted_gaussians(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal(20_000)
        b = rng.standard_normal(20_000) + 1.0
        # analytic KS between N(0,1) and N(1,1): 2 Phi(1/2) - 1 ~ 0.3829
        assert ks_distance(a, b) == pytest.approx(0.3829, abs=0.02)
