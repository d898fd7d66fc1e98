"""SDE integrator tests: laws, conversion identities, transport diagnostics."""

import numpy as np
import pytest

from fastslow.errors import ConfigError
from fastslow.sde import (
    SdeSpec,
    advect_density_particles,
    euler_maruyama_step,
    simulate_sde_ensemble,
    stratonovich_heun_step,
)
from fastslow.velocity import LinearField, UniformField, ZeroField


def const_sigma(value, d=1):
    mat = np.eye(d) * value

    def sigma(x, t=0.0):
        x = np.asarray(x)
        return np.broadcast_to(mat, x.shape[:-1] + (d, d)).copy()

    return sigma


def linear_sigma():
    def sigma(x, t=0.0):
        return np.asarray(x)[..., None] * np.ones((1, 1))

    return sigma


class TestEulerMaruyama:
    def test_zero_noise_constant_drift(self):
        spec = SdeSpec(
            drift=lambda x, t: np.full_like(x, 0.3),
            sigma=const_sigma(0.0),
            interpretation="ito", dt=0.1, t_final=0.1, x0=np.array([1.0]),
        )
        out = euler_maruyama_step(np.array([[1.0]]), spec, np.array([[0.7]]))
        assert out[0, 0] == pytest.approx(1.0 + 0.3 * 0.1, abs=1e-15)

    def test_brownian_law(self):
        n = 100_000
        spec = SdeSpec(
            drift=lambda x, t: np.zeros_like(x), sigma=const_sigma(1.0),
            interpretation="ito", dt=0.01, t_final=1.0, n_members=n, seed=21,
            x0=np.array([0.5]),
        )
        rep = simulate_sde_ensemble(spec)
        assert abs(rep.mean[0] - 0.5) <= 3.0 * rep.mean_stderr[0]
        assert abs(rep.cov[0, 0] - 1.0) <= 3.0 * rep.var_stderr[0]

    def test_disjoint_increments_uncorrelated(self):
        n = 50_000
        rng = np.random.default_rng(3)
        spec = SdeSpec(
            drift=lambda x, t: np.zeros_like(x), sigma=const_sigma(1.0),
            interpretation="ito", dt=0.5, t_final=0.5, x0=np.array([0.0]),
        )
        x0 = np.zeros((n, 1))
        d1 = euler_maruyama_step(x0, spec, rng.standard_normal((n, 1)) * np.sqrt(0.5)) - x0
        x1 = x0 + d1
        d2 = euler_maruyama_step(x1, spec, rng.standard_normal((n, 1)) * np.sqrt(0.5)) - x1
        corr = np.corrcoef(d1[:, 0], d2[:, 0])[0, 1]
        assert abs(corr) < 3.0 / np.sqrt(n)

    def test_requires_ito(self):
        spec = SdeSpec(
            drift=lambda x, t: x, sigma=const_sigma(1.0),
            interpretation="stratonovich", dt=0.1, t_final=0.1, x0=np.array([0.0]),
        )
        with pytest.raises(ConfigError):
            euler_maruyama_step(np.zeros((1, 1)), spec, np.zeros((1, 1)))

    def test_weak_order_one_geometric(self):
        # E[X_EM(T)] for dX = aX dt + bX dW is X0 (1 + a dt)^(T/dt) exactly in
        # expectation; the exact-path control variate shrinks the Monte Carlo
        # noise far below the bias being measured.
        a, b, t_final, n = 1.0, 0.5, 1.0, 100_000
        errors = []
        for dt in (1e-2, 5e-3, 2.5e-3):
            n_steps = int(round(t_final / dt))
            rng = np.random.default_rng(17)
            x = np.ones(n)
            w = np.zeros(n)
            for _ in range(n_steps):
                dw = rng.standard_normal(n) * np.sqrt(dt)
                x = x + a * x * dt + b * x * dw
                w += dw
            exact_paths = np.exp((a - 0.5 * b * b) * t_final + b * w)
            est_mean = np.mean(x - exact_paths) + np.exp(a * t_final)
            errors.append(abs(est_mean - np.exp(a * t_final)))
        slopes = [np.log2(errors[i] / errors[i + 1]) for i in range(2)]
        assert all(0.7 <= s <= 1.3 for s in slopes)


class TestStratonovichHeun:
    def test_zero_noise_deterministic_step(self):
        def xi(q, t=0.0):
            return np.zeros(q.shape[:-1] + (0, q.shape[-1]))

        u = UniformField(velocity=(2.0,))
        out = stratonovich_heun_step(np.array([[1.0]]), u, xi, 0.25, np.zeros((1, 0)))
        assert out[0, 0] == pytest.approx(1.5, abs=1e-15)

    def test_geometric_noise_log_mean(self):
        n = 100_000
        spec = SdeSpec(
            drift=lambda x, t: np.zeros_like(x), sigma=linear_sigma(),
            interpretation="stratonovich", dt=0.01, t_final=1.0, n_members=n,
            seed=5, x0=np.array([1.0]),
        )
        rep = simulate_sde_ensemble(spec)
        logs = np.log(rep.endpoints[:, 0])
        se = logs.std(ddof=1) / np.sqrt(n)
        assert abs(logs.mean()) <= 3.0 * se

    def test_heun_matches_corrected_euler_law(self):
        # dq = q o dW == dq = (1/2) q dt + q dW: means and variances of
        # ln(q_T) agree within 3 joint standard errors
        # dt small enough that the two schemes' O(dt) biases sit well below
        # the statistical resolution
        n = 100_000
        strat = SdeSpec(
            drift=lambda x, t: np.zeros_like(x), sigma=linear_sigma(),
            interpretation="stratonovich", dt=0.002, t_final=1.0, n_members=n,
            seed=6, x0=np.array([1.0]),
        )
        ito = SdeSpec(
            drift=lambda x, t: 0.5 * x, sigma=linear_sigma(),
            interpretation="ito", dt=0.002, t_final=1.0, n_members=n,
            seed=7, x0=np.array([1.0]),
        )
        ls = np.log(simulate_sde_ensemble(strat).endpoints[:, 0])
        li = np.log(simulate_sde_ensemble(ito).endpoints[:, 0])
        se_mean = np.hypot(ls.std(ddof=1), li.std(ddof=1)) / np.sqrt(n)
        assert abs(ls.mean() - li.mean()) <= 3.0 * se_mean
        se_var = np.hypot(ls.var(ddof=1), li.var(ddof=1)) * np.sqrt(2.0 / n)
        assert abs(ls.var(ddof=1) - li.var(ddof=1)) <= 3.0 * se_var

    def test_interpretation_separation(self):
        # state-dependent sigma: Ito and Stratonovich integrations of the
        # same fields differ by the (1/2) sigma sigma' drift in the mean
        n = 200_000
        base = dict(
            drift=lambda x, t: np.zeros_like(x), sigma=linear_sigma(),
            dt=0.005, t_final=0.5, n_members=n, x0=np.array([1.0]),
        )
        rep_s = simulate_sde_ensemble(SdeSpec(interpretation="stratonovich", seed=8, **base))
        rep_i = simulate_sde_ensemble(SdeSpec(interpretation="ito", seed=9, **base))
        # E[q_T]: Stratonovich = e^{T/2}, Ito = 1
        t = 0.5
        se = np.hypot(rep_s.mean_stderr[0], rep_i.mean_stderr[0])
        gap = rep_s.mean[0] - rep_i.mean[0]
        assert abs(gap - (np.exp(t / 2.0) - 1.0)) <= 4.0 * se


class TestEnsembleReports:
    def test_zero_noise_degenerate(self):
        spec = SdeSpec(
            drift=UniformField(velocity=(0.2,)), sigma=const_sigma(0.0),
            interpretation="ito", dt=0.01, t_final=1.0, n_members=32, seed=1,
            x0=np.array([1.0]),
        )
        rep = simulate_sde_ensemble(spec)
        assert np.allclose(rep.endpoints, 1.2, atol=1e-12)
        assert rep.cov[0, 0] == pytest.approx(0.0, abs=1e-25)

    def test_seed_determinism_and_separation(self):
        base = dict(
            drift=lambda x, t: np.zeros_like(x), sigma=const_sigma(1.0),
            interpretation="ito", dt=0.1, t_final=1.0, n_members=100,
            x0=np.array([0.0]),
        )
        a = simulate_sde_ensemble(SdeSpec(seed=11, **base))
        b = simulate_sde_ensemble(SdeSpec(seed=11, **base))
        c = simulate_sde_ensemble(SdeSpec(seed=12, **base))
        assert np.array_equal(a.endpoints, b.endpoints)
        assert not np.array_equal(a.endpoints, c.endpoints)

    def test_cdf_is_monotone_in_01(self):
        spec = SdeSpec(
            drift=lambda x, t: np.zeros_like(x), sigma=const_sigma(1.0),
            interpretation="ito", dt=0.05, t_final=1.0, n_members=1000, seed=2,
            x0=np.array([0.0]),
        )
        rep = simulate_sde_ensemble(spec)
        assert np.all(np.diff(rep.cdf[0]) >= 0.0)
        assert rep.cdf[0][0] == 0.0 and rep.cdf[0][-1] == 1.0


class TestTransport:
    def test_divergence_free_keeps_unit_jacobian(self):
        a = np.array([[0.0, 1.3], [-0.2, 0.0]])  # trace zero
        u = LinearField(matrix=tuple(map(tuple, a)))
        xi = [UniformField(velocity=(0.3, 0.1)), UniformField(velocity=(-0.2, 0.4))]
        rng = np.random.default_rng(3)
        pos = rng.uniform(-1, 1, (500, 2))
        res = advect_density_particles(pos, np.ones(500), u, xi, dt=0.01, t_final=1.0, seed=4)
        assert np.abs(res.jacobians - 1.0).max() < 1e-6
        assert np.abs(res.density_ratio - 1.0).max() < 1e-6

    def test_saddle_flow_closed_form(self):
        al = 0.8
        u = LinearField(matrix=((al, 0.0), (0.0, -al)))
        res = advect_density_particles(
            np.array([[1.0, 1.0]]), np.array([2.0]), u, [], dt=1e-4, t_final=1.0, seed=5
        )
        assert np.abs(res.positions[0] - [np.exp(al), np.exp(-al)]).max() < 1e-8
        assert res.jacobians[0] == pytest.approx(1.0, abs=1e-12)

    def test_weight_conservation_bit_exact(self):
        rng = np.random.default_rng(6)
        w = rng.uniform(0.0, 3.0, 200)
        u = LinearField(matrix=((0.1, 0.0), (0.0, -0.1)))
        res = advect_density_particles(
            rng.uniform(-1, 1, (200, 2)), w, u, [UniformField(velocity=(0.1, 0.0))],
            dt=0.01, t_final=0.5, seed=7,
        )
        assert res.total_weight_initial == res.total_weight_final
        assert res.mass_conserved
        assert np.array_equal(res.weights, w)

    def test_compressible_flow_tracks_volume(self):
        # u = alpha x in 1d: J_t = e^{alpha t}
        al = 0.5
        u = LinearField(matrix=((al,),))
        res = advect_density_particles(
            np.array([[0.3]]), np.array([1.0]), u, [], dt=1e-3, t_final=1.0, seed=8
        )
        assert res.jacobians[0] == pytest.approx(np.exp(al), rel=1e-6)
        assert res.density_ratio[0] == pytest.approx(np.exp(-al), rel=1e-6)

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            advect_density_particles(
                np.zeros((1, 1)), np.array([-1.0]), ZeroField(dim=1), [], 0.1, 0.1
            )
