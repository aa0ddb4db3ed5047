import io

import numpy as np
import pytest

import rsmp
from rsmp import BlowUp, ControlGrid, JumpSpec, Problem, ShapeMismatch
from rsmp.container import TAG_PATHS, paths_to_binary, read_section
from rsmp.forward import pathwise_cost


def scalar_problem(b=None, sigma=None, ell=None, phi=None, x0=0.0, jump=None, T=1.0):
    def zero_b(t, x, xi):
        return np.zeros(np.shape(x))

    def zero_mat(t, x, xi):
        return np.zeros(np.shape(x)[:-1] + (1, 1))

    def zero_scalar(t, x, xi):
        return np.zeros(np.shape(x)[:-1])

    def zero_phi(x):
        return np.zeros(np.shape(x)[:-1])

    return Problem(
        n=1, m=1, d=1, T=T, x0=np.array([x0]),
        b=b or zero_b,
        sigma=sigma or zero_mat,
        ell=ell or zero_scalar,
        phi=phi or zero_phi,
        control_box=[[-1.0, 1.0]],
        jump=jump,
    )


def unit_grid():
    return ControlGrid([[0.0]], [[-1.0, 1.0]])


class TestSampleNoise:
    def test_no_jump_spec_no_counts(self):
        p = scalar_problem()
        noise = rsmp.sample_noise(p, 10, 4, seed=1)
        assert noise.jump_counts is None

    def test_same_seed_bit_identical(self):
        p = scalar_problem()
        a = rsmp.sample_noise(p, 50, 8, seed=42)
        b = rsmp.sample_noise(p, 50, 8, seed=42)
        assert np.array_equal(a.dW, b.dW)

    def test_different_seed_differs(self):
        p = scalar_problem()
        a = rsmp.sample_noise(p, 50, 8, seed=42)
        b = rsmp.sample_noise(p, 50, 8, seed=43)
        assert not np.array_equal(a.dW, b.dW)

    def test_moments_at_scale(self):
        # standard normal moment oracle: mean in the 4-sigma band, variance within 1%
        p = scalar_problem()
        M, N = 100_000, 1
        noise = rsmp.sample_noise(p, M, N, seed=7)
        dt = p.T / N
        draws = noise.dW.ravel()
        assert abs(draws.mean()) <= 4 * np.sqrt(dt / (M * N))
        assert 0.99 <= draws.var() / dt <= 1.01

    def test_mean_band_invariant_small(self):
        p = scalar_problem()
        M, N = 2000, 16
        noise = rsmp.sample_noise(p, M, N, seed=3)
        dt = p.T / N
        assert abs(noise.dW.mean()) <= 4 * np.sqrt(dt / (M * N))

    def test_jump_counts_poisson_mean(self):
        jump = JumpSpec(np.array([[1.0]]), np.array([2.0]), C=lambda t, x, v, xi: np.broadcast_to(v, np.shape(x)))
        p = scalar_problem(jump=jump)
        noise = rsmp.sample_noise(p, 20_000, 8, seed=5)
        lam_dt = 2.0 / 8
        mean = noise.jump_counts.mean()
        assert abs(mean - lam_dt) <= 4 * np.sqrt(lam_dt / (20_000 * 8))

    def test_coarsen_sums_increments(self):
        p = scalar_problem()
        fine = rsmp.sample_noise(p, 30, 8, seed=9)
        coarse = fine.coarsen(4)
        assert coarse.N == 2
        assert np.allclose(coarse.dW[:, 0, 0], fine.dW[:, :4, 0].sum(axis=1), atol=0)
        assert coarse.dt == pytest.approx(4 * fine.dt)


class TestSimulate:
    def test_zero_dynamics_constant_paths(self):
        p = scalar_problem(x0=1.5)
        u = rsmp.constant_control(unit_grid(), 8)
        paths = rsmp.simulate(p, u, rsmp.sample_noise(p, 20, 8, seed=1))
        assert np.array_equal(paths.states, np.full((20, 9, 1), 1.5))

    def test_pure_brownian_variance(self):
        def sigma(t, x, xi):
            return np.ones(np.shape(x)[:-1] + (1, 1))

        p = scalar_problem(sigma=sigma)
        M = 20_000
        u = rsmp.constant_control(unit_grid(), 16)
        paths = rsmp.simulate(p, u, rsmp.sample_noise(p, M, 16, seed=2))
        increments = paths.states[:, -1, 0] - paths.states[:, 0, 0]
        assert np.allclose(increments, paths.noise.dW.sum(axis=1)[:, 0], atol=1e-12)
        assert abs(increments.var() - p.T) <= 3 * np.sqrt(2.0 / M) * p.T

    def test_compensated_jump_mean_zero(self):
        c, lam = 0.7, 3.0
        jump = JumpSpec(np.array([[1.0]]), np.array([lam]),
                        C=lambda t, x, v, xi: np.full(np.shape(x), c))
        p = scalar_problem(jump=jump)
        M = 20_000
        u = rsmp.constant_control(unit_grid(), 16)
        paths = rsmp.simulate(p, u, rsmp.sample_noise(p, M, 16, seed=4))
        drift = paths.states[:, -1, 0] - paths.states[:, 0, 0]
        assert abs(drift.mean()) <= 4 * c * np.sqrt(lam * p.T / M)

    def test_blow_up_guard(self):
        def huge(t, x, xi):
            return np.full(np.shape(x), 1e12)

        p = scalar_problem(b=huge)
        u = rsmp.constant_control(unit_grid(), 4)
        with pytest.raises(BlowUp) as exc:
            rsmp.simulate(p, u, rsmp.sample_noise(p, 5, 4, seed=1))
        assert exc.value.step == 0

    def test_step_count_mismatch(self):
        p = scalar_problem()
        u = rsmp.constant_control(unit_grid(), 8)
        with pytest.raises(ShapeMismatch):
            rsmp.simulate(p, u, rsmp.sample_noise(p, 5, 4, seed=1))

    def test_bit_identical_across_threads(self):
        p = rsmp.make_benchmark("lq1d")
        grid = rsmp.benchmark_grid("lq1d")
        u = rsmp.constant_control(grid, 8)
        noise = rsmp.sample_noise(p, 20_000, 8, seed=11)
        a = rsmp.simulate(p, u, noise, threads=1)
        b = rsmp.simulate(p, u, noise, threads=4)
        assert np.array_equal(a.states, b.states)

    def test_bit_identical_rerun(self):
        p = rsmp.make_benchmark("lq1d")
        u = rsmp.constant_control(rsmp.benchmark_grid("lq1d"), 8)
        a = rsmp.simulate(p, u, rsmp.sample_noise(p, 200, 8, seed=13))
        b = rsmp.simulate(p, u, rsmp.sample_noise(p, 200, 8, seed=13))
        assert np.array_equal(a.states, b.states)


class TestCommonRandomNumbers:
    def test_variance_reduction_on_nearby_controls(self):
        p = rsmp.make_benchmark("lq1d")
        grid = rsmp.benchmark_grid("lq1d")
        N, M = 16, 4000
        u1 = rsmp.constant_control(grid, N)
        w = np.full((N, 1, grid.K), 1.0 / grid.K)
        w[:, 0, 0] += 0.05
        w[:, 0, -1] -= 0.05
        u2 = rsmp.RelaxedControl(grid, w)
        common = rsmp.sample_noise(p, M, N, seed=17)
        other = rsmp.sample_noise(p, M, N, seed=18)
        c1 = pathwise_cost(p, rsmp.simulate(p, u1, common))
        c2_common = pathwise_cost(p, rsmp.simulate(p, u2, common))
        c2_other = pathwise_cost(p, rsmp.simulate(p, u2, other))
        var_common = (c1 - c2_common).var()
        var_independent = (c1 - c2_other).var()
        assert var_common < 0.5 * var_independent


class TestWeakConvergence:
    def test_first_order_cost_bias(self):
        # same Brownian paths on N, 2N, 4N grids via coarsening; the cost
        # differences between successive refinements shrink about 2x
        p = rsmp.make_benchmark("lq1d")
        spec = rsmp.benchmark_lq_spec("lq1d")
        ric = rsmp.lq_riccati_oracle(spec, 1000)
        M, N4 = 200_000, 32
        fine = rsmp.sample_noise(p, M, N4, seed=23)
        costs = {}
        for noise in (fine, fine.coarsen(2), fine.coarsen(4)):
            paths = rsmp.simulate(p, ric.feedback, noise)
            costs[noise.N] = pathwise_cost(p, paths).mean()
        d_coarse = abs(costs[8] - costs[16])
        d_fine = abs(costs[16] - costs[32])
        assert 1.6 <= d_coarse / d_fine <= 2.6


class TestCost:
    def test_zero_costs(self):
        p = scalar_problem()
        u = rsmp.constant_control(unit_grid(), 4)
        est, se = rsmp.cost(p, rsmp.simulate(p, u, rsmp.sample_noise(p, 50, 4, seed=1)))
        assert est == 0.0 and se == 0.0

    def test_unit_running_cost_gives_horizon(self):
        def one(t, x, xi):
            return np.ones(np.shape(x)[:-1])

        p = scalar_problem(ell=one, T=2.0)
        u = rsmp.constant_control(unit_grid(), 8)
        est, se = rsmp.cost(p, rsmp.simulate(p, u, rsmp.sample_noise(p, 50, 8, seed=1)))
        assert est == pytest.approx(2.0, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_terminal_second_moment_matches_brownian(self):
        def sigma(t, x, xi):
            return np.ones(np.shape(x)[:-1] + (1, 1))

        def phi(x):
            x = np.asarray(x)
            return np.einsum("...i,...i->...", x, x)

        p = scalar_problem(sigma=sigma, phi=phi)
        u = rsmp.constant_control(unit_grid(), 32)
        est, se = rsmp.cost(p, rsmp.simulate(p, u, rsmp.sample_noise(p, 20_000, 32, seed=3)))
        assert abs(est - p.T) <= 4 * se


class TestExports:
    def test_csv_shape_and_determinism(self):
        p = rsmp.make_benchmark("lq1d")
        u = rsmp.constant_control(rsmp.benchmark_grid("lq1d"), 4)
        paths = rsmp.simulate(p, u, rsmp.sample_noise(p, 3, 4, seed=7))
        text = rsmp.paths_to_csv_string(paths)
        lines = text.strip().split("\n")
        assert lines[0] == "path,step,t,x0"
        assert len(lines) == 1 + 3 * 5
        assert text == rsmp.paths_to_csv_string(paths)
        assert "\r" not in text

    def test_binary_round_trip(self):
        p = rsmp.make_benchmark("jump-lq")
        u = rsmp.constant_control(rsmp.benchmark_grid("jump-lq"), 4)
        paths = rsmp.simulate(p, u, rsmp.sample_noise(p, 5, 4, seed=9))
        buf = io.BytesIO()
        paths_to_binary(paths, buf)
        buf.seek(0)
        tag, meta, arrays = read_section(buf)
        assert tag == TAG_PATHS
        assert meta["M"] == 5 and meta["N"] == 4
        assert np.array_equal(arrays["states"], paths.states)
        assert np.array_equal(arrays["dW"], paths.noise.dW)
        assert np.array_equal(arrays["jump_counts"], paths.noise.jump_counts)
