import numpy as np
import pytest

import rsmp
from rsmp import LQSpec, NonPSD, UnknownBenchmark
from rsmp.forward import pathwise_cost


class TestRiccatiOracle:
    def test_zero_costs_give_zero_solution(self):
        spec = LQSpec(A=[[0.3]], B=[[1.0]], Sigma0=[[0.2]], R_x=[[0.0]], R_u=[[1.0]],
                      G=[[0.0]], T=1.0, x0=np.array([1.0]))
        sol = rsmp.lq_riccati_oracle(spec, 200)
        assert np.allclose(sol.P, 0.0, atol=0)
        assert sol.optimal_cost == 0.0
        assert np.allclose(sol.feedback(0.5, np.array([[2.0]])), 0.0, atol=0)

    def test_scalar_closed_form(self):
        # A=0, B=1, R_u=1, R_x=0, G=g gives P(t) = g / (1 + g (T - t))
        g = 0.8
        spec = LQSpec(A=[[0.0]], B=[[1.0]], Sigma0=[[0.0]], R_x=[[0.0]], R_u=[[1.0]],
                      G=[[g]], T=1.0, x0=np.array([1.0]))
        sol = rsmp.lq_riccati_oracle(spec, 400)
        exact = g / (1.0 + g * (1.0 - sol.ts))
        assert np.abs(sol.P[:, 0, 0] - exact).max() <= 1e-10

    def test_doubling_resolution_is_converged(self):
        spec = rsmp.benchmark_lq_spec("lq1d")
        a = rsmp.lq_riccati_oracle(spec, 640)
        b = rsmp.lq_riccati_oracle(spec, 1280)
        assert abs(a.optimal_cost - b.optimal_cost) <= 1e-8 * abs(b.optimal_cost)

    def test_rejects_asymmetric_cost(self):
        with pytest.raises(NonPSD):
            LQSpec(A=[[0.0]], B=[[1.0]], Sigma0=[[0.1]], R_x=[[1.0]], R_u=[[-1.0]],
                   G=[[0.0]], T=1.0, x0=np.array([1.0]))

    def test_feedback_simulation_reproduces_optimal_cost(self):
        # closing the loop with the oracle feedback must recover its cost
        # prediction within Monte Carlo noise once the grid is fine enough
        p = rsmp.make_benchmark("lq1d")
        spec = rsmp.benchmark_lq_spec("lq1d")
        ric = rsmp.lq_riccati_oracle(spec, 10240)
        M, N = 50_000, 1024
        noise = rsmp.sample_noise(p, M, N, seed=101)
        costs = pathwise_cost(p, rsmp.simulate(p, ric.feedback, noise))
        se = costs.std(ddof=1) / np.sqrt(M)
        assert abs(costs.mean() - ric.optimal_cost) <= 3 * se

    def test_two_dimensional_instance(self):
        spec = rsmp.benchmark_lq_spec("lq2d")
        sol = rsmp.lq_riccati_oracle(spec, 500)
        assert sol.P.shape == (500 + 1, 2, 2)
        assert np.all(np.linalg.eigvalsh(sol.P[0]) >= -1e-12)


class TestMakeBenchmark:
    def test_lq1d_dimensions(self):
        p = rsmp.make_benchmark("lq1d")
        assert (p.n, p.m, p.d) == (1, 1, 1)
        assert p.T == 1.0
        assert p.jump is None

    def test_nonconvex_grid_has_two_atoms(self):
        grid = rsmp.benchmark_grid("nonconvex-mix")
        assert grid.K == 2
        assert set(grid.points[:, 0]) == {-1.0, 1.0}

    def test_jump_lq_has_two_marks(self):
        p = rsmp.make_benchmark("jump-lq")
        assert p.jump is not None
        assert p.jump.J == 2
        assert p.jump.total_intensity > 0

    def test_unknown_name_raises(self):
        with pytest.raises(UnknownBenchmark):
            rsmp.make_benchmark("not-a-benchmark")

    def test_describe_lists_constants(self):
        doc = rsmp.describe("lq1d")
        assert doc["lq"]["A"] == [[-0.2]]
        doc2 = rsmp.describe("nonconvex-mix")
        assert doc2["sigma"] == 0.3


class TestNonconvexOracle:
    def test_optimal_profile_is_balanced(self):
        cost, profile = rsmp.nonconvex_weight_oracle(N=8)
        # all steps before the last drive the mean; the last is cost-free
        assert np.allclose(profile[:-1], 0.5, atol=1e-12)
        sigma = 0.3
        dt = 1.0 / 8
        assert cost == pytest.approx(sigma**2 * dt**2 * 28, rel=1e-12)

    def test_oracle_matches_direct_enumeration_small(self):
        # exhaustive check at a coarse resolution on a short horizon
        import itertools

        N, res, sigma, T = 3, 0.5, 0.3, 1.0
        dt = T / N
        best = np.inf
        for prof in itertools.product(np.arange(0.0, 1.0 + 1e-9, res), repeat=N):
            m = 0.0
            acc = 0.0
            for k in range(N):
                acc += (m * m + sigma * sigma * k * dt) * dt
                m += (2 * prof[k] - 1.0) * dt
            best = min(best, acc)
        cost, _ = rsmp.nonconvex_weight_oracle(N=N, resolution=res, sigma=sigma, T=T)
        assert cost == pytest.approx(best, rel=1e-12)


class TestBruteForceRegular:
    def test_single_atom_grid_trivial(self):
        p = rsmp.make_benchmark("nonconvex-mix")
        grid = rsmp.ControlGrid([[1.0]], p.control_box)
        noise = rsmp.sample_noise(p, 200, 4, seed=3)
        costs, profile = rsmp.best_regular_open_loop(p, grid, noise)
        assert profile.tolist() == [0, 0, 0, 0]
        u = rsmp.constant_control(grid, 4)
        direct = pathwise_cost(p, rsmp.simulate(p, u, noise))
        assert np.allclose(costs, direct, atol=0)
