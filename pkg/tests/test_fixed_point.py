import math

import numpy as np
import pytest

from conftest import cosine, cross_phi, small_cfg, small_grid
from wchj import (
    InitialData,
    OperatorConfig,
    SolveNotConverged,
    TorusGrid,
    VectorField,
    apply_operator,
    contraction_probe,
    semigroup_step,
    solve,
    sup_norm,
)
from wchj.fixed_point import SolveReport, factorial_bound


def test_factorial_bound():
    assert factorial_bound(0.5, 1.0, 0) == 1.0
    assert factorial_bound(0.5, 1.0, 3) == pytest.approx(0.125 / 6, rel=1e-14)
    assert factorial_bound(3.0, 2.0, 10) == pytest.approx(6.0**10 / math.factorial(10), rel=1e-12)


class TestSolve:
    def test_decoupled_settles_after_one_step(self, decoupled):
        grid = small_grid(32, 0.25, 16)
        phi = InitialData.from_function(grid, cosine)
        _, rep = solve(decoupled, grid, phi, small_cfg(), tol=1e-9)
        assert rep.converged
        assert rep.residuals[1] <= 1e-12
        assert rep.iterations == 2

    def test_cross_coupling_rate(self, cross):
        grid = TorusGrid(1, 64, 0.5, 64)
        phi = cross_phi(grid)
        u, rep = solve(cross, grid, phi, OperatorConfig(v_max=8.0), tol=1e-10, max_iter=60)
        r = rep.residuals
        assert rep.converged and rep.iterations <= 45
        assert all(r[j + 1] / r[j] <= 0.5 for j in range(len(r) - 1))
        assert max(rep.envelope_excess()) <= 0.0
        assert all(x > 0 for x in r[:-1])
        # the envelope is a function of T, theta and the first residual only
        expected = [0.5**j / math.factorial(j) * r[0] for j in range(len(r))]
        np.testing.assert_allclose(rep.predicted_bounds, expected, rtol=1e-14)
        fixed = apply_operator(cross, grid, phi, u, OperatorConfig(v_max=8.0))
        assert sup_norm(fixed - u) <= 1e-10

    def test_shift_equivariance(self, decoupled):
        grid = small_grid(32, 0.25, 16)
        base = InitialData(np.cos(2 * np.pi * np.arange(32) / 32)[None, :])
        u, _ = solve(decoupled, grid, base, small_cfg())
        v, _ = solve(decoupled, grid, InitialData(base.values + 2.5), small_cfg())
        np.testing.assert_allclose(v.values, u.values + 2.5, rtol=0, atol=1e-12)

    def test_restriction(self, cross):
        tol = 1e-9
        short = TorusGrid(1, 32, 0.25, 16)
        long = TorusGrid(1, 32, 0.5, 32)
        cfg = small_cfg()
        us, _ = solve(cross, short, cross_phi(short), cfg, tol=tol)
        ul, _ = solve(cross, long, cross_phi(long), cfg, tol=tol)
        assert np.max(np.abs(ul.values[:, :17] - us.values)) <= 2 * tol

    def test_large_horizon_residual(self, cross):
        # T theta > 1 tightens the stopping rule so the fixed-point residual still meets tol
        grid = TorusGrid(1, 16, 2.0, 32)
        phi = cross_phi(grid)
        cfg = OperatorConfig(v_max=4.0)
        u, rep = solve(cross, grid, phi, cfg, tol=1e-8, max_iter=80)
        assert sup_norm(apply_operator(cross, grid, phi, u, cfg) - u) <= 1e-8

    def test_not_converged_carries_report(self, cross):
        grid = small_grid(16, 0.5, 8)
        with pytest.raises(SolveNotConverged) as err:
            solve(cross, grid, cross_phi(grid), small_cfg(), tol=1e-12, max_iter=2)
        assert err.value.report.iterations == 2 and not err.value.report.converged

    def test_bad_tol(self, cross):
        grid = small_grid(16, 0.5, 8)
        with pytest.raises(ValueError):
            solve(cross, grid, cross_phi(grid), small_cfg(), tol=0.0)


class TestReport:
    def test_csv(self, tmp_path):
        rep = SolveReport(T=0.5, theta=1.0, tol=1e-9, residuals=[1.0, 0.25], iteration_times=[0.1, 0.2])
        path = tmp_path / "r.csv"
        rep.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines == ["iter,residual,predicted_bound,wall_time_s", "0,1,1,0.100000", "1,0.25,0.5,0.200000"]
        rep.write_csv(path, include_timing=False)
        assert path.read_text().splitlines()[1] == "0,1,1,"

    def test_error_bound(self):
        rep = SolveReport(T=0.5, theta=1.0, tol=1e-9, residuals=[1.0, 1e-10])
        assert rep.error_bound() == pytest.approx(1e-10 * (math.exp(0.5) - 1), rel=1e-12)
        assert SolveReport(0.5, 1.0, 1e-9).error_bound() == math.inf


class TestSemigroup:
    def test_one_step_zero(self, decoupled):
        grid = small_grid(16, 0.5, 8)
        out = semigroup_step(decoupled, grid, np.zeros((1, 16)), grid.dt, small_cfg())
        assert np.all(out.values == 0.0)

    def test_zero_time_identity(self, cross):
        grid = small_grid(16, 0.5, 8)
        phi = cross_phi(grid)
        out = semigroup_step(cross, grid, phi, 0.0, small_cfg())
        np.testing.assert_array_equal(out.values, phi.values)

    def test_non_grid_time(self, cross):
        grid = small_grid(16, 0.5, 8)
        with pytest.raises(ValueError, match="non-grid time"):
            semigroup_step(cross, grid, cross_phi(grid), 0.3 * grid.dt, small_cfg())

    def test_matches_solve(self, cross):
        grid = small_grid(32, 0.25, 16)
        phi = InitialData(cross_phi(grid).values)
        u, _ = solve(cross, grid, phi, small_cfg())
        step = semigroup_step(cross, grid, phi, 8 * grid.dt, small_cfg())
        direct, _ = solve(cross, TorusGrid(1, 32, 8 * grid.dt, 8), phi, small_cfg())
        np.testing.assert_array_equal(step.values, direct.values[:, -1])
        # the half-horizon slice of the full solve solves the same problem
        np.testing.assert_allclose(step.values, u.values[:, 8], rtol=0, atol=2e-9)


class TestProbe:
    def test_equal_fields(self, cross):
        grid = small_grid(16, 0.5, 8)
        phi = cross_phi(grid)
        u = VectorField.constant_in_time(grid, phi)
        rows = contraction_probe(cross, grid, phi, u, u.copy(), small_cfg())
        assert all(r.measured == 0.0 and r.bound == 0.0 for r in rows)

    def test_constant_offset_saturates(self, cross):
        grid = small_grid(16, 0.5, 8)
        phi = cross_phi(grid)
        eps = 0.01
        u = VectorField.zeros(grid, 2)
        v = VectorField(grid, np.full(u.values.shape, eps))
        rows = contraction_probe(cross, grid, phi, u, v, small_cfg())
        for r in rows:
            assert r.measured == pytest.approx(r.k * grid.dt * eps, abs=1e-15)
            assert not r.violated

    def test_random_trials(self, cross):
        grid = small_grid(16, 0.5, 8)
        phi = cross_phi(grid)
        cfg = small_cfg()
        from wchj.lax_oleinik import SweepPlan

        plan = SweepPlan(cross, grid, phi, cfg)
        x = np.arange(16) / 16
        t = grid.times
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a, b = rng.normal(size=(2, 2, 3))
            # smooth random fields: low Fourier modes in x, modulated in t
            fu = a[:, 0, None, None] * np.cos(2 * np.pi * x + a[:, 1, None, None]) * (1 + a[:, 2, None, None] * t[:, None])
            fv = b[:, 0, None, None] * np.sin(4 * np.pi * x + b[:, 1, None, None]) * (1 + b[:, 2, None, None] * t[:, None])
            rows = contraction_probe(cross, grid, phi, VectorField(grid, fu), VectorField(grid, fv), cfg, plan)
            assert not any(r.violated for r in rows)
