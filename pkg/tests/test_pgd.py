import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromacro import pgd
from micromacro.errors import ConfigError


@pytest.fixture(scope="module")
def grid():
    return pgd.ProductGrid(128, 128)


def test_grid_validation():
    with pytest.raises(ConfigError):
        pgd.ProductGrid(1, 5)


def test_fast_solver_matches_sparse_oracle():
    g = pgd.ProductGrid(23, 31, 1.0, 2.0)
    f = np.random.default_rng(0).standard_normal((23, 31))
    np.testing.assert_allclose(pgd.poisson_fast(f, g), pgd.poisson_full_grid(f, g), atol=1e-12)
    np.testing.assert_allclose(pgd.neg_laplacian(pgd.poisson_fast(f, g), g), f, atol=1e-9)


def test_h_minus1_norm_examples(grid):
    assert pgd.h_minus1_norm(np.zeros((128, 128)), grid) == 0.0
    f = pgd.separable_rhs(grid)
    assert pgd.h_minus1_norm(f, grid) == pytest.approx(grid.l2(f) / np.sqrt(2 * np.pi**2), rel=1e-3)
    assert pgd.h_minus1_norm(2 * f, grid) == pytest.approx(2 * pgd.h_minus1_norm(f, grid), rel=1e-14)


def test_separable_rhs_one_term(grid):
    sol = pgd.pgd_solve(pgd.separable_rhs(grid), grid, 1e-8)
    assert len(sol.terms) == 1 and sol.converged and sol.residual_history[-1] < 1e-8
    exact = grid.sample(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    assert grid.l2(sol.reconstruct() - exact) < 1e-3
    r, s = sol.terms[0]
    assert np.sqrt(grid.hx * r @ r) == pytest.approx(1.0)
    # proportional to the eigenfunctions
    assert abs(np.corrcoef(r, np.sin(np.pi * grid.x))[0, 1]) == pytest.approx(1.0, abs=1e-10)
    assert abs(np.corrcoef(s, np.sin(np.pi * grid.y))[0, 1]) == pytest.approx(1.0, abs=1e-10)


def test_separable_rank_one_energy_is_optimal(grid):
    f = pgd.separable_rhs(grid)
    step = pgd.pgd_iteration(f, grid)
    exact = grid.sample(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    best = pgd.energy(pgd.poisson_fast(f, grid), f, grid)
    assert pgd.energy(np.outer(step.r, step.s), f, grid) == pytest.approx(best, abs=1e-8)
    assert pgd.rank_one_energy(step.r, step.s, f, grid) == pytest.approx(pgd.energy(np.outer(step.r, step.s), f, grid))
    assert pgd.energy(exact, f, grid) >= best


def test_zero_rhs_gives_zero_pair(grid):
    step = pgd.pgd_iteration(np.zeros((128, 128)), grid)
    assert step.zero and not step.r.any() and not step.s.any()
    sol = pgd.pgd_solve(np.zeros((128, 128)), grid)
    assert sol.terms == [] and sol.converged


def test_non_finite_rhs_rejected(grid):
    f = np.zeros((128, 128))
    f[3, 4] = np.nan
    with pytest.raises(ConfigError):
        pgd.pgd_iteration(f, grid)


def test_constant_rhs_matches_oracle(grid):
    f = np.ones((128, 128))
    sol = pgd.pgd_solve(f, grid, 1e-8)
    assert sol.converged
    assert grid.l2(sol.reconstruct() - pgd.poisson_full_grid(f, grid)) < 1e-6
    assert np.all(np.diff(sol.residual_history) < 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rank_one_beats_random_competitors(seed):
    g = pgd.ProductGrid(20, 24)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((20, 24))
    step = pgd.pgd_iteration(f, g)
    assert step.euler_residual < 10 * 1e-10
    e_opt = pgd.rank_one_energy(step.r, step.s, f, g)
    for _ in range(50):
        r, s = rng.standard_normal(20), rng.standard_normal(24)
        # best scaling of the competitor direction
        tr = np.outer(r, s)
        scale = g.inner(f, tr) / g.inner(tr, pgd.neg_laplacian(tr, g))
        assert e_opt <= pgd.rank_one_energy(scale * r, s, f, g) + 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_greedy_energy_descent(seed):
    g = pgd.ProductGrid(16, 16)
    f = np.random.default_rng(seed).standard_normal((16, 16))
    sol = pgd.pgd_solve(f, g, 1e-10, n_max=12)
    energies = [pgd.energy(p, f, g) for p in sol.partial_sums()]
    assert np.all(np.diff([0.0] + energies) < 0)
    assert np.all(np.diff(sol.residual_history) <= 0)


def test_energy_error_equals_dual_residual(grid):
    f = grid.sample(lambda x, y: 1.0 / (1.0 + x + y))
    sol = pgd.pgd_solve(f, grid, 1e-6, n_max=10)
    ref = pgd.poisson_fast(f, grid)
    errs = [pgd.energy_norm(ref - p, grid) for p in sol.partial_sums()]
    np.testing.assert_allclose(errs, sol.residual_history[1:], rtol=1e-6)


def test_n_max_flag():
    g = pgd.ProductGrid(16, 16)
    sol = pgd.pgd_solve(np.random.default_rng(1).standard_normal((16, 16)), g, 1e-14, n_max=3)
    assert len(sol.terms) == 3 and "n_max" in sol.flags and not sol.converged
    with pytest.raises(ConfigError):
        pgd.pgd_solve(np.ones((16, 16)), g, 0.0)


def test_als_warning_flag():
    g = pgd.ProductGrid(16, 16)
    with pytest.warns(RuntimeWarning):
        sol = pgd.pgd_solve(np.random.default_rng(2).standard_normal((16, 16)), g, 1e-8, n_max=2, als_tol=1e-300,
                            als_max=2)
    assert any(flag.startswith("als_unconverged") for flag in sol.flags)


def test_rate_report_skips_separable(grid):
    sol = pgd.pgd_solve(pgd.separable_rhs(grid), grid)
    rep = pgd.convergence_rate_report(sol, pgd.poisson_fast(pgd.separable_rhs(grid), grid))
    assert rep.skipped and np.isnan(rep.slope)


def test_smooth_rhs_rate(grid):
    f = grid.sample(lambda x, y: 1.0 / (1.0 + x + y))
    sol = pgd.pgd_solve(f, grid, 1e-8)
    rep = pgd.convergence_rate_report(sol, pgd.poisson_full_grid(f, grid))
    assert not rep.skipped and rep.slope <= -0.3
    assert np.all(np.diff(rep.errors) <= 0)
