import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from micromacro import fokker_planck as fp
from micromacro.dumbbell import FlowParams, ForceModel, evolve_ensemble, kramers_stress, sample_equilibrium
from micromacro.errors import ConfigError, NoStationaryState, SupportViolation

HOOKEAN = ForceModel.hookean()
FENE9 = ForceModel.fene(9.0)
ZERO = np.zeros((2, 2))


@pytest.fixture(scope="module")
def hookean_grid():
    return fp.make_grid(HOOKEAN, 200)


def second_moments(psi):
    return np.array([
        [psi.moment(lambda p: p[..., 0] ** 2), psi.moment(lambda p: p[..., 0] * p[..., 1])],
        [psi.moment(lambda p: p[..., 0] * p[..., 1]), psi.moment(lambda p: p[..., 1] ** 2)],
    ])


def test_equilibrium_normalized(hookean_grid):
    psi = fp.stationary_density(HOOKEAN, ZERO, 1.0, grid=hookean_grid)
    assert psi.mass == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(second_moments(psi), np.eye(2), atol=1e-3)


def test_equilibrium_is_discretely_stationary(hookean_grid):
    psi = fp.stationary_density(HOOKEAN, ZERO, 1.0, grid=hookean_grid)
    op = fp.FokkerPlanckOperator(hookean_grid, HOOKEAN, ZERO, 1.0)
    new = op.step(psi, op.max_dt)
    assert np.max(np.abs(new.values - psi.values)) < 1e-6


def test_symmetric_gradient_gaussian_moments():
    # We s = 0.4 gives variances 1/(1 - 0.8) = 5 and 1/(1 + 0.8) = 5/9
    we, s = 1.0, 0.4
    kappa = np.diag([s, -s])
    psi = fp.stationary_density(HOOKEAN, kappa, we, n=200)
    np.testing.assert_allclose(np.diag(second_moments(psi)), [5.0, 5.0 / 9.0], rtol=1e-3)


def test_symmetric_gradient_without_stationary_state():
    with pytest.raises(NoStationaryState):
        fp.stationary_density(HOOKEAN, np.diag([0.5, -0.5]), 1.0, n=20)


def test_fene_equilibrium_second_moment_vs_radial_quadrature():
    b = 9.0
    psi = fp.stationary_density(FENE9, ZERO, 1.0, n=400)
    weight = lambda r: r * (1 - r * r / b) ** (b / 2)  # noqa: E731
    num = integrate.quad(lambda r: r * r * weight(r), 0, np.sqrt(b))[0]
    den = integrate.quad(weight, 0, np.sqrt(b))[0]
    assert psi.moment(lambda p: np.sum(p * p, axis=-1)) == pytest.approx(num / den, abs=1e-4)


def test_mass_positivity_over_many_steps():
    grid = fp.make_grid(HOOKEAN, 60)
    op = fp.FokkerPlanckOperator(grid, HOOKEAN, np.array([[0.0, 0.3], [-0.1, 0.0]]), 1.0)
    psi = fp.gaussian_density(grid, (1.0, -0.5), 0.3 * np.eye(2))
    dt = op.max_dt
    for _ in range(10_000):
        psi = op.step(psi, dt)
        assert np.all(psi.values >= 0)
    assert psi.mass == pytest.approx(1.0, abs=1e-9)


def test_step_beyond_stability_bound():
    grid = fp.make_grid(HOOKEAN, 20)
    op = fp.FokkerPlanckOperator(grid, HOOKEAN, ZERO, 1.0)
    with pytest.raises(ConfigError):
        op.step(fp.gaussian_density(grid), 2 * op.max_dt)


def test_fene_uniform_disk_entropy_strictly_decreases():
    grid = fp.make_grid(FENE9, 60)
    op = fp.FokkerPlanckOperator(grid, FENE9, ZERO, 1.0)
    psi_inf = fp.stationary_density(FENE9, ZERO, 1.0, grid=grid)
    psi = fp.uniform_disk_density(grid, 2.0)
    h = [fp.relative_entropy(psi, psi_inf)]
    for _ in range(300):
        psi = op.step(psi, op.max_dt)
        h.append(fp.relative_entropy(psi, psi_inf))
    assert np.all(np.diff(h) < 0)


def test_relative_entropy_and_l1_of_shifted_gaussians(hookean_grid):
    psi_inf = fp.gaussian_density(hookean_grid)
    psi = fp.gaussian_density(hookean_grid, (0.1, 0.0))
    assert fp.relative_entropy(psi_inf, psi_inf) == 0.0
    assert fp.relative_entropy(psi, psi_inf) == pytest.approx(0.005, rel=1e-3)
    assert fp.l1_distance(psi, psi_inf) == pytest.approx(2 * (2 * norm.cdf(0.05) - 1), rel=1e-3)
    assert fp.entropy_report(psi, psi_inf).csiszar_kullback_holds


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_entropy_fisher_nonnegative_and_csiszar_kullback(seed):
    grid = fp.make_grid(HOOKEAN, 24)
    rng = np.random.default_rng(seed)
    psi = fp.DensityGrid(grid, rng.uniform(0.0, 1.0, (24, 24))).normalized()
    psi_inf = fp.DensityGrid(grid, rng.uniform(0.1, 1.0, (24, 24))).normalized()
    rep = fp.entropy_report(psi, psi_inf)
    assert rep.relative_entropy >= -1e-12
    assert rep.fisher_information >= 0.0
    assert rep.csiszar_kullback_holds


def test_support_violation():
    grid = fp.make_grid(HOOKEAN, 8)
    psi_inf = fp.DensityGrid(grid, np.where(np.arange(64).reshape(8, 8) % 2 == 0, 1.0, 0.0)).normalized()
    with pytest.raises(SupportViolation):
        fp.relative_entropy(fp.DensityGrid(grid, np.ones((8, 8))).normalized(), psi_inf)


def test_entropy_dissipation_identity():
    we = 1.0
    grid = fp.make_grid(HOOKEAN, 120)
    op = fp.FokkerPlanckOperator(grid, HOOKEAN, ZERO, we)
    psi_inf = fp.stationary_density(HOOKEAN, ZERO, we, grid=grid)
    psi = fp.gaussian_density(grid, (1.5, 0.0), 0.6 * np.eye(2))
    dt = 0.5 * op.max_dt
    for _ in range(5):
        h0 = fp.relative_entropy(psi, psi_inf)
        fisher = fp.fisher_information(psi, psi_inf)
        nxt = op.step(psi, dt)
        rate = (fp.relative_entropy(nxt, psi_inf) - h0) / dt
        assert rate == pytest.approx(-fisher / (2 * we), rel=0.1)
        for _ in range(50):
            psi = op.step(psi, dt)


@pytest.mark.parametrize("kappa", [ZERO, np.array([[0.0, 0.5], [-0.5, 0.0]])], ids=["zero", "skew"])
def test_exponential_entropy_decay_rate(kappa):
    we = 1.0
    grid = fp.make_grid(HOOKEAN, 80)
    op = fp.FokkerPlanckOperator(grid, HOOKEAN, kappa, we)
    psi_inf = fp.stationary_density(HOOKEAN, kappa, we, grid=grid)
    psi0 = fp.gaussian_density(grid, (1.0, 0.0), 0.5 * np.eye(2))
    _, rows = fp.relax(psi0, op, op.max_dt, 3.0, psi_inf, every=10)
    t, h = np.array(rows)[:, 0], np.array(rows)[:, 1]
    rate = -np.polyfit(t, np.log(h), 1)[0]
    assert rate >= 0.8 * fp.lsi_constant_bakry_emery(HOOKEAN) / we


def test_lsi_constants():
    assert fp.lsi_constant_bakry_emery(HOOKEAN) == 1.0
    assert fp.lsi_constant_bakry_emery(FENE9, n=101) == pytest.approx(1.0, abs=1e-6)


def test_holley_stroock():
    assert fp.holley_stroock_bound(1.0, 0.0) == 1.0
    assert fp.holley_stroock_bound(1.0, np.log(2)) == pytest.approx(0.5)
    vals = [fp.holley_stroock_bound(2.0, o) for o in np.linspace(0, 3, 20)]
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ConfigError):
        fp.holley_stroock_bound(0.0, 1.0)


def test_stress_from_density_equilibrium_and_symmetric_gradient(hookean_grid):
    psi = fp.stationary_density(HOOKEAN, ZERO, 1.0, grid=hookean_grid)
    np.testing.assert_allclose(fp.stress_from_density(psi, HOOKEAN, 0.5, 1.0), 0.0, atol=1e-6)
    kappa = np.diag([0.2, -0.2])
    psi = fp.stationary_density(HOOKEAN, kappa, 1.0, n=200)
    expected = 0.5 * np.diag([1 / 0.6 - 1, 1 / 1.4 - 1])
    np.testing.assert_allclose(fp.stress_from_density(psi, HOOKEAN, 0.5, 1.0), expected, atol=1e-3)


def test_stress_from_density_matches_exact_samples():
    # independent oracle: a million draws from the analytic stationary Gaussian
    kappa = np.diag([0.2, -0.2])
    psi = fp.stationary_density(HOOKEAN, kappa, 1.0, n=200)
    rng = np.random.default_rng(3)
    k = 1_000_000
    x = rng.standard_normal((1, k, 2)) * np.sqrt([1 / 0.6, 1 / 1.4])
    params = FlowParams(epsilon=0.5)
    mc = kramers_stress(x, HOOKEAN, params)[0]
    prod = x[0, :, :, None] * x[0, :, None, :]
    se = 0.5 * prod.reshape(k, 4).std(axis=0).reshape(2, 2) / np.sqrt(k)
    assert np.all(np.abs(fp.stress_from_density(psi, HOOKEAN, 0.5, 1.0) - mc) < 4 * se)


def test_stress_from_density_matches_fene_dumbbells():
    kappa = np.diag([0.2, -0.2])
    psi = fp.stationary_density(FENE9, kappa, 1.0, n=200)
    k = 20_000
    params = FlowParams(epsilon=0.5, dt=0.005)
    ens = sample_equilibrium(FENE9, 1, k, seed=8)
    for _ in range(1000):
        ens = evolve_ensemble(ens, FENE9, kappa, params)
    x = ens.configs[0]
    prod = x[:, :, None] * FENE9.force(x)[:, None, :]
    se = 0.5 * prod.reshape(k, 4).std(axis=0).reshape(2, 2) / np.sqrt(k)
    diff = fp.stress_from_density(psi, FENE9, 0.5, 1.0) - kramers_stress(ens, FENE9, params)[0]
    assert np.all(np.abs(diff) < 4 * se + 0.01)


@pytest.mark.parametrize("kappa", [
    np.diag([0.2, -0.2]),
    np.array([[0.0, 0.2], [0.0, 0.0]]),
    np.array([[0.1, 0.3], [-0.1, -0.1]]),
], ids=["symmetric", "shear", "mixed"])
def test_stationary_gradient_bound(kappa):
    psi = fp.stationary_density(FENE9, kappa, 1.0, n=120)
    rep = fp.stationary_gradient_bound_check(psi, FENE9, kappa, 1.0)
    assert rep.passed
    if np.allclose(kappa, kappa.T):
        assert rep.bound == 0.0 and rep.lhs < 5e-2


def test_stationary_gradient_bound_at_rest():
    psi = fp.stationary_density(FENE9, ZERO, 1.0, n=60)
    rep = fp.stationary_gradient_bound_check(psi, FENE9, ZERO)
    assert rep.bound == 0.0 and rep.lhs < 1e-8


def test_nonsymmetric_steady_state_by_marching_agrees_with_direct():
    kappa = np.array([[0.0, 0.3], [0.0, 0.0]])
    grid = fp.make_grid(HOOKEAN, 30, kappa, 1.0)
    op = fp.FokkerPlanckOperator(grid, HOOKEAN, kappa, 1.0)
    direct = op.stationary("direct")
    march = op.stationary("march")
    assert np.max(np.abs(direct.values - march.values)) < 1e-6 * np.max(direct.values)
