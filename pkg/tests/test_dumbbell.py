import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromacro.dumbbell import (
    DumbbellEnsemble,
    FlowParams,
    ForceModel,
    em_step,
    evolve_ensemble,
    kramers_stress,
    read_ensemble_csv,
    sample_equilibrium,
    second_moment,
    write_ensemble_csv,
)
from micromacro.errors import ConfigError, DomainError, StepFailure


def test_hookean_force_at_origin():
    assert np.array_equal(ForceModel.hookean().force(np.zeros(2)), np.zeros(2))
    assert ForceModel.hookean().potential(np.zeros(2)) == 0.0


def test_fene_force_hand_value():
    np.testing.assert_allclose(ForceModel.fene(4).force(np.array([1.0, 0.0])), [4.0 / 3.0, 0.0], rtol=1e-15)


def test_fene_potential_hand_value():
    assert ForceModel.fene(4).potential(np.array([1.0, 0.0])) == pytest.approx(-2.0 * np.log(0.75), rel=1e-14)
    assert ForceModel.fene(4).potential(np.array([1.0, 0.0])) == pytest.approx(0.5754, abs=1e-4)


def test_fene_outside_ball_is_domain_error():
    with pytest.raises(DomainError):
        ForceModel.fene(4).force(np.array([2.0, 0.0]))
    with pytest.raises(DomainError):
        ForceModel.fene(4).potential(np.array([2.0, 0.0]))


def test_model_parameter_validation():
    with pytest.raises(ConfigError):
        ForceModel.fene(0.0)
    with pytest.raises(ConfigError):
        ForceModel("hookean", 3.0)
    with pytest.raises(ConfigError):
        FlowParams(epsilon=1.0)
    with pytest.raises(ConfigError):
        FlowParams(weissenberg=0.0)


def test_gradient_check_single_point():
    model = ForceModel.fene(9)
    x, h = np.array([0.5, 0.3]), 1e-5
    fd = [(model.potential(x + h * e) - model.potential(x - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(fd, model.force(x), rtol=1e-6)


@pytest.mark.parametrize("model", [ForceModel.hookean(), ForceModel.fene(9)], ids=["hookean", "fene"])
def test_force_is_potential_gradient_at_random_points(model):
    rng = np.random.default_rng(11)
    r = np.sqrt(rng.uniform(0, 0.9, 100)) * (np.sqrt(model.b) if model.is_fene else 3.0)
    theta = rng.uniform(0, 2 * np.pi, 100)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    h = 1e-6
    fd = np.stack([(model.potential(pts + h * e) - model.potential(pts - h * e)) / (2 * h) for e in np.eye(2)], 1)
    np.testing.assert_allclose(fd, model.force(pts), rtol=1e-5, atol=1e-8)


def test_relaxation_drift_without_noise():
    x = np.array([[1.0, 0.0]])
    dt = 1e-6
    new, _ = em_step(x, ForceModel.hookean(), np.zeros((2, 2)), dt, 1.0, np.zeros_like(x))
    np.testing.assert_allclose((new - x) / dt, -x / 2.0, rtol=1e-9, atol=1e-12)


def test_two_replica_stress_hand_value():
    configs = np.array([[[1.0, 0.0], [-1.0, 0.0]]])
    tau = kramers_stress(configs, ForceModel.hookean(), FlowParams(epsilon=0.5, weissenberg=1.0))
    np.testing.assert_allclose(tau[0], np.diag([0.0, -0.5]), atol=1e-15)


def test_stress_zero_at_exact_identity_moment():
    configs = np.array([[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]]) * np.sqrt(2.0)
    tau = kramers_stress(configs, ForceModel.hookean(), FlowParams())
    np.testing.assert_allclose(tau, 0.0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 40))
def test_stress_symmetric_and_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    configs = rng.standard_normal((2, k, 2))
    params = FlowParams(epsilon=0.3, weissenberg=2.0)
    tau = kramers_stress(configs, ForceModel.hookean(), params)
    assert np.array_equal(tau, np.swapaxes(tau, -1, -2))
    perm = rng.permutation(k)
    assert np.array_equal(tau, kramers_stress(configs[:, perm], ForceModel.hookean(), params))


def test_stationary_covariance_is_identity():
    # exact Ornstein-Uhlenbeck law: the equilibrium draw is stationary under the SDE
    k = 100_000
    ens = sample_equilibrium(ForceModel.hookean(), 1, k, seed=5)
    params = FlowParams(weissenberg=1.0, dt=0.01)
    for _ in range(50):
        ens = evolve_ensemble(ens, ForceModel.hookean(), np.zeros((2, 2)), params)
    m = second_moment(ens)[0]
    # Var(X_i X_j) is 2 on the diagonal and 1 off it for a standard normal
    se = np.sqrt(np.array([[2.0, 1.0], [1.0, 2.0]]) / k)
    assert np.all(np.abs(m - np.eye(2)) < 3 * se)


def test_relaxation_to_identity_from_stretched_state():
    # dt small enough that the scheme's stationary bias 1/(1 - dt/4) - 1 stays well below 4/sqrt(K)
    k = 10000
    ens = DumbbellEnsemble(np.full((1, k, 2), [3.0, 0.0]), seed=2)
    params = FlowParams(weissenberg=1.0, dt=0.01)
    for _ in range(int(20 / params.dt)):
        ens = evolve_ensemble(ens, ForceModel.hookean(), np.zeros((2, 2)), params)
    assert np.all(np.abs(second_moment(ens)[0] - np.eye(2)) < 4 / np.sqrt(k))


def test_fene_confinement_long_run():
    model = ForceModel.fene(9)
    ens = sample_equilibrium(model, 2, 2000, seed=3)
    params = FlowParams(weissenberg=1.0, dt=0.05)
    kappa = np.zeros((2, 2))
    for _ in range(400):
        ens = evolve_ensemble(ens, model, kappa, params)
        assert np.max(np.linalg.norm(ens.configs, axis=-1)) < 3.0


def test_fene_exhausted_retries_is_step_failure():
    model = ForceModel.fene(1.0)
    x = np.array([[0.99, 0.0]])
    with pytest.raises(StepFailure):
        em_step(x, model, np.zeros((2, 2)), 0.01, 1.0, np.array([[1e3, 0.0]]),
                redraw=lambda r: np.array([[1e3, 0.0]]))


def test_fene_dt_guard():
    ens = sample_equilibrium(ForceModel.fene(9), 1, 10)
    with pytest.raises(ConfigError):
        evolve_ensemble(ens, ForceModel.fene(9), np.zeros((2, 2)), FlowParams(weissenberg=1.0, dt=0.2))


def test_stress_error_scales_like_inverse_sqrt_k():
    model, params = ForceModel.hookean(), FlowParams()
    ks = [100, 1000, 10000]
    stds = []
    for k in ks:
        ens = sample_equilibrium(model, 200, k, seed=k)
        stds.append(np.std(kramers_stress(ens, model, params)[:, 0, 1], ddof=1))
    slope = np.polyfit(np.log(ks), np.log(stds), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)


def test_symmetric_gradient_stationary_stress():
    we, s, k = 1.0, 0.2, 20000
    kappa = np.diag([s, -s])
    model, params = ForceModel.hookean(), FlowParams(weissenberg=we, epsilon=0.5, dt=0.01)
    ens = sample_equilibrium(model, 1, k, seed=9)
    for _ in range(1000):
        ens = evolve_ensemble(ens, model, kappa, params)
    expected = params.epsilon / we * (1.0 / (1.0 - 2 * we * s) - 1.0)
    # Var(X^2) = 2 sigma^4 with sigma^2 = 1/(1-2We s); allow the O(dt) bias of the scheme
    se = params.epsilon / we * np.sqrt(2.0) / (1 - 2 * we * s) / np.sqrt(k)
    assert abs(kramers_stress(ens, model, params)[0, 0, 0] - expected) < 4 * se + 0.01


def test_ensemble_csv_round_trip(tmp_path):
    ens = sample_equilibrium(ForceModel.fene(9), 3, 7, seed=4)
    path = tmp_path / "ens.csv"
    write_ensemble_csv(path, ens)
    back = read_ensemble_csv(path)
    assert np.array_equal(back.configs, ens.configs)


def test_keyed_steps_are_reproducible():
    model, params = ForceModel.hookean(), FlowParams(dt=0.01)
    a = sample_equilibrium(model, 4, 50, seed=1)
    b = sample_equilibrium(model, 4, 50, seed=1)
    for _ in range(5):
        a = evolve_ensemble(a, model, np.eye(2) * 0.1, params)
        b = evolve_ensemble(b, model, np.eye(2) * 0.1, params)
    assert np.array_equal(a.configs, b.configs)
