import math

import numpy as np
import pytest
from scipy import stats
from scipy.linalg import expm

from geoehrenfest import dynamics as d
from geoehrenfest import geometry as g
from geoehrenfest import statmech as sm
from geoehrenfest import toymodel as tm
from geoehrenfest.statmech import Ensemble, SamplerConfig

# (1 - 2/e) / (1 - 1/e): mean of u = I_phi^2 under exp(-u) on [0, 1]
U_MEAN_ORACLE = (1 - 2 / math.e) / (1 - 1 / math.e)


def cfg(**kw):
    base = dict(beta=1.0, n_samples=20_000, burn_in=1000, thin=1, seed=3, n_chains=4)
    base.update(kw)
    return SamplerConfig(**base)


@pytest.fixture(scope="module")
def toy0_ensemble():
    return sm.metropolis_canonical(tm.toy_model(tm.ToyParams(0.0)), cfg(n_samples=40_000, thin=2))


# ---------------------------------------------------------------- sphere sampling


def test_sphere_uniform_pushforward():
    rng = np.random.default_rng(1)
    x = sm.sample_sphere_uniform_batch(2, 100_000, rng)
    assert np.max(np.abs(np.sum(np.abs(x) ** 2, axis=1) - 1)) <= 1e-14
    u = np.abs(x[:, 0]) ** 2
    assert stats.kstest(u, "uniform").pvalue > 0.01
    flat = np.concatenate([x.real, x.imag], axis=1)
    assert np.all(np.abs(flat.mean(axis=0)) <= 4 / math.sqrt(100_000))


def test_sphere_uniform_single_state():
    s = sm.sample_sphere_uniform(3, np.random.default_rng(0))
    assert s.dim == 3 and s.is_normalized(1e-14)


def test_sphere_uniform_high_dimension_marginal():
    # |z_1|^2 on S^(2N-1) is Beta(1, N - 1)
    x = sm.sample_sphere_uniform_batch(4, 50_000, np.random.default_rng(2))
    assert stats.kstest(np.abs(x[:, 0]) ** 2, stats.beta(1, 3).cdf).pvalue > 0.01


# ---------------------------------------------------------------- ensembles and averages


def test_config_validation():
    for kw in (dict(beta=0.0), dict(beta=float("nan")), dict(n_samples=-1), dict(thin=0),
               dict(classical_step_scale=0.0), dict(quantum_rotation_scale=-1.0)):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        Ensemble.uniform([[0.0]], [[0.0]], [[1.0, 1.0]])
    with pytest.raises(ValueError):
        Ensemble([[0.0]], [[0.0]], [[1.0, 0.0]], [-1.0])
    e = Ensemble(np.zeros((2, 1)), np.zeros((2, 1)), np.array([[1, 0], [0, 1]], complex), [1.0, 3.0])
    assert e.weights.sum() == 1.0 and e.weights[1] == 0.75
    assert len(e.members) == 2


def test_average_constant_and_identity(toy0_ensemble):
    one = g.classical_observable(lambda R, P: 1.0, name="one")
    mean, se = sm.ensemble_average(one, toy0_ensemble)
    assert mean == pytest.approx(1.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)
    mean, se = sm.ensemble_average(g.identity_observable(2), toy0_ensemble)
    assert mean == pytest.approx(0.5, abs=1e-14) and se <= 1e-14


def test_average_rejects_non_observables(toy0_ensemble):
    q1 = g.ObservableFn(eval=lambda s: s.quantum.q[0], grad=lambda s: None, phase_invariant=False)
    with pytest.raises(ValueError):
        sm.ensemble_average(q1, toy0_ensemble)


def test_toy_oracles_small(toy0_ensemble):
    m, se = sm.ensemble_average(tm.action_observable(), toy0_ensemble)
    assert abs(m - 1.0) <= 3 * se
    m, se = sm.ensemble_average(tm.population_observable(), toy0_ensemble)
    assert abs(m - U_MEAN_ORACLE) <= 3 * se


def test_u_mean_oracle_by_quadrature():
    from scipy.integrate import quad

    num = quad(lambda u: u * math.exp(-u), 0, 1)[0]
    den = quad(lambda u: math.exp(-u), 0, 1)[0]
    assert U_MEAN_ORACLE == pytest.approx(num / den, abs=1e-14)
    assert U_MEAN_ORACLE == pytest.approx(0.4180, abs=5e-5)


def test_factorization_at_zero_coupling(toy0_ensemble):
    I = toy0_ensemble.P[:, 0]
    u = np.abs(toy0_ensemble.psi[:, 0]) ** 2
    _, _, n_eff = sm.batch_means(I)
    assert abs(np.corrcoef(I, u)[0, 1]) <= 3 / math.sqrt(n_eff)


def test_infinite_temperature_is_uniform():
    ens = sm.metropolis_canonical(tm.toy_model(tm.ToyParams(0.8)), cfg(beta=1e-6, n_samples=10_000, thin=3))
    u = np.abs(ens.psi[:, 0]) ** 2
    assert stats.kstest(u, "uniform").pvalue > 0.01
    m, se = sm.ensemble_average(tm.sigma_z_observable(), ens)
    assert abs(m) <= 3 * se


def test_positivity(toy0_ensemble, rng):
    B = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    A = g.HermitianOperator.from_matrix(B @ B.conj().T + 0.1 * np.eye(2), tol=1e-12)
    for ens in (toy0_ensemble, Ensemble.uniform(np.zeros((2, 1)), np.ones((2, 1)), np.eye(2, dtype=complex))):
        assert sm.ensemble_average(g.quadratic_observable(A), ens)[0] > 0


def test_batch_means_iid():
    x = np.random.default_rng(4).standard_normal(100_000)
    mean, se, n_eff = sm.batch_means(x)
    assert se == pytest.approx(1 / math.sqrt(x.size), rel=0.5)
    assert abs(mean) <= 4 * se
    with pytest.raises(ValueError):
        sm.batch_means(np.array([]))


# ---------------------------------------------------------------- sampler mechanics


def test_rotation_proposal_is_symmetric():
    rng = np.random.default_rng(5)
    Om = sm.random_rotation_generator(4, 0.7, rng)
    assert np.array_equal(Om, -Om.T)
    U = expm(Om)
    assert np.allclose(U.T @ U, np.eye(4), atol=1e-14)
    assert np.allclose(expm(-Om) @ U, np.eye(4), atol=1e-14)
    # Omega and -Omega are equally likely: the generating Gaussian is even
    draws = np.array([sm.random_rotation_generator(4, 0.7, rng)[0, 1] for _ in range(20_000)])
    assert stats.ks_2samp(draws, -draws).pvalue > 0.01


def test_reversed_chain_statistics():
    # a stationary reversible chain looks the same run backwards: energy
    # increments and their negatives share one distribution
    model = tm.toy_model(tm.ToyParams(0.8))
    ens = sm.metropolis_canonical(model, cfg(n_samples=20_000, n_chains=1, burn_in=2000))
    E = d._energy(model, ens.R, ens.P, ens.psi)
    dE = np.diff(E)
    moved = dE[dE != 0]
    assert stats.ks_2samp(moved, -moved).pvalue > 0.01
    mean, se, _ = sm.batch_means(dE)
    assert abs(mean) <= 3 * se


def test_sampler_is_deterministic_and_thread_independent():
    m = d.spin_oscillator(coupling=0.5)
    a = sm.metropolis_canonical(m, cfg(n_samples=2000))
    b = sm.metropolis_canonical(m, cfg(n_samples=2000), threads=4)
    c = sm.metropolis_canonical(m, cfg(n_samples=2000, seed=4))
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    assert a.meta["seed"] == 3 and a.meta["n_chains"] == 4 and len(a) == 2000


def test_acceptance_warning():
    ens = sm.metropolis_canonical(d.spin_oscillator(), cfg(n_samples=1000, classical_step_scale=50.0))
    assert any("accept_classical" in w for w in ens.meta["warnings"])


def test_non_finite_proposals_are_rejected():
    m = d.EhrenfestModel(
        1, 2, lambda R: np.zeros(np.shape(R)[:-1] + (2, 2), complex), lambda R: np.zeros(np.shape(R)[:-1] + (1, 2, 2), complex),
        masses=np.array([1.0]),
        potential=lambda R: np.where(np.abs(R[..., 0]) < 1, 0.0, np.inf),
        potential_gradient=lambda R: np.zeros_like(R),
    )
    ens = sm.metropolis_canonical(m, cfg(n_samples=2000))
    assert np.all(np.abs(ens.R) < 1)
    assert sum(ch["rejected_nonfinite"] for ch in ens.meta["chains"]) > 0


def test_reflection_keeps_actions_nonnegative():
    ens = sm.metropolis_canonical(tm.toy_model(tm.ToyParams(0.8)), cfg(n_samples=5000, beta=5.0))
    assert np.all(ens.P >= 0) and np.all((ens.R >= 0) & (ens.R < 2 * math.pi))


# ---------------------------------------------------------------- stationarity


@pytest.fixture(scope="module")
def spin_ensemble():
    m = d.spin_oscillator(coupling=0.5)
    return m, sm.metropolis_canonical(m, cfg(n_samples=8000, thin=5, classical_step_scale=1.5, seed=11))


def _obs():
    return [tm.sigma_z_observable(), tm.population_observable(), tm.cos_phi_observable()]


def test_canonical_spin_oscillator_is_stationary(spin_ensemble):
    m, ens = spin_ensemble
    rep = sm.liouville_stationarity_test(m, ens, 0.02, 500, _obs())
    assert rep.stationary, rep.z_scores
    assert rep.n_excluded == 0 and rep.n_members == len(ens)
    half = sm.liouville_stationarity_test(m, ens, 0.01, 1000, _obs())
    assert half.stationary
    assert np.allclose(half.means[-1], rep.means[-1], atol=3 * rep.std_errors[-1].max())


def test_delta_ensemble_is_not_stationary():
    m = d.spin_oscillator(coupling=0.5)
    s = d.EhrenfestState.from_arrays([1.0], [0.0], np.array([0.8, 0.6], complex))
    ens = Ensemble.from_states([s] * 200)
    rep = sm.liouville_stationarity_test(m, ens, 0.02, 250, _obs())
    assert not rep.stationary


def test_stationarity_excludes_blow_ups():
    m = d.EhrenfestModel(
        1, 2, lambda R: np.zeros(np.shape(R)[:-1] + (2, 2), complex), lambda R: np.zeros(np.shape(R)[:-1] + (1, 2, 2), complex),
        masses=np.array([1.0]), potential=lambda R: -np.sum(R**4, axis=-1), potential_gradient=lambda R: -4 * R**3,
    )
    R = np.array([[0.0], [0.0], [3.0]])
    ens = Ensemble.uniform(R, np.zeros((3, 1)), np.tile([1, 0], (3, 1)).astype(complex))
    with np.errstate(all="ignore"):
        rep = sm.liouville_stationarity_test(m, ens, 0.05, 400, [g.identity_observable(2)])
    assert rep.n_excluded == 1 and rep.n_members == 2


# ---------------------------------------------------------------- phase-space volume


def _cloud(R, P, z=(1, 0)):
    return [d.EhrenfestState.from_arrays([r], [p], np.array(z, complex)) for r, p in zip(R, P)]


def test_volume_harmonic_period():
    m = d.linear_coupling_model(np.zeros((2, 2)), [np.zeros((2, 2))], [1.0], omegas=[1.0])
    rep = sm.classical_volume_preservation_test(m, _cloud([1.0, 1.1, 1.0], [0.0, 0.0, 0.1]), 2 * math.pi / 1000, 1000)
    assert abs(rep.ratio - 1) <= 1e-8


def test_volume_free_particle():
    m = d.linear_coupling_model(np.zeros((2, 2)), [np.zeros((2, 2))], [1.0])
    rep = sm.classical_volume_preservation_test(m, _cloud([0.0, 0.5, 0.0], [0.0, 0.0, 2.0]), 0.1, 100)
    assert rep.max_relative_deviation <= 1e-13


def test_volume_toy_frozen_quantum():
    m = tm.toy_model(tm.ToyParams(0.8))
    z = tm.ToyState.from_variables(0, 1, 0.6, 1.0).psi
    rep = sm.classical_volume_preservation_test(
        m, _cloud([0.3, 0.35, 0.3], [1.0, 1.0, 1.05], z), 1e-3, 5000, freeze_quantum=True
    )
    assert rep.max_relative_deviation <= 1e-10


def test_volume_rejects_degenerate():
    m = d.spin_oscillator()
    with pytest.raises(ValueError):
        sm.classical_volume_preservation_test(m, _cloud([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]), 0.1, 10)
    with pytest.raises(ValueError):
        sm.classical_volume_preservation_test(m, _cloud([0.0, 1.0], [0.0, 1.0]), 0.1, 10)
