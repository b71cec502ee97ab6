"""Structural invariant suite behind ``geoehrenfest check``.

Every check returns a :class:`CheckResult` with the measured residual.  The
bracket checks take the Poisson tensor as a parameter so a deliberately
broken tensor can be injected to confirm that they detect it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dynamics, geometry, statmech, toymodel
from .geometry import (
    EhrenfestState,
    HermitianOperator,
    anticommutator,
    classical_observable,
    commutator_i,
    identity_observable,
    poisson_quantum,
    poisson_tensor,
    quadratic_observable,
    symmetric_bracket,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<28s} residual={self.residual:.3e}  tol={self.tol:.1e}"


# --------------------------------------------------------------------------
# random objects
# --------------------------------------------------------------------------


def random_hermitian(n: int, rng: np.random.Generator) -> HermitianOperator:
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return HermitianOperator.from_matrix(0.5 * (A + A.conj().T))


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    Z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    return Q * (np.diag(R) / np.abs(np.diag(R)))


def random_state(n_classical: int, n_quantum: int, rng: np.random.Generator) -> EhrenfestState:
    z = rng.standard_normal(n_quantum) + 1j * rng.standard_normal(n_quantum)
    z /= np.linalg.norm(z)
    return EhrenfestState.from_arrays(rng.standard_normal(n_classical), rng.standard_normal(n_classical), z)


def random_classical_quadratic(n: int, rng: np.random.Generator):
    """``1/2 x^T S x + b^T x`` in ``x = (R, P)`` as an observable with Hessian."""
    S = rng.standard_normal((2 * n, 2 * n))
    S = 0.5 * (S + S.T)
    b = rng.standard_normal(2 * n)

    def fn(R, P):
        x = np.concatenate([R, P])
        return 0.5 * x @ S @ x + b @ x

    def gR(R, P):
        return (S @ np.concatenate([R, P]) + b)[:n]

    def gP(R, P):
        return (S @ np.concatenate([R, P]) + b)[n:]

    return classical_observable(fn, gR, gP, hess=lambda R, P: S, name="c")


def random_mixed_observable(n_classical: int, n_quantum: int, rng: np.random.Generator):
    """Phase-invariant observable coupling both sectors: ``c1 + f_A + c2 * f_B``."""
    c1 = random_classical_quadratic(n_classical, rng)
    c2 = random_classical_quadratic(n_classical, rng)
    fa = quadratic_observable(random_hermitian(n_quantum, rng))
    fb = quadratic_observable(random_hermitian(n_quantum, rng))
    return c1 + fa + c2 * fb


# --------------------------------------------------------------------------
# bracket algebra
# --------------------------------------------------------------------------


def _tensor_bracket(Pi, f, g, s):
    return float(f.grad(s).flat() @ Pi @ g.grad(s).flat())


def _nested(Pi, f, g, h, s):
    """``{f, {g, h}}`` for the bracket defined by an arbitrary tensor ``Pi``."""
    dg, dh = g.grad(s).flat(), h.grad(s).flat()
    d_gh = g.hess(s) @ Pi @ dh + h.hess(s) @ Pi.T @ dg
    return float(f.grad(s).flat() @ Pi @ d_gh)


def check_bracket_algebra(n_trials: int = 200, seed: int = 1, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_trials):
        n = (2, 4)[i % 2]
        A, B = random_hermitian(n, rng), random_hermitian(n, rng)
        s = random_state(0, n, rng).quantum
        fa, fb = quadratic_observable(A), quadratic_observable(B)
        worst = max(
            worst,
            abs(poisson_quantum(fa, fb, s) - quadratic_observable(commutator_i(A, B))(s)),
            abs(symmetric_bracket(fa, fb, s) - quadratic_observable(anticommutator(A, B))(s)),
        )
    return CheckResult("bracket algebra", worst, tol)


def check_jacobi(
    n_trials: int = 50,
    seed: int = 2,
    hbar: float = 1.0,
    tol: float = 1e-10,
    tensor: Callable[[int, int, float], np.ndarray] = poisson_tensor,
) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_trials):
        nc, nq = 2, (2, 4)[i % 2]
        f, g, h = (random_mixed_observable(nc, nq, rng) for _ in range(3))
        s = random_state(nc, nq, rng)
        Pi = tensor(nc, nq, hbar)
        cyc = _nested(Pi, f, g, h, s) + _nested(Pi, g, h, f, s) + _nested(Pi, h, f, g, s)
        scale = 1.0 + abs(_nested(Pi, f, g, h, s))
        worst = max(worst, abs(cyc) / scale)
    return CheckResult("Jacobi identity", worst, tol)


def check_leibniz(n_trials: int = 50, seed: int = 3, hbar: float = 1.0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_trials):
        nc, nq = 2, (2, 4)[i % 2]
        f, g, h = (random_mixed_observable(nc, nq, rng) for _ in range(3))
        s = random_state(nc, nq, rng)
        Pi = poisson_tensor(nc, nq, hbar)
        lhs = _tensor_bracket(Pi, f, g * h, s)
        rhs = _tensor_bracket(Pi, f, g, s) * h(s) + g(s) * _tensor_bracket(Pi, f, h, s)
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
    return CheckResult("Leibniz rule", worst, tol)


def check_basis_independence(n_trials: int = 50, seed: int = 4, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_trials):
        n = (2, 4)[i % 2]
        A, B = random_hermitian(n, rng), random_hermitian(n, rng)
        U = random_unitary(n, rng)
        s = random_state(0, n, rng).quantum
        s2 = geometry.QuantumStateReal.from_complex(U @ s.to_complex())
        A2 = HermitianOperator.from_matrix(U @ A.matrix @ U.conj().T, tol=1e-10)
        B2 = HermitianOperator.from_matrix(U @ B.matrix @ U.conj().T, tol=1e-10)
        fa, fb, fa2, fb2 = map(quadratic_observable, (A, B, A2, B2))
        worst = max(
            worst,
            abs(poisson_quantum(fa, fb, s) - poisson_quantum(fa2, fb2, s2)),
            abs(symmetric_bracket(fa, fb, s) - symmetric_bracket(fa2, fb2, s2)),
        )
    return CheckResult("basis independence", worst, tol)


def check_gamma_compatibility(n_trials: int = 50, seed: int = 5, tol: float = 1e-9) -> CheckResult:
    """``Gamma{f, g} = {Gamma f, g} + {f, Gamma g}`` on the quantum bracket."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_trials):
        nq = (2, 4)[i % 2]
        f, g = (random_mixed_observable(1, nq, rng) for _ in range(2))
        # a non-invariant perturbation keeps the identity non-trivial
        lin = _linear_quantum(nq, rng)
        f = f + lin
        s = random_state(1, nq, rng)
        Pi = poisson_tensor(1, nq, 1.0)
        fI = identity_observable(nq)
        lhs = _nested(Pi, fI, f, g, s)
        rhs = -_nested(Pi, g, fI, f, s) - _nested(Pi, f, g, fI, s)
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
    return CheckResult("phase compatibility", worst, tol)


def _linear_quantum(nq, rng):
    c = rng.standard_normal(2 * nq)

    def grad(s):
        nc = s.n_classical
        return geometry.Gradient(np.zeros(nc), np.zeros(nc), c[:nq], c[nq:])

    return geometry.ObservableFn(
        eval=lambda s: float(c @ np.concatenate([s.quantum.q, s.quantum.p])),
        grad=grad,
        phase_invariant=False,
        hess=lambda s: np.zeros((2 * s.n_classical + 2 * nq,) * 2),
        name="linear",
    )


def check_critical_points(n_trials: int = 20, seed: int = 6, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_trials):
        n = (2, 4)[i % 2]
        A = random_hermitian(n, rng)
        w, V = np.linalg.eigh(A.matrix)
        if np.min(np.diff(w)) < 1e-6:
            continue
        f = quadratic_observable(A)
        for k in range(n):
            s = geometry.QuantumStateReal.from_complex(V[:, k])
            worst = max(
                worst,
                float(np.max(np.abs(geometry.sphere_gradient(f, s)))),
                abs(2 * f(s) - w[k]),
            )
    return CheckResult("eigenvector critical points", worst, tol)


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


def check_rhs_consistency(n_trials: int = 20, seed: int = 7, hbar: float = 1.0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    models = [dynamics.spin_oscillator(coupling=0.3), toymodel.toy_model(toymodel.ToyParams(0.8))]
    worst = 0.0
    for i in range(n_trials):
        m = models[i % 2]
        s = random_state(1, 2, rng)
        if m.action_angle:
            s = EhrenfestState(geometry.ClassicalState(s.classical.R, np.abs(s.classical.P), "action-angle"), s.quantum)
        X = geometry.hamiltonian_vector_field(dynamics.hamiltonian_function(m), s, dynamics.generator_hbar(hbar))
        rhs = dynamics.ehrenfest_rhs(m, s, hbar)
        worst = max(worst, float(np.max(np.abs(X.flat() - rhs.flat()))))
    return CheckResult("vector field = Ehrenfest RHS", worst, tol)


def check_conservation(hbar: float = 1.0, n_steps: int = 20_000, dt: float = 1e-3):
    params = toymodel.ToyParams(0.8)
    init = toymodel.default_initial()
    if hbar == 1.0:
        tr = toymodel.propagate_toy(init, params, dt, n_steps, record_every=100)
    else:
        tr = dynamics.propagate(toymodel.toy_model(params), init.to_ehrenfest(), dt, n_steps // 10, hbar=hbar, record_every=10)
    return [
        CheckResult("norm conservation", float(np.max(np.abs(tr.norm - 0.5))), 1e-12),
        CheckResult("energy conservation", tr.energy_drift(), 1e-6),
    ]


def check_time_reversal(hbar: float = 1.0, seed: int = 8, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    m = dynamics.spin_oscillator(coupling=0.3)
    s0 = random_state(1, 2, rng)
    s = s0
    for _ in range(100):
        s = dynamics.step_strang(m, s, 1e-2, hbar)
    for _ in range(100):
        s = dynamics.step_strang(m, s, -1e-2, hbar)
    return CheckResult("time reversal", float(np.max(np.abs(s.flat() - s0.flat()))), tol)


def check_stationarity_smoke(hbar: float = 1.0, seed: int = 9) -> CheckResult:
    """Canonical spin-oscillator ensemble stays put over a short window (|z| <= 3)."""
    m = dynamics.spin_oscillator(coupling=0.5)
    cfg = statmech.SamplerConfig(
        beta=1.0, n_samples=2000, burn_in=500, thin=10, classical_step_scale=1.5, quantum_rotation_scale=1.5, seed=seed
    )
    ens = statmech.metropolis_canonical(m, cfg)
    obs = [toymodel.sigma_z_observable(), toymodel.population_observable()]
    rep = statmech.liouville_stationarity_test(m, ens, 0.02, 250, obs, hbar=hbar, n_checkpoints=5)
    return CheckResult("stationarity smoke (max |z|)", float(np.max(rep.max_abs_z)), 3.0)


def run_all(hbar: float = 1.0) -> list[CheckResult]:
    results = [
        check_bracket_algebra(),
        check_jacobi(hbar=hbar),
        check_leibniz(hbar=hbar),
        check_basis_independence(),
        check_gamma_compatibility(),
        check_critical_points(),
        check_rhs_consistency(hbar=hbar),
        check_time_reversal(hbar=hbar),
    ]
    results += check_conservation(hbar=hbar)
    results.append(check_stationarity_smoke(hbar=hbar))
    return results
