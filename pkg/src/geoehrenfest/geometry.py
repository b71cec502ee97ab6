"""Real-coordinate geometry of the quantum-classical state space.

A point of ``M_C x M_Q`` is stored as a flat real vector::

    y = (R_1..R_n, P_1..P_n, q_1..q_N, p_1..p_N)

with ``z_k = q_k + i p_k`` the complex amplitudes of the quantum state.
Observables carry analytic gradients (and optionally Hessians) with respect
to these coordinates, and all brackets are evaluated from those gradients.

Conventions
-----------
* ``f_A(psi) = 1/2 <psi|A psi>``; ``expectation_value`` returns ``2 f_A``.
* Poisson bracket ``{f, g} = df/dP dg/dR - df/dR dg/dP`` (classical) and
  ``{f, g} = df/dp dg/dq - df/dq dg/dp`` (quantum); the combined bracket is
  ``{,}_C + hbar^-1 {,}_Q``.
* The phase generator is fixed as ``Gamma f = {f_I, f}_Q
  = sum_k (p_k df/dq_k - q_k df/dp_k)``.  With this sign the Hamiltonian
  vector field of ``f_I`` is exactly ``Gamma``; the opposite orientation,
  ``sum_k (q_k d/dp_k - p_k d/dq_k)``, generates the same phase orbits run
  backwards and annihilates exactly the same functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

HERMITIAN_TOL = 1e-12
NORMALIZED_TOL = 1e-12


class NonHermitianError(ValueError):
    """Raised when a matrix fails the Hermiticity check."""

    def __init__(self, residual: float, tol: float):
        self.residual = float(residual)
        self.tol = tol
        super().__init__(
            f"matrix is not Hermitian: max |A - A^H| = {self.residual:.3e} > {tol:.1e}"
        )


# --------------------------------------------------------------------------
# states
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantumStateReal:
    """Real coordinates ``(q, p)`` of a vector of ``C^N``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        p = np.asarray(self.p, dtype=float).reshape(-1)
        if q.shape != p.shape:
            raise ValueError(f"q and p differ in length: {q.size} != {p.size}")
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_complex(cls, z) -> "QuantumStateReal":
        z = np.asarray(z, dtype=complex).reshape(-1)
        return cls(z.real.copy(), z.imag.copy())

    @property
    def dim(self) -> int:
        return self.q.size

    def to_complex(self) -> np.ndarray:
        return self.q + 1j * self.p

    def norm2(self) -> float:
        return float(self.q @ self.q + self.p @ self.p)

    def is_normalized(self, tol: float = NORMALIZED_TOL) -> bool:
        return abs(self.norm2() - 1.0) <= tol

    def normalized(self) -> "QuantumStateReal":
        n = np.sqrt(self.norm2())
        if n == 0.0:
            raise ValueError("cannot normalize the zero vector")
        return QuantumStateReal(self.q / n, self.p / n)

    def interleaved(self) -> np.ndarray:
        """Coordinates ordered as ``(q_1, p_1, q_2, p_2, ...)``."""
        out = np.empty(2 * self.dim)
        out[0::2] = self.q
        out[1::2] = self.p
        return out


@dataclass(frozen=True)
class ClassicalState:
    """Darboux coordinates ``(R, P)``.

    For an action-angle chart ``R`` holds the angles and ``P`` the actions;
    build such states with :meth:`action_angle`.
    """

    R: np.ndarray
    P: np.ndarray
    chart: str = "darboux"

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(-1)
        P = np.asarray(self.P, dtype=float).reshape(-1)
        if R.shape != P.shape:
            raise ValueError(f"R and P differ in length: {R.size} != {P.size}")
        if self.chart not in ("darboux", "action-angle"):
            raise ValueError(f"unknown chart {self.chart!r}")
        R.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P", P)

    @classmethod
    def action_angle(cls, theta, action) -> "ClassicalState":
        action = np.atleast_1d(np.asarray(action, dtype=float))
        if np.any(action < 0):
            raise ValueError("actions must be non-negative")
        return cls(np.mod(theta, 2 * np.pi), action, chart="action-angle")

    @classmethod
    def empty(cls) -> "ClassicalState":
        return cls(np.zeros(0), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.R.size

    def reduced(self) -> "ClassicalState":
        """Angles reduced to ``[0, 2 pi)`` for action-angle charts."""
        if self.chart != "action-angle":
            return self
        return ClassicalState(np.mod(self.R, 2 * np.pi), self.P, chart=self.chart)


@dataclass(frozen=True)
class EhrenfestState:
    classical: ClassicalState
    quantum: QuantumStateReal

    @classmethod
    def from_arrays(cls, R, P, psi, chart: str = "darboux") -> "EhrenfestState":
        return cls(ClassicalState(R, P, chart=chart), QuantumStateReal.from_complex(psi))

    @classmethod
    def from_flat(cls, y, n_classical: int, chart: str = "darboux") -> "EhrenfestState":
        y = np.asarray(y, dtype=float)
        n = n_classical
        nq = (y.size - 2 * n) // 2
        return cls(
            ClassicalState(y[:n], y[n : 2 * n], chart=chart),
            QuantumStateReal(y[2 * n : 2 * n + nq], y[2 * n + nq :]),
        )

    @property
    def n_classical(self) -> int:
        return self.classical.dim

    @property
    def n_quantum(self) -> int:
        return self.quantum.dim

    @property
    def psi(self) -> np.ndarray:
        return self.quantum.to_complex()

    def flat(self) -> np.ndarray:
        c, qu = self.classical, self.quantum
        return np.concatenate([c.R, c.P, qu.q, qu.p])


def as_ehrenfest(at) -> EhrenfestState:
    """Accept a bare quantum or classical state where a product state is expected."""
    if isinstance(at, EhrenfestState):
        return at
    if isinstance(at, QuantumStateReal):
        return EhrenfestState(ClassicalState.empty(), at)
    if isinstance(at, ClassicalState):
        return EhrenfestState(at, QuantumStateReal(np.zeros(0), np.zeros(0)))
    raise TypeError(f"expected a state, got {type(at).__name__}")


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HermitianOperator:
    """``A = re + i im`` with ``re`` symmetric and ``im`` antisymmetric."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.array(self.re, dtype=float)
        im = np.array(self.im, dtype=float)
        if re.ndim != 2 or re.shape[0] != re.shape[1] or im.shape != re.shape:
            raise ValueError(f"expected two square matrices of equal shape, got {re.shape}, {im.shape}")
        residual = max(np.max(np.abs(re - re.T), initial=0.0), np.max(np.abs(im + im.T), initial=0.0))
        if residual > HERMITIAN_TOL:
            raise NonHermitianError(residual, HERMITIAN_TOL)
        # symmetrize so the stored parts satisfy the invariant exactly
        re = 0.5 * (re + re.T)
        im = 0.5 * (im - im.T)
        re.setflags(write=False)
        im.setflags(write=False)
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_matrix(cls, A, tol: float = HERMITIAN_TOL) -> "HermitianOperator":
        A = np.asarray(A, dtype=complex)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {A.shape}")
        residual = float(np.max(np.abs(A - A.conj().T), initial=0.0))
        if residual > tol:
            raise NonHermitianError(residual, tol)
        A = 0.5 * (A + A.conj().T)
        return cls(A.real, A.imag)

    @property
    def dim(self) -> int:
        return self.re.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __add__(self, other: "HermitianOperator") -> "HermitianOperator":
        return HermitianOperator(self.re + other.re, self.im + other.im)

    def __mul__(self, c: float) -> "HermitianOperator":
        return HermitianOperator(c * self.re, c * self.im)

    __rmul__ = __mul__


PAULI_X = HermitianOperator.from_matrix([[0, 1], [1, 0]])
PAULI_Y = HermitianOperator.from_matrix([[0, -1j], [1j, 0]])
PAULI_Z = HermitianOperator.from_matrix([[1, 0], [0, -1]])


def identity(n: int) -> HermitianOperator:
    return HermitianOperator(np.eye(n), np.zeros((n, n)))


def commutator_i(A: HermitianOperator, B: HermitianOperator) -> HermitianOperator:
    """``i[A, B]``, Hermitian whenever A and B are."""
    a, b = A.matrix, B.matrix
    return HermitianOperator.from_matrix(1j * (a @ b - b @ a), tol=1e-10)


def anticommutator(A: HermitianOperator, B: HermitianOperator) -> HermitianOperator:
    a, b = A.matrix, B.matrix
    return HermitianOperator.from_matrix(a @ b + b @ a, tol=1e-10)


def real_representation(A: HermitianOperator) -> np.ndarray:
    """``2N x 2N`` real symmetric matrix of A in the ordering ``(q_1, p_1, q_2, p_2, ...)``.

    Entry pattern: ``H[q_a, q_b] = H[p_a, p_b] = Re A_ab`` and
    ``H[q_a, p_b] = -H[p_a, q_b] = -Im A_ab``.
    """
    n = A.dim
    H = np.empty((2 * n, 2 * n))
    H[0::2, 0::2] = A.re
    H[1::2, 1::2] = A.re
    H[0::2, 1::2] = -A.im
    H[1::2, 0::2] = A.im
    return H


def complex_structure(n: int) -> np.ndarray:
    """Multiplication by ``i`` in the interleaved ordering; ``J @ J = -1``."""
    return np.kron(np.eye(n), np.array([[0.0, -1.0], [1.0, 0.0]]))


def block_representation(A: HermitianOperator) -> np.ndarray:
    """Real representation in block ordering ``(q_1..q_N, p_1..p_N)``."""
    return np.block([[A.re, -A.im], [A.im, A.re]])


# --------------------------------------------------------------------------
# observables
# --------------------------------------------------------------------------


class Gradient(NamedTuple):
    """Partial derivatives split into the ``(R, P, q, p)`` blocks.

    Also used for tangent vectors, where the fields hold the velocities.
    """

    R: np.ndarray
    P: np.ndarray
    q: np.ndarray
    p: np.ndarray

    @classmethod
    def from_flat(cls, g, n_classical: int) -> "Gradient":
        g = np.asarray(g, dtype=float)
        n = n_classical
        nq = (g.size - 2 * n) // 2
        return cls(g[:n], g[n : 2 * n], g[2 * n : 2 * n + nq], g[2 * n + nq :])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.R, self.P, self.q, self.p])


def _zeros_like_state(at: EhrenfestState) -> Gradient:
    nc, nq = at.n_classical, at.n_quantum
    return Gradient(np.zeros(nc), np.zeros(nc), np.zeros(nq), np.zeros(nq))


@dataclass(frozen=True)
class ObservableFn:
    """A smooth function on ``M_C x M_Q`` with its analytic derivatives.

    ``hess`` is optional and returns the flat Hessian; it is needed only to
    differentiate brackets (Jacobi identity, phase compatibility checks).
    ``batch`` optionally evaluates the function on an array of flat states of
    shape ``(m, dim)``; ensemble averages use it when present.
    """

    eval: Callable[[EhrenfestState], float]
    grad: Callable[[EhrenfestState], Gradient]
    phase_invariant: bool = False
    hess: Optional[Callable[[EhrenfestState], np.ndarray]] = None
    batch: Optional[Callable[[np.ndarray, int], np.ndarray]] = None
    name: str = "f"

    def __call__(self, at) -> float:
        return float(self.eval(as_ehrenfest(at)))

    def gradient(self, at) -> Gradient:
        return self.grad(as_ehrenfest(at))

    def values(self, Y: np.ndarray, n_classical: int) -> np.ndarray:
        """Evaluate on flat states stacked along the first axis."""
        Y = np.atleast_2d(Y)
        if self.batch is not None:
            return np.asarray(self.batch(Y, n_classical), dtype=float)
        return np.array([self.eval(EhrenfestState.from_flat(y, n_classical)) for y in Y])

    def __add__(self, other: "ObservableFn") -> "ObservableFn":
        f, g = self, other
        hess = None
        if f.hess is not None and g.hess is not None:
            hess = lambda s: f.hess(s) + g.hess(s)  # noqa: E731
        batch = None
        if f.batch is not None and g.batch is not None:
            batch = lambda Y, n: f.batch(Y, n) + g.batch(Y, n)  # noqa: E731
        return ObservableFn(
            eval=lambda s: f.eval(s) + g.eval(s),
            grad=lambda s: Gradient.from_flat(f.grad(s).flat() + g.grad(s).flat(), s.n_classical),
            phase_invariant=f.phase_invariant and g.phase_invariant,
            hess=hess,
            batch=batch,
            name=f"({f.name} + {g.name})",
        )

    def __mul__(self, other) -> "ObservableFn":
        f = self
        if np.isscalar(other):
            c = float(other)
            return ObservableFn(
                eval=lambda s: c * f.eval(s),
                grad=lambda s: Gradient.from_flat(c * f.grad(s).flat(), s.n_classical),
                phase_invariant=f.phase_invariant,
                hess=None if f.hess is None else (lambda s: c * f.hess(s)),
                batch=None if f.batch is None else (lambda Y, n: c * f.batch(Y, n)),
                name=f"{c:g}*{f.name}",
            )
        g = other

        def grad(s):
            return Gradient.from_flat(f.eval(s) * g.grad(s).flat() + g.eval(s) * f.grad(s).flat(), s.n_classical)

        hess = None
        if f.hess is not None and g.hess is not None:

            def hess(s):
                df, dg = f.grad(s).flat(), g.grad(s).flat()
                return f.eval(s) * g.hess(s) + g.eval(s) * f.hess(s) + np.outer(df, dg) + np.outer(dg, df)

        return ObservableFn(
            eval=lambda s: f.eval(s) * g.eval(s),
            grad=grad,
            phase_invariant=f.phase_invariant and g.phase_invariant,
            hess=hess,
            name=f"{f.name}*{g.name}",
        )

    __rmul__ = __mul__


def _quantum_block(y: np.ndarray, n_classical: int) -> np.ndarray:
    return y[..., 2 * n_classical :]


@dataclass(frozen=True)
class QuadraticObservable(ObservableFn):
    operator: Optional[HermitianOperator] = field(default=None)


def quadratic_observable(A: HermitianOperator, name: str = "f_A") -> QuadraticObservable:
    """The quadratic function ``f_A(psi) = 1/2 <psi|A psi>``."""
    M = block_representation(A)
    nq = A.dim

    def check(s: EhrenfestState):
        if s.n_quantum != nq:
            raise ValueError(f"operator acts on C^{nq}, state has N_Q = {s.n_quantum}")

    def eval_(s):
        check(s)
        x = np.concatenate([s.quantum.q, s.quantum.p])
        return 0.5 * float(x @ M @ x)

    def grad(s):
        check(s)
        x = np.concatenate([s.quantum.q, s.quantum.p])
        g = M @ x
        nc = s.n_classical
        return Gradient(np.zeros(nc), np.zeros(nc), g[:nq], g[nq:])

    def hess(s):
        nc = s.n_classical
        H = np.zeros((2 * nc + 2 * nq, 2 * nc + 2 * nq))
        H[2 * nc :, 2 * nc :] = M
        return H

    def batch(Y, nc):
        x = _quantum_block(Y, nc)
        return 0.5 * np.einsum("...i,ij,...j->...", x, M, x)

    return QuadraticObservable(
        eval=eval_, grad=grad, phase_invariant=True, hess=hess, batch=batch, name=name, operator=A
    )


def identity_observable(n: int) -> QuadraticObservable:
    """``f_I = 1/2 sum_k (q_k^2 + p_k^2)``."""
    return quadratic_observable(identity(n), name="f_I")


def expectation_value(A: HermitianOperator, psi) -> float:
    """``<psi|A psi> = 2 f_A(psi)``."""
    if not isinstance(psi, (QuantumStateReal, EhrenfestState)):
        psi = QuantumStateReal.from_complex(psi)
    return 2.0 * quadratic_observable(A)(psi)


def classical_observable(fn, grad_R=None, grad_P=None, hess=None, name: str = "f_C") -> ObservableFn:
    """Wrap ``fn(R, P)`` (and its partial derivatives) as an observable.

    Missing derivative callables default to zero.
    """

    def grad(s):
        R, P = s.classical.R, s.classical.P
        gR = np.zeros_like(R) if grad_R is None else np.asarray(grad_R(R, P), dtype=float)
        gP = np.zeros_like(P) if grad_P is None else np.asarray(grad_P(R, P), dtype=float)
        nq = s.n_quantum
        return Gradient(gR, gP, np.zeros(nq), np.zeros(nq))

    def full_hess(s):
        nc, nq = s.n_classical, s.n_quantum
        H = np.zeros((2 * nc + 2 * nq, 2 * nc + 2 * nq))
        H[: 2 * nc, : 2 * nc] = hess(s.classical.R, s.classical.P)
        return H

    return ObservableFn(
        eval=lambda s: float(fn(s.classical.R, s.classical.P)),
        grad=grad,
        phase_invariant=True,
        hess=None if hess is None else full_hess,
        name=name,
    )


# --------------------------------------------------------------------------
# brackets
# --------------------------------------------------------------------------


def _check_hbar(hbar: float) -> None:
    if not hbar > 0:
        raise ValueError(f"hbar must be positive, got {hbar}")


def poisson_quantum(f: ObservableFn, g: ObservableFn, at) -> float:
    at = as_ehrenfest(at)
    df, dg = f.grad(at), g.grad(at)
    return float(df.p @ dg.q - df.q @ dg.p)


def symmetric_bracket(f: ObservableFn, g: ObservableFn, at) -> float:
    at = as_ehrenfest(at)
    df, dg = f.grad(at), g.grad(at)
    return float(df.q @ dg.q + df.p @ dg.p)


def poisson_classical(f: ObservableFn, g: ObservableFn, at) -> float:
    at = as_ehrenfest(at)
    df, dg = f.grad(at), g.grad(at)
    return float(df.P @ dg.R - df.R @ dg.P)


def poisson_combined(f: ObservableFn, g: ObservableFn, at, hbar: float = 1.0) -> float:
    _check_hbar(hbar)
    return poisson_classical(f, g, at) + poisson_quantum(f, g, at) / hbar


def poisson_tensor(n_classical: int, n_quantum: int, hbar: float = 1.0) -> np.ndarray:
    """Matrix ``Pi`` with ``{f, g} = grad(f) @ Pi @ grad(g)`` in flat coordinates."""
    _check_hbar(hbar)
    nc, nq = n_classical, n_quantum
    Pi = np.zeros((2 * nc + 2 * nq, 2 * nc + 2 * nq))
    i = np.arange(nc)
    Pi[nc + i, i] = 1.0
    Pi[i, nc + i] = -1.0
    k = np.arange(nq)
    Pi[2 * nc + nq + k, 2 * nc + k] = 1.0 / hbar
    Pi[2 * nc + k, 2 * nc + nq + k] = -1.0 / hbar
    return Pi


def bracket_observable(f: ObservableFn, g: ObservableFn, hbar: float = 1.0) -> ObservableFn:
    """``{f, g}`` as an observable in its own right.

    Its gradient uses the Hessians of f and g, so both must provide ``hess``.
    The result has no Hessian, so brackets nest at most one level deep.
    """
    if f.hess is None or g.hess is None:
        raise ValueError("bracket_observable needs observables with Hessians")
    _check_hbar(hbar)

    def eval_(s):
        return poisson_combined(f, g, s, hbar)

    def grad(s):
        Pi = poisson_tensor(s.n_classical, s.n_quantum, hbar)
        df, dg = f.grad(s).flat(), g.grad(s).flat()
        return Gradient.from_flat(f.hess(s) @ Pi @ dg - g.hess(s) @ Pi @ df, s.n_classical)

    return ObservableFn(
        eval=eval_,
        grad=grad,
        phase_invariant=f.phase_invariant and g.phase_invariant,
        name=f"{{{f.name}, {g.name}}}",
    )


def phase_generator(f: ObservableFn, at) -> float:
    """``Gamma f = {f_I, f}_Q = sum_k (p_k df/dq_k - q_k df/dp_k)``."""
    at = as_ehrenfest(at)
    df = f.grad(at)
    q, p = at.quantum.q, at.quantum.p
    return float(p @ df.q - q @ df.p)


def phase_field(at) -> Gradient:
    """Components of the phase-rotation vector field at ``at``."""
    at = as_ehrenfest(at)
    nc = at.n_classical
    return Gradient(np.zeros(nc), np.zeros(nc), at.quantum.p.copy(), -at.quantum.q)


def hamiltonian_vector_field(f_H: ObservableFn, at, hbar: float = 1.0) -> Gradient:
    """Tangent vector ``(dR, dP, dq, dp)/dt`` of the flow generated by ``f_H``."""
    _check_hbar(hbar)
    at = as_ehrenfest(at)
    d = f_H.grad(at)
    return Gradient(d.P.copy(), -d.R, d.p / hbar, -d.q / hbar)


def sphere_gradient(f: ObservableFn, at) -> np.ndarray:
    """Quantum gradient of f projected on the tangent space of the unit sphere."""
    at = as_ehrenfest(at)
    d = f.grad(at)
    g = np.concatenate([d.q, d.p])
    x = np.concatenate([at.quantum.q, at.quantum.p])
    return g - (g @ x) / (x @ x) * x


def finite_difference_gradient(f, at, h: float = 1e-5) -> Gradient:
    """Central-difference gradient of ``f(state) -> float``.

    Test oracle for the analytic gradients; not used by the integrators.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    at = as_ehrenfest(at)
    y0 = at.flat()
    nc = at.n_classical
    chart = at.classical.chart
    g = np.empty_like(y0)
    for i in range(y0.size):
        yp = y0.copy()
        ym = y0.copy()
        yp[i] += h
        ym[i] -= h
        fp = f(EhrenfestState.from_flat(yp, nc, chart))
        fm = f(EhrenfestState.from_flat(ym, nc, chart))
        g[i] = (fp - fm) / (2 * h)
    return Gradient.from_flat(g, nc)
