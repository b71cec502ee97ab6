"""Oscillator in action-angle variables coupled to a two-level system.

The energy is ``f_H = I_theta + 1/2 <psi| sz + eps cos(theta) sx |psi>``.  With
the state written as ``psi = e^{i alpha} (I_phi, e^{i phi} sqrt(1 - I_phi^2))``
the same function reads::

    I_theta + I_phi^2 + eps I_phi sqrt(1 - I_phi^2) cos(theta) cos(phi) - 1/2

:func:`toy_hamiltonian` drops the constant ``-1/2``;
:func:`quantum_form_hamiltonian` keeps it.

Two flows are available for the Poincare section at ``theta = 0``:

``"ehrenfest"``
    The mean-field flow of the product space, integrated in the Cartesian
    quantum coordinates.  Because ``dtheta/dt = 1`` independently of the
    state, the section map is a fixed SU(2) rotation and every orbit stays
    on a circle of the Bloch sphere.
``"canonical"``
    The one-and-a-half degree of freedom system obtained by treating
    ``(phi, I_phi)`` as a canonical pair for the reduced energy above.  It is
    nonlinear in the quantum variables and has a chaotic sea at ``eps = 0.8``.
    It is integrated in the chart ``X + iY = sqrt(2 (1 - I_phi)) e^{i phi}``,
    where the energy is smooth (no square-root singularity at ``I_phi = 1``).

In both cases ``(I_phi, phi)`` are derived output only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numba
import numpy as np

from .dynamics import EhrenfestModel, Trajectory
from .geometry import (
    PAULI_X,
    PAULI_Z,
    ClassicalState,
    EhrenfestState,
    Gradient,
    HermitianOperator,
    ObservableFn,
    QuantumStateReal,
    quadratic_observable,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ToyParams:
    epsilon: float = 0.8

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % TWO_PI - np.pi


@dataclass(frozen=True)
class ToyState:
    theta: float
    I_theta: float
    quantum: QuantumStateReal

    def __post_init__(self):
        if self.quantum.dim != 2:
            raise ValueError("toy model quantum part lives in C^2")
        if not self.quantum.is_normalized(1e-10):
            raise ValueError(f"quantum part must be normalized, |psi|^2 = {self.quantum.norm2()}")

    @classmethod
    def from_variables(cls, theta: float, I_theta: float, I_phi: float, phi: float, alpha: float = 0.0) -> "ToyState":
        if not 0.0 <= I_phi <= 1.0:
            raise ValueError(f"I_phi must lie in [0, 1], got {I_phi}")
        z = np.exp(1j * alpha) * np.array([I_phi, np.exp(1j * phi) * math.sqrt(1.0 - I_phi * I_phi)])
        return cls(float(theta), float(I_theta), QuantumStateReal.from_complex(z))

    @classmethod
    def from_ehrenfest(cls, s: EhrenfestState) -> "ToyState":
        return cls(float(s.classical.R[0]), float(s.classical.P[0]), s.quantum)

    @property
    def psi(self) -> np.ndarray:
        return self.quantum.to_complex()

    @property
    def I_phi(self) -> float:
        return float(abs(self.psi[0]))

    @property
    def phi(self) -> float:
        z = self.psi
        return float(_wrap(np.angle(z[1]) - np.angle(z[0])))

    def to_ehrenfest(self) -> EhrenfestState:
        return EhrenfestState(ClassicalState([self.theta], [self.I_theta], chart="action-angle"), self.quantum)


DEFAULT_INITIAL = dict(theta=0.0, I_theta=1.0, I_phi=0.6, phi=1.0)


def default_initial() -> ToyState:
    return ToyState.from_variables(**DEFAULT_INITIAL)


# --------------------------------------------------------------------------
# energies (array friendly: psi has shape (..., 2))
# --------------------------------------------------------------------------


def toy_energy(theta, I_theta, psi, epsilon: float):
    """Reduced energy without the constant, from Cartesian amplitudes."""
    psi = np.asarray(psi)
    z1, z2 = psi[..., 0], psi[..., 1]
    return I_theta + np.abs(z1) ** 2 + epsilon * np.cos(theta) * (z1.conj() * z2).real


def toy_hamiltonian(state: ToyState, params: ToyParams) -> float:
    return float(toy_energy(state.theta, state.I_theta, state.psi, params.epsilon))


def electronic_operator(theta: float, epsilon: float) -> HermitianOperator:
    """``sz + eps cos(theta) sx``; the energy holds half its expectation."""
    return PAULI_Z + (epsilon * math.cos(theta)) * PAULI_X


def quantum_form_hamiltonian(state: ToyState, params: ToyParams) -> float:
    f = quadratic_observable(electronic_operator(state.theta, params.epsilon))
    return state.I_theta + f(state.quantum)


def quantum_form_energy(theta, I_theta, psi, epsilon: float):
    """Batch version of :func:`quantum_form_hamiltonian` via the real representation."""
    psi = np.asarray(psi)
    x = np.concatenate([psi.real, psi.imag], axis=-1)
    Mz = np.block([[PAULI_Z.re, -PAULI_Z.im], [PAULI_Z.im, PAULI_Z.re]])
    Mx = np.block([[PAULI_X.re, -PAULI_X.im], [PAULI_X.im, PAULI_X.re]])
    fz = 0.5 * np.einsum("...i,ij,...j->...", x, Mz, x)
    fx = 0.5 * np.einsum("...i,ij,...j->...", x, Mx, x)
    return I_theta + fz + epsilon * np.cos(theta) * fx


# --------------------------------------------------------------------------
# the model as an Ehrenfest system
# --------------------------------------------------------------------------


def toy_model(params: ToyParams) -> EhrenfestModel:
    """Ehrenfest model with ``R = theta``, ``P = I_theta`` and ``H_e = (sz + eps cos(theta) sx) / 2``."""
    eps = params.epsilon
    sz, sx = PAULI_Z.matrix, PAULI_X.matrix

    def H(R):
        c = np.cos(np.asarray(R, dtype=float)[..., 0])
        return 0.5 * sz + 0.5 * eps * c[..., None, None] * sx

    def dH(R):
        s = np.sin(np.asarray(R, dtype=float)[..., 0])
        return (-0.5 * eps * s[..., None, None] * sx)[..., None, :, :]

    return EhrenfestModel(
        n_classical=1,
        n_quantum=2,
        hamiltonian=H,
        hamiltonian_gradient=dH,
        frequencies=np.array([1.0]),
        name="toy",
        params={"epsilon": eps},
    )


def toy_rhs(state: ToyState, params: ToyParams) -> Gradient:
    """Velocity of the Ehrenfest flow: ``(dtheta, dI_theta, dq, dp)``."""
    eps = params.epsilon
    z = state.psi
    H = 0.5 * (PAULI_Z.matrix + eps * math.cos(state.theta) * PAULI_X.matrix)
    dz = -1j * (H @ z)
    dI = eps * math.sin(state.theta) * (z[0].conjugate() * z[1]).real
    return Gradient(np.array([1.0]), np.array([dI]), dz.real, dz.imag)


def canonical_rhs(theta: float, I_phi: float, phi: float, epsilon: float):
    """``(dtheta, dI_theta, dI_phi, dphi)`` with ``(phi, I_phi)`` canonical.

    Singular at ``I_phi = 1``; integrate with :func:`poincare_section` instead.
    """
    s = math.sqrt(1.0 - I_phi * I_phi)
    c = epsilon * math.cos(theta)
    dI_theta = epsilon * math.sin(theta) * I_phi * s * math.cos(phi)
    dI_phi = c * I_phi * s * math.sin(phi)
    dphi = 2.0 * I_phi + c * math.cos(phi) * (s - I_phi * I_phi / s)
    return 1.0, dI_theta, dI_phi, dphi


# --------------------------------------------------------------------------
# observables on the toy state space (phase invariant)
# --------------------------------------------------------------------------


def _qp(Y, nc):
    nq = (Y.shape[-1] - 2 * nc) // 2
    return Y[..., 2 * nc : 2 * nc + nq], Y[..., 2 * nc + nq :]


def action_observable() -> ObservableFn:
    """``I_theta`` (the classical momentum slot)."""

    def grad(s):
        nc, nq = s.n_classical, s.n_quantum
        gP = np.zeros(nc)
        gP[0] = 1.0
        return Gradient(np.zeros(nc), gP, np.zeros(nq), np.zeros(nq))

    return ObservableFn(
        eval=lambda s: float(s.classical.P[0]),
        grad=grad,
        phase_invariant=True,
        batch=lambda Y, nc: Y[..., nc],
        name="I_theta",
    )


def population_observable() -> ObservableFn:
    """``I_phi^2 = |z_1|^2``."""
    proj = HermitianOperator(np.diag([1.0, 0.0]), np.zeros((2, 2)))
    return replace(quadratic_observable(proj) * 2.0, name="I_phi^2")


def sigma_z_observable() -> ObservableFn:
    """``<sz> = 2 f_sz``."""
    return replace(quadratic_observable(PAULI_Z) * 2.0, name="<sz>")


def cos_phi_observable() -> ObservableFn:
    """``cos(phi) = Re(conj(z1) z2) / (|z1| |z2|)``; undefined at the poles."""

    def parts(q, p):
        a = q[..., 0] * q[..., 1] + p[..., 0] * p[..., 1]
        b = q[..., 0] * p[..., 1] - p[..., 0] * q[..., 1]
        return a, b

    def eval_(s):
        a, b = parts(s.quantum.q, s.quantum.p)
        return float(a / math.hypot(a, b))

    def grad(s):
        q, p = s.quantum.q, s.quantum.p
        a, b = parts(q, p)
        r3 = math.hypot(a, b) ** 3
        ca, cb = b * b / r3, -a * b / r3
        da_q, da_p = np.array([q[1], q[0]]), np.array([p[1], p[0]])
        db_q, db_p = np.array([p[1], -p[0]]), np.array([-q[1], q[0]])
        nc = s.n_classical
        return Gradient(np.zeros(nc), np.zeros(nc), ca * da_q + cb * db_q, ca * da_p + cb * db_p)

    def batch(Y, nc):
        a, b = parts(*_qp(Y, nc))
        return a / np.hypot(a, b)

    return ObservableFn(eval=eval_, grad=grad, phase_invariant=True, batch=batch, name="cos_phi")


# --------------------------------------------------------------------------
# Poincare section
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _canon_xy(X, Y, c):
    # c = eps cos(theta) / sqrt(2); returns (dX/dt, dY/dt) and g(I) = I sqrt(1 + I)
    I = 1.0 - 0.5 * (X * X + Y * Y)
    sq = math.sqrt(1.0 + I)
    g = I * sq
    gp = sq + 0.5 * I / sq
    common = 2.0 * I + c * gp * X
    return -common * Y, common * X - c * g, g


@numba.njit(cache=True)
def _canon_deriv(theta, X, Y, eps):
    dX, dY, g = _canon_xy(X, Y, eps * math.cos(theta) / math.sqrt(2.0))
    return eps * math.sin(theta) * g * X / math.sqrt(2.0), dX, dY


_GL_R3 = math.sqrt(3.0) / 6.0


@numba.njit(cache=True)
def _canon_segment(theta0, Ith, X, Y, eps, n, dt):
    # two-stage Gauss-Legendre: symplectic in (X, Y) and exact on the
    # quadratic invariant X^2 + Y^2 of the decoupled flow
    a11, a12, a21, a22 = 0.25, 0.25 - _GL_R3, 0.25 + _GL_R3, 0.25
    k = eps / math.sqrt(2.0)
    u1, v1, _ = _canon_xy(X, Y, k * math.cos(theta0))
    u2, v2 = u1, v1
    for j in range(n):
        t = theta0 + j * dt
        t1, t2 = t + (0.5 - _GL_R3) * dt, t + (0.5 + _GL_R3) * dt
        cc1, cc2 = k * math.cos(t1), k * math.cos(t2)
        for _it in range(50):
            nu1, nv1, g1 = _canon_xy(X + dt * (a11 * u1 + a12 * u2), Y + dt * (a11 * v1 + a12 * v2), cc1)
            nu2, nv2, g2 = _canon_xy(X + dt * (a21 * u1 + a22 * u2), Y + dt * (a21 * v1 + a22 * v2), cc2)
            change = abs(nu1 - u1) + abs(nv1 - v1) + abs(nu2 - u2) + abs(nv2 - v2)
            u1, v1, u2, v2 = nu1, nv1, nu2, nv2
            if change <= 1e-15:
                break
        _, _, g1 = _canon_xy(X + dt * (a11 * u1 + a12 * u2), Y + dt * (a11 * v1 + a12 * v2), cc1)
        _, _, g2 = _canon_xy(X + dt * (a21 * u1 + a22 * u2), Y + dt * (a21 * v1 + a22 * v2), cc2)
        x1 = X + dt * (a11 * u1 + a12 * u2)
        x2 = X + dt * (a21 * u1 + a22 * u2)
        Ith += 0.5 * dt * k * (math.sin(t1) * g1 * x1 + math.sin(t2) * g2 * x2)
        X += 0.5 * dt * (u1 + u2)
        Y += 0.5 * dt * (v1 + v2)
    return Ith, X, Y


@numba.njit(cache=True)
def _ehrenfest_segment(theta0, Ith, z1, z2, eps, n, dt):
    # Strang step specialised to H_e = (sz + eps cos(theta) sx) / 2, dtheta/dt = 1
    for j in range(n):
        t = theta0 + j * dt
        w = z1.conjugate() * z2
        Ith += 0.5 * dt * eps * math.sin(t) * w.real
        tm = t + 0.5 * dt
        az = 0.5
        ax = 0.5 * eps * math.cos(tm)
        a = math.sqrt(az * az + ax * ax)
        c = math.cos(dt * a)
        s = math.sin(dt * a) / a
        t0 = az * z1 + ax * z2
        t1 = ax * z1 - az * z2
        z1, z2 = c * z1 - 1j * s * t0, c * z2 - 1j * s * t1
        w = z1.conjugate() * z2
        Ith += 0.5 * dt * eps * math.sin(t + dt) * w.real
    return Ith, z1, z2


@numba.njit(cache=True)
def _section_canonical(theta0, Ith, X, Y, eps, n_cross, K, first_n, first_dt, out):
    dt = 2.0 * math.pi / K
    t0 = theta0
    n, h = first_n, first_dt
    for k in range(n_cross):
        Ith, X, Y = _canon_segment(t0, Ith, X, Y, eps, n, h)
        if not (math.isfinite(Ith) and math.isfinite(X) and math.isfinite(Y)):
            return k
        out[k, 0] = Ith
        out[k, 1] = X
        out[k, 2] = Y
        t0, n, h = 0.0, K, dt
    return n_cross


@numba.njit(cache=True)
def _section_ehrenfest(theta0, Ith, z1, z2, eps, n_cross, K, first_n, first_dt, out):
    dt = 2.0 * math.pi / K
    t0 = theta0
    n, h = first_n, first_dt
    for k in range(n_cross):
        Ith, z1, z2 = _ehrenfest_segment(t0, Ith, z1, z2, eps, n, h)
        if not (math.isfinite(Ith) and math.isfinite(z1.real) and math.isfinite(z2.imag)):
            return k
        out[k, 0] = Ith
        out[k, 1] = z1.real
        out[k, 2] = z1.imag
        out[k, 3] = z2.real
        out[k, 4] = z2.imag
        t0, n, h = 0.0, K, dt
    return n_cross


def propagate_toy(
    initial: ToyState, params: ToyParams, dt: float, n_steps: int, record_every: int = 1
) -> Trajectory:
    """Splitting integration of the toy Ehrenfest flow with a compiled kernel.

    Same scheme as ``dynamics.propagate(toy_model(params), ..., "strang")``;
    the angle is recomputed as ``theta_0 + i dt`` instead of accumulated.
    """
    if not (math.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    if n_steps < 1 or record_every < 1:
        raise ValueError("n_steps and record_every must be >= 1")
    eps = float(params.epsilon)
    marks = list(range(0, n_steps + 1, record_every))
    if marks[-1] != n_steps:
        marks.append(n_steps)
    Ith = float(initial.I_theta)
    z1, z2 = (complex(v) for v in initial.psi)
    rows = [(initial.theta, Ith, z1, z2)]
    error = None
    for a, b in zip(marks[:-1], marks[1:]):
        Ith, z1, z2 = _ehrenfest_segment(initial.theta + a * dt, Ith, z1, z2, eps, b - a, dt)
        if not all(map(math.isfinite, (Ith, z1.real, z1.imag, z2.real, z2.imag))):
            error = f"non-finite state at step {b}"
            break
        rows.append((initial.theta + b * dt, Ith, z1, z2))
    times = np.asarray(marks[: len(rows)], dtype=float) * dt
    R = np.array([[r[0]] for r in rows])
    P = np.array([[r[1]] for r in rows])
    psi = np.array([[r[2], r[3]] for r in rows])
    energy = quantum_form_energy(R[:, 0], P[:, 0], psi, eps)
    norm = 0.5 * np.sum(np.abs(psi) ** 2, axis=-1)
    return Trajectory(times, R, P, psi, energy, norm, chart="action-angle", error=error)


def to_section_chart(I_phi, phi):
    r = np.sqrt(2.0 * (1.0 - np.asarray(I_phi)))
    return r * np.cos(phi), r * np.sin(phi)


def from_section_chart(X, Y):
    I_phi = np.clip(1.0 - 0.5 * (np.asarray(X) ** 2 + np.asarray(Y) ** 2), 0.0, 1.0)
    return I_phi, np.arctan2(Y, X)


class PoincareRecord(NamedTuple):
    n: int
    phi: float
    I_phi: float


@dataclass
class PoincareSection:
    n: np.ndarray
    phi: np.ndarray
    I_phi: np.ndarray
    I_theta: np.ndarray
    energy: np.ndarray  # reduced energy at each crossing
    initial_energy: float
    flow: str
    epsilon: float
    error: Optional[str] = None

    def __len__(self) -> int:
        return self.n.size

    @property
    def records(self) -> list[PoincareRecord]:
        return [PoincareRecord(int(k), float(a), float(b)) for k, a, b in zip(self.n, self.phi, self.I_phi)]

    def energy_drift(self) -> float:
        if self.n.size == 0:
            return 0.0
        scale = abs(self.initial_energy) or 1.0
        return float(np.max(np.abs(self.energy - self.initial_energy)) / scale)


FLOWS = ("canonical", "ehrenfest")


def poincare_section(
    initial: ToyState,
    params: ToyParams,
    n_crossings: int,
    flow: str = "canonical",
    steps_per_period: int = 500,
) -> PoincareSection:
    """Stroboscopic section at ``theta = 0 mod 2 pi``.

    Since ``dtheta/dt = 1`` the n-th crossing happens at ``t_n = 2 pi n - theta_0``
    (for ``theta_0`` in ``(0, 2 pi)``; a start on the section counts as
    crossing 0 and is not recorded).  Each period is split into
    ``steps_per_period`` equal steps (two-stage Gauss-Legendre for
    ``"canonical"``, the symmetric splitting for ``"ehrenfest"``).
    """
    if n_crossings < 1:
        raise ValueError("n_crossings must be >= 1")
    if steps_per_period < 1:
        raise ValueError("steps_per_period must be >= 1")
    if flow not in FLOWS:
        raise ValueError(f"unknown flow {flow!r}; choose from {FLOWS}")
    eps = float(params.epsilon)
    K = int(steps_per_period)
    theta0 = float(np.mod(initial.theta, TWO_PI))
    remaining = TWO_PI - theta0 if theta0 > 0 else TWO_PI
    first_n = max(1, math.ceil(K * remaining / TWO_PI))
    first_dt = remaining / first_n

    if flow == "canonical":
        X, Y = to_section_chart(initial.I_phi, initial.phi)
        out = np.empty((n_crossings, 3))
        done = _section_canonical(theta0, float(initial.I_theta), float(X), float(Y), eps, n_crossings, K, first_n, first_dt, out)
        out = out[:done]
        I_phi, phi = from_section_chart(out[:, 1], out[:, 2])
        I_theta = out[:, 0]
        energy = I_theta + I_phi**2 + eps * I_phi * np.sqrt(1.0 - I_phi**2) * np.cos(phi)
        e0 = initial.I_theta + initial.I_phi**2 + eps * initial.I_phi * math.sqrt(1.0 - initial.I_phi**2) * math.cos(
            initial.theta
        ) * math.cos(initial.phi)
    else:
        z = initial.psi
        out = np.empty((n_crossings, 5))
        done = _section_ehrenfest(
            theta0, float(initial.I_theta), complex(z[0]), complex(z[1]), eps, n_crossings, K, first_n, first_dt, out
        )
        out = out[:done]
        psi = np.stack([out[:, 1] + 1j * out[:, 2], out[:, 3] + 1j * out[:, 4]], axis=-1)
        I_theta = out[:, 0]
        I_phi = np.abs(psi[:, 0])
        phi = _wrap(np.angle(psi[:, 1]) - np.angle(psi[:, 0]))
        energy = toy_energy(0.0, I_theta, psi, eps)
        e0 = toy_hamiltonian(initial, params)

    error = None if done == n_crossings else f"non-finite state before crossing {done + 1}"
    return PoincareSection(
        n=np.arange(1, done + 1),
        phi=np.asarray(phi, dtype=float),
        I_phi=np.asarray(I_phi, dtype=float),
        I_theta=I_theta,
        energy=energy,
        initial_energy=float(e0),
        flow=flow,
        epsilon=eps,
        error=error,
    )


def fill_fraction(records, grid_x: int = 100, grid_y: int = 100) -> float:
    """Fraction of cells of ``[-pi, pi] x [0, 1]`` visited by the records.

    ``records`` is a :class:`PoincareSection` or a sequence of
    :class:`PoincareRecord`.
    """
    if grid_x < 2 or grid_y < 2:
        raise ValueError("grid dimensions must be >= 2")
    if isinstance(records, PoincareSection):
        phi, I_phi = records.phi, records.I_phi
    else:
        if len(records) == 0:
            return 0.0
        phi = np.array([r.phi for r in records], dtype=float)
        I_phi = np.array([r.I_phi for r in records], dtype=float)
    if phi.size == 0:
        return 0.0
    ix = np.clip(np.floor((phi + np.pi) / TWO_PI * grid_x).astype(int), 0, grid_x - 1)
    iy = np.clip(np.floor(I_phi * grid_y).astype(int), 0, grid_y - 1)
    visited = np.zeros((grid_x, grid_y), dtype=bool)
    visited[ix, iy] = True
    return float(visited.sum()) / (grid_x * grid_y)
