"""Ehrenfest propagation: model interface and integrators.

The equations integrated here are the mean-field ones::

    dR/dt = dT/dP
    dP/dt = -<psi| dH_e/dR |psi> - dV/dR
    i hbar dpsi/dt = H_e(R) psi

and the conserved energy is ``T(P) + V(R) + <psi|H_e(R) psi>`` (full
expectation, no factor 1/2).  In the bracket language of
:mod:`geoehrenfest.geometry` this flow is generated by that energy through
``{,}_C + (2 hbar)^-1 {,}_Q``: with ``z = q + i p`` the quantum gradient of a
full expectation is twice the gradient of ``f_A``.  :func:`generator_hbar`
returns the bracket scale to pass to ``hamiltonian_vector_field``.

All array-level helpers accept leading batch axes, so ensembles propagate
as one vectorized state.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import (
    EhrenfestState,
    Gradient,
    HermitianOperator,
    NonHermitianError,
    ObservableFn,
    PAULI_X,
    PAULI_Z,
)

log = logging.getLogger(__name__)

QUANTUM_BRACKET_SCALE = 2.0


class PropagationError(RuntimeError):
    """Numerical failure inside a step (non-finite values, eigensolver failure)."""


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EhrenfestModel:
    """Parametrized electronic Hamiltonian coupled to classical coordinates.

    ``hamiltonian(R)`` maps positions of shape ``(..., n_classical)`` to complex
    Hermitian matrices ``(..., N, N)``; ``hamiltonian_gradient(R)`` returns
    ``(..., n_classical, N, N)``.  Exactly one of ``masses`` (kinetic energy
    ``sum P^2 / 2M``) and ``frequencies`` (action-angle chart, kinetic energy
    ``sum w I``) is set.
    """

    n_classical: int
    n_quantum: int
    hamiltonian: Callable[[np.ndarray], np.ndarray]
    hamiltonian_gradient: Callable[[np.ndarray], np.ndarray]
    masses: Optional[np.ndarray] = None
    frequencies: Optional[np.ndarray] = None
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    potential_gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "model"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.masses is None) == (self.frequencies is None):
            raise ValueError("set exactly one of masses / frequencies")
        if self.masses is not None:
            m = np.broadcast_to(np.asarray(self.masses, dtype=float), (self.n_classical,)).copy()
            if np.any(~np.isfinite(m)) or np.any(m <= 0):
                raise ValueError(f"masses must be positive and finite, got {m}")
            object.__setattr__(self, "masses", m)
        else:
            w = np.broadcast_to(np.asarray(self.frequencies, dtype=float), (self.n_classical,)).copy()
            object.__setattr__(self, "frequencies", w)
        if (self.potential is None) != (self.potential_gradient is None):
            raise ValueError("potential and potential_gradient go together")

    @property
    def action_angle(self) -> bool:
        return self.frequencies is not None

    @property
    def chart(self) -> str:
        return "action-angle" if self.action_angle else "darboux"

    def kinetic(self, P: np.ndarray) -> np.ndarray:
        if self.action_angle:
            return P @ self.frequencies
        return np.sum(P * P / (2 * self.masses), axis=-1)

    def velocity(self, P: np.ndarray) -> np.ndarray:
        if self.action_angle:
            return np.broadcast_to(self.frequencies, P.shape).copy()
        return P / self.masses

    def classical_potential(self, R: np.ndarray) -> np.ndarray:
        if self.potential is None:
            return np.zeros(R.shape[:-1])
        return np.asarray(self.potential(R), dtype=float)

    def classical_force(self, R: np.ndarray) -> np.ndarray:
        if self.potential_gradient is None:
            return np.zeros_like(R)
        return -np.asarray(self.potential_gradient(R), dtype=float)

    def operator(self, R) -> HermitianOperator:
        """H_e(R) as a validated :class:`HermitianOperator` (single R)."""
        return HermitianOperator.from_matrix(self.hamiltonian(np.asarray(R, dtype=float)))

    def check_hermitian(self, Rs, tol: float = 1e-12) -> float:
        """Largest Hermiticity residual of H_e over the sample positions."""
        H = self.hamiltonian(np.atleast_2d(np.asarray(Rs, dtype=float)))
        residual = float(np.max(np.abs(H - np.swapaxes(H, -1, -2).conj())))
        if residual > tol:
            raise NonHermitianError(residual, tol)
        return residual

    def check_gradient(self, R, h: float = 1e-6) -> float:
        """Max deviation of ``hamiltonian_gradient`` from central differences at R."""
        R = np.asarray(R, dtype=float)
        dH = self.hamiltonian_gradient(R)
        worst = 0.0
        for j in range(self.n_classical):
            e = np.zeros_like(R)
            e[j] = h
            fd = (self.hamiltonian(R + e) - self.hamiltonian(R - e)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(fd - dH[j]))))
        return worst


def spin_oscillator(mass: float = 1.0, omega: float = 1.0, coupling: float = 0.2) -> EhrenfestModel:
    """Harmonic oscillator coupled to a spin: ``H_e(R) = sz/2 + coupling R sx``."""
    sz, sx = PAULI_Z.matrix, PAULI_X.matrix
    k = mass * omega**2

    def H(R):
        R = np.asarray(R, dtype=float)
        return 0.5 * sz + coupling * R[..., 0, None, None] * sx

    def dH(R):
        R = np.asarray(R, dtype=float)
        return np.broadcast_to(coupling * sx, R.shape[:-1] + (1, 2, 2)).astype(complex)

    return EhrenfestModel(
        n_classical=1,
        n_quantum=2,
        hamiltonian=H,
        hamiltonian_gradient=dH,
        masses=np.array([mass]),
        potential=lambda R: 0.5 * k * np.sum(R * R, axis=-1),
        potential_gradient=lambda R: k * R,
        name="spin-oscillator",
        params={"mass": mass, "omega": omega, "coupling": coupling},
    )


def linear_coupling_model(h0, couplings, masses, omegas=None, name: str = "matrix") -> EhrenfestModel:
    """``H_e(R) = H0 + sum_J R_J V_J`` with optional harmonic confinement.

    ``h0`` and each coupling ``V_J`` must be Hermitian; violations raise
    :class:`NonHermitianError` carrying the residual.
    """
    H0 = HermitianOperator.from_matrix(h0).matrix
    V = np.array([HermitianOperator.from_matrix(v).matrix for v in couplings])
    nc, nq = V.shape[0], H0.shape[0]
    if V.shape[1:] != (nq, nq):
        raise ValueError("coupling matrices must match H0 in shape")
    masses = np.broadcast_to(np.asarray(masses, dtype=float), (nc,)).copy()
    pot = grad = None
    if omegas is not None:
        k = masses * np.broadcast_to(np.asarray(omegas, dtype=float), (nc,)) ** 2
        pot = lambda R: 0.5 * np.sum(k * R * R, axis=-1)  # noqa: E731
        grad = lambda R: k * R  # noqa: E731

    def H(R):
        R = np.asarray(R, dtype=float)
        return H0 + np.einsum("...j,jab->...ab", R, V)

    def dH(R):
        R = np.asarray(R, dtype=float)
        return np.broadcast_to(V, R.shape[:-1] + V.shape).copy()

    return EhrenfestModel(
        n_classical=nc,
        n_quantum=nq,
        hamiltonian=H,
        hamiltonian_gradient=dH,
        masses=masses,
        potential=pot,
        potential_gradient=grad,
        name=name,
    )


# --------------------------------------------------------------------------
# array-level kernels
# --------------------------------------------------------------------------


def _expect(psi: np.ndarray, H: np.ndarray) -> np.ndarray:
    return np.einsum("...a,...ab,...b->...", psi.conj(), H, psi).real


def _energy(model: EhrenfestModel, R, P, psi) -> np.ndarray:
    return model.kinetic(P) + model.classical_potential(R) + _expect(psi, model.hamiltonian(R))


def _force(model: EhrenfestModel, R, psi) -> np.ndarray:
    dH = model.hamiltonian_gradient(R)
    hf = np.einsum("...a,...jab,...b->...j", psi.conj(), dH, psi).real
    return model.classical_force(R) - hf


def apply_propagator(H: np.ndarray, psi: np.ndarray, tau: float) -> np.ndarray:
    """``exp(-i tau H) psi`` for (stacks of) Hermitian H.

    Two-level systems use the closed SU(2) form; larger ones diagonalize.
    """
    n = H.shape[-1]
    if n == 2:
        a0 = 0.5 * (H[..., 0, 0] + H[..., 1, 1]).real
        az = 0.5 * (H[..., 0, 0] - H[..., 1, 1]).real
        off = H[..., 0, 1]
        a = np.sqrt(az * az + off.real**2 + off.imag**2)
        c = np.cos(tau * a)
        s = tau * np.sinc(tau * a / np.pi)  # sin(tau a) / a
        p0, p1 = psi[..., 0], psi[..., 1]
        # (a . sigma) psi = (H - a0) psi
        t0 = az * p0 + off * p1
        t1 = off.conj() * p0 - az * p1
        ph = np.exp(-1j * tau * a0)
        return np.stack([ph * (c * p0 - 1j * s * t0), ph * (c * p1 - 1j * s * t1)], axis=-1)
    try:
        w, V = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(H)
        raise PropagationError(f"eigendecomposition failed (condition number {cond:.3e})") from exc
    c = np.einsum("...ba,...b->...a", V.conj(), psi)
    return np.einsum("...ab,...b->...a", V, np.exp(-1j * tau * w) * c)


def strang_arrays(model: EhrenfestModel, R, P, psi, dt: float, hbar: float = 1.0, freeze_quantum: bool = False):
    """One symmetric splitting step on arrays; returns new ``(R, P, psi)``.

    Half kick, drift, exact quantum substep with ``H_e`` at the midpoint of
    the drift, half kick at the updated ``(R, psi)``.  Reversible: a step of
    ``-dt`` undoes a step of ``dt``.
    """
    P = P + 0.5 * dt * _force(model, R, psi)
    R_new = R + dt * model.velocity(P)
    if not freeze_quantum:
        psi = apply_propagator(model.hamiltonian(0.5 * (R + R_new)), psi, dt / hbar)
    P = P + 0.5 * dt * _force(model, R_new, psi)
    return R_new, P, psi


def _rhs_arrays(model, R, P, psi, hbar):
    return model.velocity(P), _force(model, R, psi), -1j / hbar * np.einsum("...ab,...b->...a", model.hamiltonian(R), psi)


def rk4_arrays(model: EhrenfestModel, R, P, psi, dt: float, hbar: float = 1.0):
    k1 = _rhs_arrays(model, R, P, psi, hbar)
    k2 = _rhs_arrays(model, R + 0.5 * dt * k1[0], P + 0.5 * dt * k1[1], psi + 0.5 * dt * k1[2], hbar)
    k3 = _rhs_arrays(model, R + 0.5 * dt * k2[0], P + 0.5 * dt * k2[1], psi + 0.5 * dt * k2[2], hbar)
    k4 = _rhs_arrays(model, R + dt * k3[0], P + dt * k3[1], psi + dt * k3[2], hbar)
    return tuple(x + dt / 6.0 * (a + 2 * b + 2 * c + d) for x, a, b, c, d in zip((R, P, psi), k1, k2, k3, k4))


INTEGRATORS = {"strang": strang_arrays, "rk4": rk4_arrays}


# --------------------------------------------------------------------------
# state-level API
# --------------------------------------------------------------------------


def _unpack(state: EhrenfestState):
    return state.classical.R.copy(), state.classical.P.copy(), state.psi


def _pack(model: EhrenfestModel, R, P, psi) -> EhrenfestState:
    return EhrenfestState.from_arrays(R, P, psi, chart=model.chart)


def _check_dt(dt: float) -> None:
    if not (math.isfinite(dt) and dt != 0):
        raise ValueError(f"dt must be finite and nonzero, got {dt}")


def total_energy(model: EhrenfestModel, state: EhrenfestState, hbar: float = 1.0) -> float:
    """``T(P) + V(R) + <psi|H_e(R) psi>``.  ``hbar`` does not enter the energy."""
    R, P, psi = _unpack(state)
    return float(_energy(model, R, P, psi))


def ehrenfest_rhs(model: EhrenfestModel, state: EhrenfestState, hbar: float = 1.0) -> Gradient:
    R, P, psi = _unpack(state)
    dR, dP, dpsi = _rhs_arrays(model, R, P, psi, hbar)
    return Gradient(dR, dP, dpsi.real, dpsi.imag)


def step_strang(model: EhrenfestModel, state: EhrenfestState, dt: float, hbar: float = 1.0) -> EhrenfestState:
    _check_dt(dt)
    return _pack(model, *strang_arrays(model, *_unpack(state), dt, hbar))


def step_rk4(model: EhrenfestModel, state: EhrenfestState, dt: float, hbar: float = 1.0) -> EhrenfestState:
    _check_dt(dt)
    return _pack(model, *rk4_arrays(model, *_unpack(state), dt, hbar))


def hamiltonian_function(model: EhrenfestModel) -> ObservableFn:
    """The energy of :func:`total_energy` as an observable with analytic gradient.

    Its Hamiltonian vector field reproduces :func:`ehrenfest_rhs` when the
    quantum bracket is scaled by ``1 / (2 hbar)``; see :func:`generator_hbar`.
    """

    def eval_(s):
        return total_energy(model, s)

    def grad(s):
        R, P, psi = _unpack(s)
        dR = -_force(model, R, psi)
        dP = model.velocity(P)
        Hpsi = model.hamiltonian(R) @ psi
        # d<psi|H psi>/dq = 2 Re(H psi), d/dp = 2 Im(H psi)
        return Gradient(dR, dP, 2 * Hpsi.real, 2 * Hpsi.imag)

    def batch(Y, nc):
        nq = (Y.shape[-1] - 2 * nc) // 2
        R, P = Y[..., :nc], Y[..., nc : 2 * nc]
        psi = Y[..., 2 * nc : 2 * nc + nq] + 1j * Y[..., 2 * nc + nq :]
        return _energy(model, R, P, psi)

    return ObservableFn(eval=eval_, grad=grad, phase_invariant=True, batch=batch, name="f_H")


def generator_hbar(hbar: float = 1.0) -> float:
    """Bracket ``hbar`` under which :func:`hamiltonian_function` generates the flow."""
    return QUANTUM_BRACKET_SCALE * hbar


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    R: np.ndarray
    P: np.ndarray
    psi: np.ndarray
    energy: np.ndarray
    norm: np.ndarray  # f_I = |psi|^2 / 2
    chart: str = "darboux"
    error: Optional[str] = None

    def __len__(self) -> int:
        return self.times.size

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def states(self) -> list[EhrenfestState]:
        return [EhrenfestState.from_arrays(r, p, z, chart=self.chart) for r, p, z in zip(self.R, self.P, self.psi)]

    def energy_drift(self) -> float:
        """Max relative deviation of the energy from its initial value."""
        e0 = self.energy[0]
        scale = abs(e0) if e0 != 0 else 1.0
        return float(np.max(np.abs(self.energy - e0)) / scale)

    def norm_drift(self) -> float:
        return float(np.max(np.abs(self.norm - self.norm[0])))

    def columns(self) -> list[str]:
        nc, nq = self.R.shape[1], self.psi.shape[1]
        return (
            ["t"]
            + [f"R{j + 1}" for j in range(nc)]
            + [f"P{j + 1}" for j in range(nc)]
            + [f"q{k + 1}" for k in range(nq)]
            + [f"p{k + 1}" for k in range(nq)]
            + ["energy", "norm"]
        )

    def table(self) -> np.ndarray:
        return np.column_stack(
            [self.times, self.R, self.P, self.psi.real, self.psi.imag, self.energy, self.norm]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for row in self.table():
                w.writerow([format(x, ".17g") for x in row])


def propagate(
    model: EhrenfestModel,
    initial: EhrenfestState,
    dt: float,
    n_steps: int,
    integrator: str = "strang",
    hbar: float = 1.0,
    record_every: int = 1,
) -> Trajectory:
    """Integrate ``n_steps`` steps, recording every ``record_every`` steps.

    The initial state and the final state are always recorded.  A non-finite
    state stops the run; the trajectory is truncated at the last finite
    record and ``error`` says why.
    """
    if not (math.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    if n_steps < 1 or record_every < 1:
        raise ValueError("n_steps and record_every must be >= 1")
    if not hbar > 0:
        raise ValueError(f"hbar must be positive, got {hbar}")
    try:
        step = INTEGRATORS[integrator]
    except KeyError:
        raise ValueError(f"unknown integrator {integrator!r}; choose from {sorted(INTEGRATORS)}") from None

    R, P, psi = _unpack(initial)
    rec_idx = list(range(0, n_steps + 1, record_every))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    n_rec = len(rec_idx)
    Rs = np.empty((n_rec, R.size))
    Ps = np.empty((n_rec, P.size))
    psis = np.empty((n_rec, psi.size), dtype=complex)
    Rs[0], Ps[0], psis[0] = R, P, psi
    k = 1
    error = None
    for i in range(1, n_steps + 1):
        try:
            R, P, psi = step(model, R, P, psi, dt, hbar)
        except PropagationError as exc:
            error = f"step {i}: {exc}"
            break
        if k < n_rec and i == rec_idx[k]:
            if not (np.all(np.isfinite(R)) and np.all(np.isfinite(P)) and np.all(np.isfinite(psi))):
                error = f"non-finite state at step {i}"
                break
            Rs[k], Ps[k], psis[k] = R, P, psi
            k += 1
    if error is not None:
        log.warning("propagation stopped: %s", error)
    Rs, Ps, psis = Rs[:k], Ps[:k], psis[:k]
    times = np.asarray(rec_idx[:k], dtype=float) * dt
    energy = np.atleast_1d(_energy(model, Rs, Ps, psis))
    norm = 0.5 * np.sum(np.abs(psis) ** 2, axis=-1)
    return Trajectory(times, Rs, Ps, psis, energy, norm, chart=model.chart, error=error)
