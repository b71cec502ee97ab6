"""Canonical ensembles on ``M_C x S_Q`` and equilibrium checks.

The reference measure is ``dmu_C dOmega_Q``: Lebesgue measure in the classical
Darboux (or action-angle) chart times the rotation-invariant measure on the
unit sphere of ``R^{2N}``.  The sphere measure is never written in
coordinates; both the uniform sampler and the Metropolis rotation moves rely
on its rotation invariance.

Chains are seeded from ``numpy.random.SeedSequence(seed).spawn(n_chains)``:
chain ``c`` uses the ``c``-th child sequence, so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .dynamics import EhrenfestModel, _energy, strang_arrays
from .geometry import EhrenfestState, ObservableFn, QuantumStateReal

log = logging.getLogger(__name__)

ACCEPTANCE_BOUNDS = (0.05, 0.95)


def sample_sphere_uniform(n_quantum: int, rng: np.random.Generator) -> QuantumStateReal:
    """Uniform point on the unit sphere of ``C^N = R^{2N}`` (normalized Gaussian)."""
    if n_quantum < 1:
        raise ValueError("n_quantum must be >= 1")
    x = rng.standard_normal(2 * n_quantum)
    x /= np.linalg.norm(x)
    return QuantumStateReal(x[:n_quantum], x[n_quantum:])


def sample_sphere_uniform_batch(n_quantum: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` uniform unit vectors of ``C^N`` as a complex array ``(size, N)``."""
    x = rng.standard_normal((size, 2 * n_quantum))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x[:, :n_quantum] + 1j * x[:, n_quantum:]


@dataclass(frozen=True)
class SamplerConfig:
    beta: float = 1.0
    n_samples: int = 100_000
    burn_in: int = 2_000
    thin: int = 1
    classical_step_scale: float = 1.5
    quantum_rotation_scale: float = 1.0
    seed: int = 0
    n_chains: int = 4

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")
        for name in ("n_samples", "burn_in"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be >= 1")
        for name in ("classical_step_scale", "quantum_rotation_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass
class Ensemble:
    """Weighted members stored as arrays ``R, P: (m, n_C)``, ``psi: (m, N)``."""

    R: np.ndarray
    P: np.ndarray
    psi: np.ndarray
    weights: np.ndarray
    chart: str = "darboux"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        self.weights = w / w.sum()
        norms = np.sum(np.abs(self.psi) ** 2, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ValueError("ensemble members must have normalized quantum part")

    @classmethod
    def uniform(cls, R, P, psi, chart="darboux", meta=None) -> "Ensemble":
        R = np.atleast_2d(R)
        return cls(R, np.atleast_2d(P), np.atleast_2d(psi), np.ones(R.shape[0]), chart, dict(meta or {}))

    @classmethod
    def from_states(cls, states: Sequence[EhrenfestState], weights=None, meta=None) -> "Ensemble":
        R = np.array([s.classical.R for s in states])
        P = np.array([s.classical.P for s in states])
        psi = np.array([s.psi for s in states])
        w = np.ones(len(states)) if weights is None else weights
        return cls(R, P, psi, w, states[0].classical.chart, dict(meta or {}))

    def __len__(self) -> int:
        return self.R.shape[0]

    @property
    def n_classical(self) -> int:
        return self.R.shape[1]

    @property
    def members(self) -> list[EhrenfestState]:
        return [EhrenfestState.from_arrays(r, p, z, chart=self.chart) for r, p, z in zip(self.R, self.P, self.psi)]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.R, self.P, self.psi.real, self.psi.imag], axis=1)


# --------------------------------------------------------------------------
# Metropolis sampling of exp(-beta f_H)
# --------------------------------------------------------------------------


def random_rotation_generator(dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Antisymmetric ``dim x dim`` matrix; ``Omega`` and ``-Omega`` are equally likely."""
    A = rng.standard_normal((dim, dim))
    return scale * (A - A.T) / math.sqrt(2.0)


def _reflect_action(P: np.ndarray) -> np.ndarray:
    return np.abs(P)


def _run_chain(model: EhrenfestModel, config: SamplerConfig, n_keep: int, seed_seq, chain: int, initial=None):
    rng = np.random.default_rng(seed_seq)
    nc, nq = model.n_classical, model.n_quantum
    beta = config.beta
    if initial is not None:
        R, P, psi = (np.array(a, copy=True) for a in initial)
    elif model.action_angle:
        R = rng.uniform(0.0, 2 * np.pi, nc)
        P = rng.exponential(1.0 / beta, nc)
        psi = sample_sphere_uniform_batch(nq, 1, rng)[0]
    else:
        R = np.zeros(nc)
        P = np.zeros(nc)
        psi = sample_sphere_uniform_batch(nq, 1, rng)[0]
    E = float(_energy(model, R, P, psi))
    if not math.isfinite(E):
        raise ValueError("initial state has non-finite energy")

    x = np.concatenate([psi.real, psi.imag])
    out_R = np.empty((n_keep, nc))
    out_P = np.empty((n_keep, nc))
    out_psi = np.empty((n_keep, nq), dtype=complex)
    acc_c = acc_q = tried = 0
    nonfinite = 0
    total = config.burn_in + n_keep * config.thin
    kept = 0
    sc = config.classical_step_scale
    for it in range(total):
        # classical move
        R2 = R + sc * rng.standard_normal(nc)
        P2 = P + sc * rng.standard_normal(nc)
        if model.action_angle:
            R2 = np.mod(R2, 2 * np.pi)
            P2 = _reflect_action(P2)
        E2 = float(_energy(model, R2, P2, psi))
        u = rng.random()
        if not math.isfinite(E2):
            nonfinite += 1
        elif E2 <= E or u < math.exp(-beta * (E2 - E)):
            R, P, E = R2, P2, E2
            if it >= config.burn_in:
                acc_c += 1
        # quantum move
        Om = random_rotation_generator(2 * nq, config.quantum_rotation_scale, rng)
        x2 = expm(Om) @ x
        x2 /= np.linalg.norm(x2)
        psi2 = x2[:nq] + 1j * x2[nq:]
        E2 = float(_energy(model, R, P, psi2))
        u = rng.random()
        if not math.isfinite(E2):
            nonfinite += 1
        elif E2 <= E or u < math.exp(-beta * (E2 - E)):
            x, psi, E = x2, psi2, E2
            if it >= config.burn_in:
                acc_q += 1
        if it >= config.burn_in:
            tried += 1
            if (it - config.burn_in + 1) % config.thin == 0:
                out_R[kept], out_P[kept], out_psi[kept] = R, P, psi
                kept += 1
    stats = {
        "chain": chain,
        "accept_classical": acc_c / tried if tried else float("nan"),
        "accept_quantum": acc_q / tried if tried else float("nan"),
        "rejected_nonfinite": nonfinite,
    }
    return out_R, out_P, out_psi, stats


def metropolis_canonical(
    model: EhrenfestModel, config: SamplerConfig, threads: int = 1, initial=None
) -> Ensemble:
    """Metropolis chains targeting ``exp(-beta f_H) dmu_C dOmega_Q``.

    Each iteration proposes a classical Gaussian move (angles wrapped, actions
    reflected at zero) and then a random rotation ``exp(Omega)`` of the real
    quantum vector; both proposals are symmetric and preserve the reference
    measure, so acceptance is ``min(1, exp(-beta dE))``.  ``n_samples`` is
    split over the chains.  Acceptance rates outside ``ACCEPTANCE_BOUNDS``
    are recorded in ``meta["warnings"]``.
    """
    nch = config.n_chains
    per = [config.n_samples // nch + (1 if c < config.n_samples % nch else 0) for c in range(nch)]
    seqs = np.random.SeedSequence(config.seed).spawn(nch)
    jobs = [(model, config, per[c], seqs[c], c, initial) for c in range(nch)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda a: _run_chain(*a), jobs))
    else:
        results = [_run_chain(*a) for a in jobs]

    R = np.concatenate([r[0] for r in results])
    P = np.concatenate([r[1] for r in results])
    psi = np.concatenate([r[2] for r in results])
    chains = [r[3] for r in results]
    warnings = []
    lo, hi = ACCEPTANCE_BOUNDS
    for st in chains:
        for kind in ("accept_classical", "accept_quantum"):
            a = st[kind]
            if math.isfinite(a) and not lo <= a <= hi:
                warnings.append(f"chain {st['chain']}: {kind} = {a:.3f} outside [{lo}, {hi}]")
    for w in warnings:
        log.warning(w)
    meta = {
        "seed": config.seed,
        "n_chains": nch,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "beta": config.beta,
        "chain_lengths": per,
        "chains": chains,
        "warnings": warnings,
    }
    return Ensemble(R, P, psi, np.ones(R.shape[0]), chart=model.chart, meta=meta)


# --------------------------------------------------------------------------
# averages
# --------------------------------------------------------------------------


def batch_means(values: np.ndarray, weights: Optional[np.ndarray] = None, n_batches: int = 20):
    """Weighted mean and batch-means standard error of a sample sequence."""
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if v.size == 0:
        raise ValueError("empty sample")
    mean = float(np.sum(w * v) / np.sum(w))
    nb = min(n_batches, v.size)
    if nb < 2:
        return mean, float("nan"), float(v.size)
    idx = np.array_split(np.arange(v.size), nb)
    bw = np.array([w[i].sum() for i in idx])
    bm = np.array([np.sum(w[i] * v[i]) / w[i].sum() if w[i].sum() > 0 else mean for i in idx])
    # batches carry equal weight for uniform samples
    var_b = np.sum(bw * (bm - mean) ** 2) / np.sum(bw) * nb / (nb - 1)
    se = math.sqrt(var_b / nb)
    var = float(np.sum(w * (v - mean) ** 2) / np.sum(w))
    n_eff = var / se**2 if se > 0 else float(v.size)
    return mean, se, n_eff


def ensemble_average(observable: ObservableFn, ensemble: Ensemble, n_batches: int = 20, with_n_eff: bool = False):
    """``(mean, stdError)`` of an observable over the ensemble.

    Only phase-invariant observables have a meaning on the sphere; others
    are rejected.
    """
    if not observable.phase_invariant:
        raise ValueError(f"observable {observable.name!r} is not phase invariant")
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    vals = observable.values(ensemble.flat(), ensemble.n_classical)
    mean, se, n_eff = batch_means(vals, ensemble.weights, max(n_batches, 20))
    return (mean, se, n_eff) if with_n_eff else (mean, se)


# --------------------------------------------------------------------------
# equilibrium checks
# --------------------------------------------------------------------------


@dataclass
class StationarityReport:
    times: np.ndarray
    names: list
    means: np.ndarray  # (n_times, n_obs)
    std_errors: np.ndarray
    z_scores: np.ndarray  # (n_times, n_obs), first row zero
    n_members: int
    n_excluded: int
    threshold: float = 3.0

    @property
    def max_abs_z(self) -> np.ndarray:
        return np.max(np.abs(self.z_scores), axis=0)

    @property
    def stationary(self) -> bool:
        return bool(np.all(self.max_abs_z <= self.threshold))


def _z(diff, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / se
    return np.where(se > 0, z, np.where(np.abs(diff) > 1e-14, np.inf, 0.0))


def liouville_stationarity_test(
    model: EhrenfestModel,
    ensemble: Ensemble,
    dt: float,
    n_steps: int,
    observables: Sequence[ObservableFn],
    hbar: float = 1.0,
    n_checkpoints: int = 5,
    threshold: float = 3.0,
) -> StationarityReport:
    """Propagate every member with the splitting integrator and compare averages.

    At each checkpoint the z-score of ``mean(t) - mean(0)`` uses the combined
    error ``sqrt(se(0)^2 + se(t)^2)``.  Members that blow up are excluded from
    all averages and counted.
    """
    if n_steps < 1 or n_checkpoints < 1:
        raise ValueError("n_steps and n_checkpoints must be >= 1")
    marks = np.unique(np.linspace(0, n_steps, n_checkpoints + 1).round().astype(int))
    R, P, psi = ensemble.R.copy(), ensemble.P.copy(), ensemble.psi.copy()
    snaps = []
    done = 0
    for m in marks:
        for _ in range(m - done):
            R, P, psi = strang_arrays(model, R, P, psi, dt, hbar)
        done = m
        snaps.append((R.copy(), P.copy(), psi.copy()))
    ok = np.ones(len(ensemble), dtype=bool)
    for R_, P_, psi_ in snaps:
        ok &= np.all(np.isfinite(R_), axis=1) & np.all(np.isfinite(P_), axis=1) & np.all(np.isfinite(psi_), axis=1)
    w = ensemble.weights[ok]
    nc = ensemble.n_classical
    means = np.empty((marks.size, len(observables)))
    ses = np.empty_like(means)
    for i, (R_, P_, psi_) in enumerate(snaps):
        Y = np.concatenate([R_[ok], P_[ok], psi_[ok].real, psi_[ok].imag], axis=1)
        for j, obs in enumerate(observables):
            means[i, j], ses[i, j], _ = batch_means(obs.values(Y, nc), w)
    z = _z(means - means[0], np.sqrt(ses**2 + ses[0] ** 2))
    return StationarityReport(
        times=marks * dt,
        names=[o.name for o in observables],
        means=means,
        std_errors=ses,
        z_scores=z,
        n_members=int(ok.sum()),
        n_excluded=int((~ok).sum()),
        threshold=threshold,
    )


@dataclass
class VolumeReport:
    initial_area: float
    final_area: float
    max_relative_deviation: float

    @property
    def ratio(self) -> float:
        return self.final_area / self.initial_area


def _triangle_area(R, P):
    return 0.5 * ((R[1] - R[0]) * (P[2] - P[0]) - (R[2] - R[0]) * (P[1] - P[0]))


def classical_volume_preservation_test(
    model: EhrenfestModel,
    cloud: Sequence[EhrenfestState],
    dt: float,
    n_steps: int,
    freeze_quantum: bool = False,
    hbar: float = 1.0,
) -> VolumeReport:
    """Track the signed area of a triangle of states in the ``(R_1, P_1)`` plane.

    With ``freeze_quantum`` the quantum state is held fixed, so the classical
    block evolves under the Hamiltonian ``f_H(., psi)`` alone.
    """
    if len(cloud) != 3:
        raise ValueError("cloud must hold the three vertices of a triangle")
    R = np.array([s.classical.R for s in cloud])
    P = np.array([s.classical.P for s in cloud])
    psi = np.array([s.psi for s in cloud])
    a0 = _triangle_area(R[:, 0], P[:, 0])
    scale = np.ptp(R[:, 0]) * np.ptp(P[:, 0])
    if scale == 0 or abs(a0) <= 1e-12 * scale:
        raise ValueError("degenerate simplex: vertices are collinear")
    worst = 0.0
    for _ in range(n_steps):
        R, P, psi = strang_arrays(model, R, P, psi, dt, hbar, freeze_quantum=freeze_quantum)
        worst = max(worst, abs(_triangle_area(R[:, 0], P[:, 0]) / a0 - 1.0))
    return VolumeReport(float(a0), float(_triangle_area(R[:, 0], P[:, 0])), worst)
