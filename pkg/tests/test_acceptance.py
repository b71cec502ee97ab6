"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run with ``pytest tests/test_acceptance.py -v``.  Each line reports the
measured value next to the tolerance it is judged against.
"""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from geoehrenfest import checks
from geoehrenfest import dynamics as d
from geoehrenfest import statmech as sm
from geoehrenfest import toymodel as tm

FIXTURES = Path(__file__).parent / "fixtures"
pytestmark = pytest.mark.slow

U_MEAN_ORACLE = (1 - 2 / math.e) / (1 - 1 / math.e)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return emit


def test_bracket_algebra(report):
    results = [
        checks.check_bracket_algebra(n_trials=200, tol=1e-12),
        checks.check_jacobi(tol=1e-10),
        checks.check_leibniz(tol=1e-10),
        checks.check_basis_independence(n_trials=50, tol=1e-12),
    ]
    detail = "; ".join(f"{r.name} {r.residual:.2e} <= {r.tol:.0e}" for r in results)
    assert report("bracket algebra", all(r.passed for r in results), detail)


def test_norm_and_energy_conservation(report):
    tr = tm.propagate_toy(tm.default_initial(), tm.ToyParams(0.8), 1e-3, 1_000_000, record_every=1)
    norm_dev = float(np.max(np.abs(tr.norm - 0.5)))
    drift = tr.energy_drift()
    ok = tr.ok and tr.times[-1] == pytest.approx(1000.0) and norm_dev <= 1e-12 and drift <= 1e-6
    assert report(
        "norm and energy conservation",
        ok,
        f"max |f_I - 1/2| {norm_dev:.2e} <= 1e-12; energy drift {drift:.2e} <= 1e-6 over t = {tr.times[-1]:g}",
    )


def test_section_fill_ratio(report):
    init = tm.default_initial()
    t0 = time.perf_counter()
    strong = tm.poincare_section(init, tm.ToyParams(0.8), 30_000, "canonical")
    wall = time.perf_counter() - t0
    weak = tm.poincare_section(init, tm.ToyParams(0.01), 30_000, "canonical")
    f_strong, f_weak = tm.fill_fraction(strong), tm.fill_fraction(weak)
    ratio = f_strong / f_weak

    fixture = np.loadtxt(FIXTURES / "section_scatter.csv", delimiter=",", skiprows=1)
    assert fixture.shape == (30_000, 3)
    # a chaotic orbit decorrelates from rounding, so only the early records are pinned
    head = 500
    dev = float(np.max(np.abs(fixture[:head, 1:] - np.column_stack([strong.phi, strong.I_phi])[:head])))
    f_fix = tm.fill_fraction([tm.PoincareRecord(int(n), phi, I) for n, phi, I in fixture])

    ok = (
        len(strong) == len(weak) == 30_000
        and ratio >= 5
        and wall <= 60
        and dev <= 1e-8
        and abs(f_fix - f_strong) <= 0.01
    )
    assert report(
        "section fill ratio",
        ok,
        f"fill {f_strong:.4f} / {f_weak:.4f} = {ratio:.1f} >= 5; runtime {wall:.1f} s <= 60 s; "
        f"fixture head dev {dev:.1e} <= 1e-8; fixture fill {f_fix:.4f}",
    )


def test_constant_offset(report):
    rng = np.random.default_rng(2024)
    n = 1_000_000
    theta = rng.uniform(0, 2 * np.pi, n)
    I_theta = rng.exponential(1.0, n)
    z = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
    z /= np.linalg.norm(z, axis=1)[:, None]
    eps = rng.uniform(0, 2, n)
    worst = float(np.max(np.abs(tm.quantum_form_energy(theta, I_theta, z, eps) - tm.toy_energy(theta, I_theta, z, eps) + 0.5)))
    assert report("constant offset", worst <= 1e-13, f"max residual {worst:.2e} <= 1e-13 over {n} states")


def test_sampling_oracles(report):
    model = tm.toy_model(tm.ToyParams(0.0))
    ens = sm.metropolis_canonical(model, sm.SamplerConfig(beta=1.0, n_samples=100_000, burn_in=2000, seed=1))
    mI, seI = sm.ensemble_average(tm.action_observable(), ens)
    mu, seu = sm.ensemble_average(tm.population_observable(), ens)
    hot = sm.metropolis_canonical(
        tm.toy_model(tm.ToyParams(0.8)), sm.SamplerConfig(beta=1e-6, n_samples=20_000, burn_in=2000, thin=5, seed=2)
    )
    p_ks = stats.kstest(np.abs(hot.psi[:, 0]) ** 2, "uniform").pvalue
    zI, zu = abs(mI - 1.0) / seI, abs(mu - U_MEAN_ORACLE) / seu
    ok = len(ens) >= 100_000 and zI <= 3 and zu <= 3 and p_ks > 0.01
    assert report(
        "canonical sampling oracles",
        ok,
        f"<I_theta> {mI:.4f} +- {seI:.4f} (|z| {zI:.2f} <= 3); <I_phi^2> {mu:.4f} +- {seu:.4f} vs {U_MEAN_ORACLE:.4f} "
        f"(|z| {zu:.2f} <= 3); KS p at beta 1e-6 {p_ks:.3f} > 0.01",
    )


def _stationarity_observables():
    return [tm.sigma_z_observable(), tm.population_observable(), tm.cos_phi_observable()]


@pytest.mark.xfail(
    strict=True,
    reason="the canonical density restricted to I_theta >= 0 is not invariant under the toy flow",
)
def test_liouville_stationarity(report):
    model = tm.toy_model(tm.ToyParams(0.8))
    ens = sm.metropolis_canonical(model, sm.SamplerConfig(beta=1.0, n_samples=10_000, burn_in=2000, thin=10, seed=1))
    rep = sm.liouville_stationarity_test(model, ens, 0.01, 5000, _stationarity_observables())

    delta = sm.Ensemble.from_states([tm.default_initial().to_ehrenfest()] * 200)
    neg = sm.liouville_stationarity_test(model, delta, 0.01, 5000, _stationarity_observables())

    worst = dict(zip(rep.names, np.max(np.abs(rep.z_scores), axis=0).round(1).tolist()))
    ok = len(ens) >= 10_000 and rep.stationary and not neg.stationary
    assert report(
        "Liouville stationarity",
        ok,
        f"{rep.n_members} members to t = {rep.times[-1]:g}: max |z| {worst} (<= 3); "
        f"delta control stationary={neg.stationary} (expected False)",
    )


def test_integrator_cross_validation(report):
    model = d.spin_oscillator()
    s0 = d.EhrenfestState.from_arrays([1.0], [0.0], np.array([1.0, 0.0], complex))

    def final(dt, method):
        n = int(round(10.0 / dt))
        tr = d.propagate(model, s0, dt, n, method, record_every=n)
        return np.concatenate([tr.R[-1], tr.P[-1], tr.psi[-1].real, tr.psi[-1].imag])

    ref = final(1e-3, "rk4")
    gap = float(np.max(np.abs(final(1e-3, "strang") - ref)))
    errs = [float(np.max(np.abs(final(dt, "rk4") - ref))) for dt in (0.1, 0.05, 0.025)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = gap <= 1e-6 and all(abs(r - 16) <= 2 for r in ratios)
    assert report(
        "integrator cross-validation",
        ok,
        f"|Strang - RK4| at t = 10 {gap:.2e} <= 1e-6; RK4 error ratios {ratios[0]:.2f}, {ratios[1]:.2f} (16 +- 2)",
    )


def _run(args, out):
    return subprocess.run(
        [sys.executable, "-m", "geoehrenfest.cli", *args, "--out", str(out)], capture_output=True, text=True
    ).returncode


def test_cli_determinism(report, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[model]\ntype = toy\nepsilon = 0.8\n"
        "[integrator]\nn_steps = 5000\nrecord_every = 50\n"
        "[poincare]\ncrossings = 300\n"
        "[sampler]\nn_samples = 4000\nburn_in = 500\nseed = 99\n"
        "[average]\nobservables = energy, sigma_z, I_phi2, cos_phi\n"
    )
    same = True
    codes = []
    for cmd in ("simulate", "poincare", "sample", "average"):
        outs = []
        for k, threads in enumerate(("1", "3")):
            out = tmp_path / f"{cmd}{k}"
            codes.append(_run([cmd, "--config", str(cfg), "--threads", threads], out))
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        same &= bool(outs[0]) and outs[0] == outs[1]
    ok = same and codes == [0] * len(codes)
    assert report("CLI determinism", ok, f"byte-identical outputs across repeats {same}; exit codes {sorted(set(codes))}")
