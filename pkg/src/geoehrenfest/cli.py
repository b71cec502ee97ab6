"""Command-line front end.

Runs are described by an INI file with typed sections; every key has a
default and unknown sections or keys are rejected.  A JSON summary written by
a previous run can also be passed as ``--config``: its embedded ``config``
block is read back, so any run can be repeated from its own output.

Exit status: 0 success, 1 invalid input, 2 numerical failure, 3 soft warning.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, dynamics, statmech, toymodel
from .geometry import NonHermitianError, identity_observable

log = logging.getLogger("geoehrenfest")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_WARNING = 0, 1, 2, 3

MODELS = ("toy", "spin-oscillator", "matrix-file")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration schema
# --------------------------------------------------------------------------


def _pos(v):
    return math.isfinite(v) and v > 0


def _nonneg(v):
    return math.isfinite(v) and v >= 0


def _finite(v):
    return math.isfinite(v)


# section -> key -> (type, default, check, description of the check)
SCHEMA = {
    "model": {
        "type": (str, "toy", lambda v: v in MODELS, f"one of {MODELS}"),
        "epsilon": (float, 0.8, _nonneg, "finite and >= 0"),
        "mass": (float, 1.0, _pos, "positive"),
        "omega": (float, 1.0, _pos, "positive"),
        "coupling": (float, 0.2, _finite, "finite"),
        "matrix_file": (str, "", None, ""),
    },
    "integrator": {
        "method": (str, "strang", lambda v: v in dynamics.INTEGRATORS, f"one of {sorted(dynamics.INTEGRATORS)}"),
        "dt": (float, 1e-3, _pos, "positive"),
        "n_steps": (int, 10_000, lambda v: v >= 1, ">= 1"),
        "record_every": (int, 10, lambda v: v >= 1, ">= 1"),
        "hbar": (float, 1.0, _pos, "positive"),
    },
    "initial": {
        "theta": (float, toymodel.DEFAULT_INITIAL["theta"], _finite, "finite"),
        "I_theta": (float, toymodel.DEFAULT_INITIAL["I_theta"], _nonneg, ">= 0"),
        "I_phi": (float, toymodel.DEFAULT_INITIAL["I_phi"], lambda v: 0 <= v <= 1, "in [0, 1]"),
        "phi": (float, toymodel.DEFAULT_INITIAL["phi"], _finite, "finite"),
        "R": (list, [1.0], None, ""),
        "P": (list, [0.0], None, ""),
        "psi_re": (list, [1.0, 0.0], None, ""),
        "psi_im": (list, [0.0, 0.0], None, ""),
    },
    "poincare": {
        "crossings": (int, 30_000, lambda v: v >= 1, ">= 1"),
        "flow": (str, "canonical", lambda v: v in toymodel.FLOWS, f"one of {toymodel.FLOWS}"),
        "steps_per_period": (int, 500, lambda v: v >= 1, ">= 1"),
        "grid_x": (int, 100, lambda v: v >= 2, ">= 2"),
        "grid_y": (int, 100, lambda v: v >= 2, ">= 2"),
    },
    "sampler": {
        "beta": (float, 1.0, _pos, "positive"),
        "n_samples": (int, 100_000, lambda v: v >= 1, ">= 1"),
        "burn_in": (int, 2000, lambda v: v >= 0, ">= 0"),
        "thin": (int, 1, lambda v: v >= 1, ">= 1"),
        "classical_step_scale": (float, 1.5, _pos, "positive"),
        "quantum_rotation_scale": (float, 1.0, _pos, "positive"),
        "seed": (int, 0, lambda v: 0 <= v < 2**64, "in [0, 2^64)"),
        "n_chains": (int, 4, lambda v: v >= 1, ">= 1"),
    },
    "average": {
        "observables": (list, ["energy"], None, ""),
        "n_batches": (int, 20, lambda v: v >= 20, ">= 20"),
    },
}


def default_config() -> dict:
    return {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line number of a section header or of a key inside it."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            if k == key:
                return i
    return None


def _where(path, text, section, key=None) -> str:
    line = _line_of(text, section, key) if text else None
    loc = f"{path}:{line}" if line else str(path)
    return f"{loc}: [{section}]" + (f" {key}" if key else "")


def _coerce(kind, raw, where):
    try:
        if kind is list:
            if isinstance(raw, list):
                return raw
            return [s.strip() for s in str(raw).split(",") if s.strip()]
        if kind is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError
            return int(raw)
        if kind is float:
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def resolve(raw: dict, path="<config>", text: str = "") -> dict:
    """Validate a section/key mapping against the schema and fill defaults."""
    cfg = default_config()
    for sec, keys in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{_where(path, text, sec)}: unknown section (known: {', '.join(SCHEMA)})")
        for key, value in keys.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{_where(path, text, sec, key)}: unknown key (known: {', '.join(SCHEMA[sec])})")
            kind, _, check, desc = SCHEMA[sec][key]
            where = _where(path, text, sec, key)
            v = _coerce(kind, value, where)
            if check is not None and not check(v):
                raise ConfigError(f"{where}: value {v!r} must be {desc}")
            cfg[sec][key] = v
    # list entries
    for key in ("R", "P", "psi_re", "psi_im"):
        cfg["initial"][key] = [_coerce(float, x, _where(path, text, "initial", key)) for x in cfg["initial"][key]]
    cfg["average"]["observables"] = [str(x) for x in cfg["average"]["observables"]]
    return cfg


def load_config(path) -> dict:
    if path is None:
        return default_config()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict) or not isinstance(data.get("config"), dict):
            raise ConfigError(f"{path}: JSON config must hold a 'config' object")
        return resolve(data["config"], path)
    # keys are case sensitive (I_theta vs i_theta)
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    raw = {sec: dict(parser[sec]) for sec in parser.sections()}
    return resolve(raw, path, text)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def _complex_matrix(obj, what):
    if isinstance(obj, dict):
        if set(obj) - {"re", "im"} or "re" not in obj:
            raise ConfigError(f"{what}: expected keys 're' and optional 'im'")
        re_ = np.asarray(obj["re"], dtype=float)
        im_ = np.asarray(obj.get("im", np.zeros_like(re_)), dtype=float)
        return re_ + 1j * im_
    return np.asarray(obj, dtype=float).astype(complex)


def load_matrix_model(path) -> dynamics.EhrenfestModel:
    """Model ``H_e(R) = H0 + sum_J R_J V_J`` from a JSON file.

    Expected keys: ``h0``, ``couplings`` (list), ``masses`` and optionally
    ``omegas``.  Matrices are nested lists or ``{"re": ..., "im": ...}``.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    unknown = set(data) - {"h0", "couplings", "masses", "omegas"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("h0", "couplings", "masses"):
        if key not in data:
            raise ConfigError(f"{path}: missing key {key!r}")
    h0 = _complex_matrix(data["h0"], f"{path}: h0")
    couplings = [_complex_matrix(v, f"{path}: couplings[{j}]") for j, v in enumerate(data["couplings"])]
    try:
        return dynamics.linear_coupling_model(h0, couplings, data["masses"], data.get("omegas"), name=path.stem)
    except NonHermitianError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_model(cfg: dict) -> dynamics.EhrenfestModel:
    m = cfg["model"]
    if m["type"] == "toy":
        return toymodel.toy_model(toymodel.ToyParams(m["epsilon"]))
    if m["type"] == "spin-oscillator":
        return dynamics.spin_oscillator(m["mass"], m["omega"], m["coupling"])
    if not m["matrix_file"]:
        raise ConfigError("[model] matrix_file: required for type = matrix-file")
    return load_matrix_model(m["matrix_file"])


def build_initial(cfg: dict, model: dynamics.EhrenfestModel):
    ini = cfg["initial"]
    if cfg["model"]["type"] == "toy":
        return toymodel.ToyState.from_variables(ini["theta"], ini["I_theta"], ini["I_phi"], ini["phi"])
    R, P = np.array(ini["R"]), np.array(ini["P"])
    psi = np.array(ini["psi_re"]) + 1j * np.array(ini["psi_im"])
    if R.size != model.n_classical or P.size != model.n_classical:
        raise ConfigError(f"[initial] R, P: need {model.n_classical} entries each")
    if psi.size != model.n_quantum:
        raise ConfigError(f"[initial] psi_re, psi_im: need {model.n_quantum} entries each")
    nrm = np.linalg.norm(psi)
    if not nrm > 0:
        raise ConfigError("[initial] psi_re, psi_im: quantum state is zero")
    return dynamics.EhrenfestState.from_arrays(R, P, psi / nrm, chart=model.chart)


def sampler_config(cfg: dict) -> statmech.SamplerConfig:
    s = cfg["sampler"]
    return statmech.SamplerConfig(
        beta=s["beta"],
        n_samples=s["n_samples"],
        burn_in=s["burn_in"],
        thin=s["thin"],
        classical_step_scale=s["classical_step_scale"],
        quantum_rotation_scale=s["quantum_rotation_scale"],
        seed=s["seed"],
        n_chains=s["n_chains"],
    )


def observable_table(model: dynamics.EhrenfestModel) -> dict:
    table = {
        "energy": dynamics.hamiltonian_function(model),
        "one": identity_observable(model.n_quantum) * 2.0,
        "P1": toymodel.action_observable(),
    }
    if model.n_quantum == 2:
        table.update(
            sigma_z=toymodel.sigma_z_observable(),
            population=toymodel.population_observable(),
            cos_phi=toymodel.cos_phi_observable(),
        )
    if model.action_angle:
        table.update(I_theta=table["P1"], I_phi2=table["population"])
    return table


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, (int, np.integer)) else _fmt(x) for x in row])


def write_ensemble(path: Path, ens: statmech.Ensemble) -> None:
    nc, nq = ens.n_classical, ens.psi.shape[1]
    header = (
        [f"R{j + 1}" for j in range(nc)]
        + [f"P{j + 1}" for j in range(nc)]
        + [f"q{k + 1}" for k in range(nq)]
        + [f"p{k + 1}" for k in range(nq)]
        + ["weight"]
    )
    write_csv(path, header, np.column_stack([ens.flat(), ens.weights]))


def read_ensemble(path, chart: str = "darboux") -> statmech.Ensemble:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: no ensemble members")
    header = rows[0]
    nc = sum(1 for h in header if h.startswith("R"))
    nq = sum(1 for h in header if h.startswith("q"))
    if header[-1] != "weight" or len(header) != 2 * nc + 2 * nq + 1:
        raise ConfigError(f"{path}:1: unexpected header {header}")
    try:
        data = np.array(rows[1:], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    psi = data[:, 2 * nc : 2 * nc + nq] + 1j * data[:, 2 * nc + nq : 2 * nc + 2 * nq]
    return statmech.Ensemble(data[:, :nc], data[:, nc : 2 * nc], psi, data[:, -1], chart=chart)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(cfg, args) -> int:
    model = build_model(cfg)
    init = build_initial(cfg, model)
    it = cfg["integrator"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if cfg["model"]["type"] == "toy" and it["method"] == "strang" and it["hbar"] == 1.0:
        traj = toymodel.propagate_toy(
            init, toymodel.ToyParams(cfg["model"]["epsilon"]), it["dt"], it["n_steps"], it["record_every"]
        )
    else:
        state = init.to_ehrenfest() if isinstance(init, toymodel.ToyState) else init
        traj = dynamics.propagate(
            model, state, it["dt"], it["n_steps"], it["method"], it["hbar"], it["record_every"]
        )
    wall = time.perf_counter() - t0
    traj.to_csv(out / "trajectory.csv")
    summary = {
        "config": cfg,
        "energy_drift": traj.energy_drift(),
        "norm_drift": traj.norm_drift(),
        "max_norm_deviation": float(np.max(np.abs(traj.norm - 0.5))),
        "n_records": len(traj),
        "final_time": float(traj.times[-1]),
        "error": traj.error,
    }
    _timing(summary, wall, args)
    write_json(out / "simulate.json", summary)
    if not traj.ok:
        print(f"numerical failure: {traj.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_poincare(cfg, args) -> int:
    if cfg["model"]["type"] != "toy":
        raise ConfigError("[model] type: the Poincare section is defined only for the toy model")
    ini = cfg["initial"]
    pc = cfg["poincare"]
    init = toymodel.ToyState.from_variables(ini["theta"], ini["I_theta"], ini["I_phi"], ini["phi"])
    t0 = time.perf_counter()
    sec = toymodel.poincare_section(
        init, toymodel.ToyParams(cfg["model"]["epsilon"]), pc["crossings"], pc["flow"], pc["steps_per_period"]
    )
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "poincare.csv", ["n", "phi", "I_phi"], zip(sec.n.tolist(), sec.phi, sec.I_phi))
    summary = {
        "config": cfg,
        "fill_fraction": toymodel.fill_fraction(sec, pc["grid_x"], pc["grid_y"]),
        "energy_drift": sec.energy_drift(),
        "crossings": len(sec),
        "error": sec.error,
    }
    _timing(summary, wall, args)
    write_json(out / "poincare.json", summary)
    if sec.error:
        print(f"numerical failure: {sec.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _sample(cfg, args):
    model = build_model(cfg)
    t0 = time.perf_counter()
    ens = statmech.metropolis_canonical(model, sampler_config(cfg), threads=args.threads)
    return model, ens, time.perf_counter() - t0


def cmd_sample(cfg, args) -> int:
    model, ens, wall = _sample(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ensemble(out / "ensemble.csv", ens)
    summary = {"config": cfg, "n_members": len(ens), "sampler": ens.meta}
    _timing(summary, wall, args)
    write_json(out / "sample.json", summary)
    return _warn_status(ens.meta.get("warnings", []))


def cmd_average(cfg, args) -> int:
    table_model = build_model(cfg)
    table = observable_table(table_model)
    names = cfg["average"]["observables"]
    for name in names:
        if name not in table:
            raise ConfigError(f"[average] observables: unknown observable {name!r} (known: {', '.join(sorted(table))})")
    t0 = time.perf_counter()
    if args.ensemble:
        ens = read_ensemble(args.ensemble, chart=table_model.chart)
        warnings = []
    else:
        _, ens, _ = _sample(cfg, args)
        warnings = ens.meta.get("warnings", [])
    rows = []
    for name in names:
        mean, se, n_eff = statmech.ensemble_average(table[name], ens, cfg["average"]["n_batches"], with_n_eff=True)
        rows.append({"observable": name, "mean": mean, "stdError": se, "nEff": n_eff})
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "config": cfg,
        "seed": cfg["sampler"]["seed"],
        "ensemble": str(args.ensemble) if args.ensemble else None,
        "n_members": len(ens),
        "averages": rows,
        "warnings": warnings,
    }
    _timing(summary, wall, args)
    write_json(out / "average.json", summary)
    for r in rows:
        print(f"{r['observable']:<12s} {r['mean']: .8f} +- {r['stdError']:.2e}  (nEff {r['nEff']:.0f})")
    return _warn_status(warnings)


def cmd_check(cfg, args) -> int:
    hbar = cfg["integrator"]["hbar"]
    results = checks.run_all(hbar=hbar)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(
            out / "check.json",
            {
                "config": cfg,
                "results": [
                    {"name": r.name, "residual": r.residual, "tol": r.tol, "passed": r.passed} for r in results
                ],
            },
        )
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _timing(summary, wall, args):
    # wall time breaks byte-for-byte reproducibility, so it is opt-in
    log.info("wall time %.3f s", wall)
    if args.timing:
        summary["wall_time_s"] = wall


def _warn_status(warnings) -> int:
    # the sampler already logs each warning
    return EXIT_WARNING if warnings else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "poincare": cmd_poincare,
    "sample": cmd_sample,
    "average": cmd_average,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geoehrenfest", description="Geometric Ehrenfest dynamics and statistics.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file, or a JSON summary from an earlier run")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="override [sampler] seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent chains")
    common.add_argument("--timing", action="store_true", help="add wall time to the summary JSON")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="propagate one trajectory")
    sub.add_parser("poincare", parents=[common], help="stroboscopic section of the toy model")
    sub.add_parser("sample", parents=[common], help="canonical ensemble by Metropolis sampling")
    p = sub.add_parser("average", parents=[common], help="ensemble averages with batch-means errors")
    p.add_argument("--ensemble", help="read members from a sample CSV instead of sampling")
    p = sub.add_parser("check", parents=[common], help="run the invariant suite")
    p.set_defaults(out=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = resolve({**cfg, "sampler": {**cfg["sampler"], "seed": args.seed}}, "--seed")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, NonHermitianError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, np.linalg.LinAlgError, dynamics.PropagationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
