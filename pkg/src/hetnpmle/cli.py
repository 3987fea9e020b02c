"""Command-line interface: ``fit``, ``denoise``, ``certify``, ``evaluate``, ``simulate``.

Every numeric flag can also be set through an environment variable named
``HETNPMLE_<FLAG>`` (e.g. ``HETNPMLE_MAX_ITERS``); explicit flags win.

Exit codes: 0 success, 1 parse/validation error, 2 grid too large,
3 solver did not converge (the model is still written), 4 certification failed.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import warnings
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from . import io
from .ebayes import RegularizationPolicy, posterior_means
from .estimator import NPMLE
from .exceptions import GridTooLarge, NonConvergence, NPMLEError
from .kernels import kernel_matrix
from .metrics import avg_hellinger_sq, loglik_gap, wasserstein2
from .model import MixingMeasure
from .sim import ExperimentConfig, PointMass, aggregate, run_w2_trend, simulate_once
from .solver import SolverConfig, log_likelihood_floor
from .support import DEFAULT_GRID_CAP, Region, build_grid, delta_upper_limit, discretization_bound

logger = logging.getLogger("hetnpmle")

ENV_PREFIX = "HETNPMLE_"
EXIT_OK, EXIT_INPUT, EXIT_GRID, EXIT_NONCONVERGENCE, EXIT_CERTIFY = 0, 1, 2, 3, 4

# certification slack for recomputation round-off
_IDENTITY_TOL = 1e-10
_FITTED_RTOL = 1e-9
_GAP_SLACK = 1e-12


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _env(name, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"invalid value for {ENV_PREFIX}{name.upper()}: {raw!r}")


def _delta(value):
    return value if value == "auto" else float(value)


def _optional_float(value):
    return None if value in (None, "", "none") else float(value)


def _add_fit_flags(p):
    p.add_argument("--region", choices=["auto", "hull", "bbox", "ball"], default=_env("region", "auto"))
    p.add_argument("--delta", type=_delta, default=_env("delta", "auto", _delta),
                   help="grid resolution or 'auto'")
    p.add_argument("--solver", choices=["em", "fw", "frank_wolfe", "newton", "proj_newton"],
                   default=_env("solver", "newton"))
    p.add_argument("--tol", type=float, default=_env("tol", 1e-6, float), help="dual-gap tolerance")
    p.add_argument("--max-iters", type=int, default=_env("max_iters", 10_000, int))
    p.add_argument("--prune", type=float, default=_env("prune", 1e-10, float))
    p.add_argument("--grid-cap", type=int, default=_env("grid_cap", int(DEFAULT_GRID_CAP), int))


def _add_common(p):
    p.add_argument("--seed", type=int, default=_env("seed", 0, int))
    p.add_argument("--threads", type=int, default=_env("threads", 1, int))
    p.add_argument("--rho", type=_optional_float, default=_env("rho", None, _optional_float))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetnpmle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the NPMLE and write a JSON model")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _add_fit_flags(p)
    _add_common(p)

    p = sub.add_parser("denoise", help="posterior means for each input row")
    p.add_argument("input")
    p.add_argument("model")
    p.add_argument("-o", "--output", help="CSV path (stdout if omitted)")
    _add_common(p)

    p = sub.add_parser("certify", help="recheck a model's optimality certificate")
    p.add_argument("model")
    p.add_argument("input")

    p = sub.add_parser("evaluate", help="compare two fitted models")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--input", help="observations for likelihood and Hellinger comparisons")
    p.add_argument("--samples", type=int, default=_env("samples", 100_000, int))
    p.add_argument("-o", "--output")
    _add_common(p)

    p = sub.add_parser("simulate", help="run a synthetic experiment")
    p.add_argument("--design", choices=["circle", "discrete", "pointmass"], default="circle")
    p.add_argument("--n", default="1000", help="sample size, or comma list for the pointmass W2 trend")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--noise", default="0.5,0.75", help="low,high range of diagonal variances")
    p.add_argument("--csv-dir", help="directory for plot-ready CSV files")
    p.add_argument("-o", "--output", help="report JSON path (stdout if omitted)")
    _add_fit_flags(p)
    p.set_defaults(delta=_env("delta", 0.1, _delta))
    _add_common(p)
    return parser


# ------------------------------------------------------------------ model files

def model_document(est: NPMLE, table: io.Table, args) -> dict:
    cert = est.certificate_
    cfg = est._config()
    return {
        "schema_version": io.SCHEMA_VERSION,
        "dim": est.n_features_in_,
        "n": est.n_fit_,
        "atoms": est.measure_.atoms,
        "weights": est.measure_.weights,
        "loglik": cert.loglik,
        "dual_gap": cert.dual_gap,
        "converged": cert.converged,
        "iterations": cert.iters,
        "fitted_L": cert.fitted_L,
        "region": est.region_.to_dict(),
        "delta": est.delta_,
        "delta_coarsened": est.delta_coarsened_,
        "grid_atoms": est.grid_.m,
        "grid_cap": int(est.grid_cap),
        "solver": asdict(cfg),
        "k_lower": est.k_lower_,
        "k_upper": est.k_upper_,
        "diameter": est.region_.diameter,
        "provenance": {
            "input_sha256": table.sha256,
            "covariance_encoding": table.encoding,
            "seed": args.seed,
            "tool_version": tool_version(),
        },
    }


def _measure(doc) -> MixingMeasure:
    return MixingMeasure(np.asarray(doc["atoms"], dtype=float), np.asarray(doc["weights"], dtype=float))


def _load_model(path):
    return io.validate_model(io.read_json(path))


def _check_dim(doc, table):
    if int(doc["dim"]) != table.data.dim:
        raise io.InputError(f"model has dimension {doc['dim']}, input has {table.data.dim}")


# ------------------------------------------------------------------ commands

def cmd_fit(args) -> int:
    table = io.read_table(args.input)
    est = NPMLE(region=args.region, delta=args.delta, solver=args.solver, tol=args.tol, max_iters=args.max_iters,
                prune_tol=args.prune, grid_cap=args.grid_cap, rho=args.rho, n_jobs=args.threads)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        est.fit(table.data)
    io.write_json(args.output, model_document(est, table, args))
    cert = est.certificate_
    print(f"loglik {io.fmt(cert.loglik)} dual_gap {cert.dual_gap:.3e} atoms {est.measure_.n_atoms} "
          f"grid {est.grid_.m} delta {est.delta_:.6g}")
    if not cert.converged:
        print(f"solver did not reach dual gap {args.tol:g} in {cert.iters} iterations", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_denoise(args) -> int:
    table = io.read_table(args.input)
    doc = _load_model(args.model)
    _check_dim(doc, table)
    G = _measure(doc)
    data = table.data
    p = data.dim
    rho = args.rho if args.rho is not None else RegularizationPolicy.default(int(doc.get("n", data.n)), p).rho
    means, R, used, _ = posterior_means(data, G, RegularizationPolicy(rho), n_jobs=args.threads)
    header = table.header + [f"thetahat_{k + 1}" for k in range(p)] + ["max_responsibility", "used_regularization"]
    rows = []
    for i, rec in enumerate(table.rows):
        rows.append([rec.get(h, "") for h in table.header] + [float(v) for v in means[i]]
                    + [float(R[i].max()), "true" if used[i] else "false"])
    if args.output:
        io.write_csv(args.output, header, rows)
    else:
        import csv

        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([io.fmt(v) if isinstance(v, float) else v for v in row])
    return EXIT_OK


def certify_model(doc: dict, data) -> list[tuple[str, bool | None, str]]:
    """Recompute the certificate of a model file on its data.

    Returns ``(check, passed, detail)`` triples; ``passed`` is ``None`` for
    checks that do not apply.
    """
    G = _measure(doc)
    n, p = data.n, data.dim
    K = kernel_matrix(data, G.atoms)
    Ls = K.scaled
    f = Ls @ G.weights
    logL = np.log(f) + K.row_max
    stored = np.asarray(doc["fitted_L"], dtype=float)
    checks = []

    if stored.shape != logL.shape:
        checks.append(("fitted_L", False, f"stored {stored.size} values for {n} rows"))
    else:
        err = float(np.max(np.abs(np.exp(logL) - stored) / stored))
        checks.append(("fitted_L", err <= _FITTED_RTOL, f"max relative error {err:.3e}"))

    # dual values on the model's own grid plus its atoms
    region = Region.from_dict(doc["region"])
    grid = build_grid(region, float(doc["delta"]), cap=int(doc.get("grid_cap", DEFAULT_GRID_CAP)), extra_atoms=G.atoms)
    inv = np.exp(-logL)
    gap = -math.inf
    for start in range(0, grid.m, 50_000):
        Kg = kernel_matrix(data, grid.atoms[start:start + 50_000])
        D = (np.exp(Kg.entries).T @ inv) / n - 1.0
        gap = max(gap, float(D.max()))
    tol = float(doc["solver"]["dual_gap_tol"])
    checks.append(("dual_gap", gap <= tol + _GAP_SLACK, f"max D = {gap:.3e}, tolerance {tol:.1e}"))

    D_atoms = (Ls.T @ (1.0 / f)) / n - 1.0
    ident = float(G.weights @ D_atoms)
    checks.append(("sum_w_D", abs(ident) <= _IDENTITY_TOL, f"sum_j w_j D_j = {ident:.3e}"))

    q = math.log1p(max(gap, 0.0))
    margin = float(np.min(logL - log_likelihood_floor(data, q)))
    checks.append(("likelihood_floor", margin >= 0, f"min log margin {margin:.3e} at q = {q:.3e}"))

    delta, kl, diam = float(doc["delta"]), data.k_lower, float(doc["diameter"])
    limit = delta_upper_limit(p, kl, diam) if diam > 0 else math.inf
    if delta < limit:
        bound = discretization_bound(p, kl, diam, delta) if diam > 0 else 0.0
        checks.append(("discretization_bound", True, f"grid loglik within {bound:.3e} of the continuum NPMLE"))
    else:
        checks.append(("discretization_bound", None, f"delta {delta:.3g} >= validity limit {limit:.3g}"))
    return checks


def cmd_certify(args) -> int:
    doc = _load_model(args.model)
    table = io.read_table(args.input)
    _check_dim(doc, table)
    checks = certify_model(doc, table.data)
    ok = True
    for name, passed, detail in checks:
        label = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        ok &= passed is not False
        print(f"{label} {name}: {detail}")
    return EXIT_OK if ok else EXIT_CERTIFY


def cmd_evaluate(args) -> int:
    a, b = _load_model(args.model_a), _load_model(args.model_b)
    G, H = _measure(a), _measure(b)
    report = {"w2": wasserstein2(G, H).distance}
    if args.input:
        data = io.read_table(args.input).data
        report["loglik_gap"] = loglik_gap(data, G, H)
        h = avg_hellinger_sq(G, H, data, n_samples=args.samples, seed=args.seed)
        report["hellinger_sq"] = h.value
        report["hellinger_sq_std_error"] = h.std_error
    _emit(report, args.output)
    return EXIT_OK


def _emit(report, path):
    if path:
        io.write_json(path, report)
    else:
        sys.stdout.write(io.dumps(report))


def _write_panels(result, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = result.data.dim
    cols = [f"x_{k + 1}" for k in range(p)]
    for name, arr in (("raw", result.data.X), ("truth", result.truth), ("denoised", result.eb_means),
                      ("oracle", result.oracle_means)):
        io.write_csv(d / f"{name}.csv", cols, [[float(v) for v in row] for row in arr])
    G = result.measure
    io.write_csv(d / "atoms.csv", [f"a_{k + 1}" for k in range(p)] + ["weight"],
                 [[float(v) for v in G.atoms[j]] + [float(G.weights[j])] for j in range(G.n_atoms)])


def cmd_simulate(args) -> int:
    ns = [int(v) for v in str(args.n).split(",") if v.strip()]
    low, high = (float(v) for v in args.noise.split(","))
    seeds = list(range(args.seed, args.seed + args.reps))
    if len(ns) > 1:
        if args.design != "pointmass":
            raise io.InputError("a list of sample sizes is only supported for the pointmass design")
        from .sim import NoiseSpec

        report = run_w2_trend(PointMass(np.zeros(args.p)), ns, seeds, noise=NoiseSpec((low, high)),
                              region=args.region, delta=args.delta, solver=args.solver, tol=args.tol)
        _emit(report, args.output)
        return EXIT_OK
    reports = []
    for s in seeds:
        cfg = ExperimentConfig(design=args.design, n=ns[0], seed=s, p=args.p, noise_low=low, noise_high=high,
                               region=args.region, delta=args.delta, solver=args.solver, tol=args.tol,
                               max_iters=args.max_iters, rho=args.rho, n_jobs=args.threads)
        result = simulate_once(cfg)
        if args.csv_dir and s == seeds[0]:
            _write_panels(result, args.csv_dir)
        reports.append(result.report)
    _emit(reports[0] if len(reports) == 1 else aggregate(reports), args.output)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "denoise": cmd_denoise, "certify": cmd_certify, "evaluate": cmd_evaluate,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except GridTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GRID
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (NPMLEError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
