"""Command-line interface.

Subcommands: ``solve``, ``verify``, ``residual``, ``diagnose`` and
``examples``.  Each writes ``report.json`` (plus measure and trend files)
to ``--out`` and exits with 0 when every checked condition holds, 2 when
some condition is violated and 1 on errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .coeff import check_H11, check_H12, check_H13
from .diagnostics import (ConfigurationError, RegularityConfig, coefficient_convergence,
                          mollification_convergence, projection_regularity, rate_band)
from .fixedpoint import PicardError, localized_solve, picard_solve
from .frozen import FrozenSolveError, ParticleMeasure, weak_residual
from .functions import Cutoff
from .lyapunov import (check_H32, check_integral, measure_family, ray_growth_proxy,
                       sweep_integral, sweep_pointwise, verify_moment_bound)
from .measure import (DiscreteMeasure, GridDensity, MeasureError, ProjectionWindow, atoms_of,
                      lyapunov_integral, moment)
from .problem import PRESET_NAMES, ProblemError, list_presets, load_preset, load_problem

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
LEMMAS = {"projection": "projection", "coefficients": "coefficients",
          "mollification": "mollification", "4.1": "projection", "4.2": "coefficients",
          "4.3": "mollification"}

log = logging.getLogger("kolmofix")


# --------------------------------------------------------------------------
# helpers

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if hasattr(obj, "to_dict"):
        return _clean(obj.to_dict())
    return obj


def write_report(out: Path, report: dict):
    out.mkdir(parents=True, exist_ok=True)
    body = {"schema_version": SCHEMA_VERSION, "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            **report}
    (out / "report.json").write_text(json.dumps(_clean(body), indent=2, sort_keys=True) + "\n")


def write_measure(out: Path, mu, stem="measure"):
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(mu, GridDensity):
        path = out / f"{stem}.json"
        path.write_text(mu.to_json())
    else:
        path = out / f"{stem}.csv"
        path.write_text(mu.to_csv())
    return path.name


def write_table(out: Path, name, rows):
    if not rows:
        return None
    out.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join("" if r.get(k) is None else repr(r.get(k)) for k in keys)
                                for r in rows]
    (out / name).write_text("\n".join(lines) + "\n")
    return name


def read_measure(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"measure file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        return GridDensity.from_json(text)
    return DiscreteMeasure.from_csv(text)


def resolve_seed(arg_seed, problem):
    if arg_seed is not None:
        return int(arg_seed)
    env = os.environ.get("KOLMOFIX_SEED")
    if env is not None and env.strip():
        return int(env)
    return problem.seed


def load(spec):
    """A problem from a file path or a preset name."""
    if spec in PRESET_NAMES and not Path(spec).is_file():
        return load_preset(spec)
    return load_problem(spec)


def summarize(mu, problem):
    """Moments and residual of a solution."""
    d = problem.dim
    out = {"mass": float(np.sum(atoms_of(mu)[1])),
           "mean": [moment(mu, 1, "component", i) for i in range(d)],
           "second_moment": [moment(mu, 2, "component", i) for i in range(d)],
           "abs_moment_1": moment(mu, 1, "abs"),
           "weak_residual": weak_residual(mu, problem.field)}
    if d >= 2:
        pts, w = atoms_of(mu)
        out["cross_moment_12"] = float(np.sum(w * pts[:, 0] * pts[:, 1]))
    if problem.V is not None:
        out["integral_V"] = lyapunov_integral(mu, problem.function(problem.V))
    if isinstance(mu, ParticleMeasure):
        out["std_error_second_moment"] = [mu.std_error(lambda X, i=i: X[:, i] ** 2)
                                          for i in range(d)]
        out["std_error_mean"] = [mu.std_error(lambda X, i=i: X[:, i]) for i in range(d)]
    return out


# --------------------------------------------------------------------------
# pipelines

def run_solve(problem, args, out: Path):
    seed = resolve_seed(args.seed, problem)
    backend = args.backend or problem.backend
    cfg = problem.picard_config(backend=backend, tol=args.tol, seed=seed)
    mu0 = problem.initial_measure(backend=backend, seed=seed)
    truncated = args.compensate is not None or bool(getattr(args, "truncate", None))
    if truncated:
        radii = args.truncate or problem.truncation
        if not radii:
            raise ProblemError("no truncation radii: pass --truncate or set truncation.n")
        rep = localized_solve(problem.field, problem.lyapunov_spec(), radii, cfg, mu0=mu0,
                              compensate=args.compensate or "origin-atom")
        ok = rep.status == "converged" and rep.assumptions["uniform_bound"]["passed"]
    else:
        rep = picard_solve(problem.field, mu0, cfg)
        ok = rep.status == "converged"
    mu = rep.measure
    result = {"command": "solve", "problem": problem.describe(), "seed": seed,
              "backend": backend, "tol": cfg.tol, "truncated": truncated,
              "solve": rep.to_dict(), "solution": summarize(mu, problem)}
    if problem.V is not None:
        mb = verify_moment_bound(mu, problem.function(problem.V), problem.C, problem.Lambda)
        result["moment_bound"] = mb.to_dict()
    result["measure_file"] = write_measure(out, mu)
    result["iterates_file"] = write_table(out, "iterates.csv", rep.iterates)
    result["passed"] = bool(ok)
    return result, mu


def run_verify(problem, args, out: Path):
    fld = problem.field
    K = problem.K
    fam = measure_family(problem.dim, count=20, seed=resolve_seed(args.seed, problem))
    h1 = {"H1.1": check_H11(fld, K, fam), "H1.2": check_H12(fld, K, fam),
          "H1.3": check_H13(fld, K, fam, seed=resolve_seed(args.seed, problem))}
    result = {"command": "verify", "problem": problem.describe(),
              "regularity": {k: v.to_dict() for k, v in h1.items()}}
    ok = all(v.passed for v in h1.values())
    if problem.V is not None:
        spec = problem.lyapunov_spec()
        integral = check_integral(fld, spec)
        origin = check_H32(fld, spec)
        pointwise = sweep_pointwise(fld, spec.V)
        result["integral"] = integral.to_dict()
        result["origin_bound"] = origin.to_dict()
        result["pointwise_sweep"] = {
            "pairs": [{"C": r.constants["C"], "Lambda": r.constants["Lambda"], "passed": r.passed,
                       "witness": r.violations[0] if r.violations else None} for r in pointwise],
            "any_pass": any(r.passed for r in pointwise)}
        if problem.candidates:
            result["candidate_battery"] = sweep_integral(fld, problem.candidates)
        mu_probe = measure_family(problem.dim, count=1)[0]
        result["W_growth_proxy"] = ray_growth_proxy(spec.W, mu_probe, problem.dim)
        result["notes"] = ["pointwise sweep and candidate battery are informational",
                           "W -> infinity is checked only along coordinate rays on the box"]
        ok = ok and integral.passed and origin.passed
    result["passed"] = bool(ok)
    return result


def run_residual(problem, args, out: Path):
    if args.measure:
        mu = read_measure(args.measure)
        source = str(args.measure)
    else:
        res, mu = run_solve(problem, args, out)
        source = "solve"
    per = weak_residual(mu, problem.field, per_function=True)
    value = max(per)
    result = {"command": "residual", "problem": problem.describe(), "measure": source,
              "residual": value, "per_function": per}
    result["passed"] = args.tol is None or value <= args.tol
    return result


def _empirical(mu, n, seed):
    pts, w = atoms_of(mu)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(w), size=n, p=w / np.sum(w))
    return DiscreteMeasure(pts[idx])


def run_diagnose(problem, args, out: Path):
    lemma = LEMMAS[args.lemma]
    seed = resolve_seed(args.seed, problem)
    if args.measure:
        mu = read_measure(args.measure)
    else:
        _, mu = run_solve(problem, args, out)
    dg = problem.diag
    K_y = dg.get("K_y", (-1.0, 1.0))
    result = {"command": "diagnose", "lemma": lemma, "problem": problem.describe()}
    if lemma == "projection":
        if problem.m < 1:
            raise ConfigurationError("projection regularity needs m >= 1")
        eta = None
        if "eta_radius" in dg and problem.dim > problem.m:
            eta = Cutoff(dg["eta_radius"], problem.dim - problem.m)
        win = ProjectionWindow(problem.m, ([K_y[0]] * problem.m, [K_y[1]] * problem.m), eta=eta,
                               r=dg.get("r", 2.0), S=dg.get("S", 10.0))
        rep = projection_regularity(mu, RegularityConfig(win, gamma=dg.get("gamma", 1.0)))
    elif lemma == "coefficients":
        sizes = [100, 1000, 10000]
        seq = [[_empirical(mu, n, seed * 1000 + s) for s in range(20)] for n in sizes]
        tests = [mu] + measure_family(problem.dim, count=3, seed=seed)
        rep = coefficient_convergence(problem.field, seq, mu, tests, problem.K, labels=sizes)
        rep.summary["rate_band"] = rate_band(sizes, [r["gap"] for r in rep.table])
    else:
        Q = (np.asarray([K_y[0] - 1.5] * problem.m), np.asarray([K_y[1] + 1.5] * problem.m))
        win = ProjectionWindow(problem.m, ([K_y[0]] * problem.m, [K_y[1]] * problem.m), Q_y=Q) \
            if problem.m >= 1 else None
        rep = mollification_convergence(problem.field, [0.5, 0.25, 0.125], [mu], problem.K,
                                        sigma_measures=[mu], window=win)
    result["diagnostic"] = rep.to_dict()
    result["trend_file"] = write_table(out, f"trend-{lemma}.csv", rep.table)
    result["passed"] = bool(rep.passed)
    return result


def run_examples(args, out: Path):
    if not args.name:
        cat = list_presets()
        for p in cat:
            print(f"{p['name']:<28} d={p['dim']} m={p['m']} {p['backend']:<8} {p['description']}")
        return {"command": "examples", "catalog": cat, "passed": True}
    problem = load_preset(args.name)
    result = {"command": "examples", "name": args.name, "problem": problem.describe()}
    ok = True
    if args.solve or not args.verify:
        res, _ = run_solve(problem, args, out)
        result["solve"] = res
        ok &= res["passed"]
    if args.verify:
        res = run_verify(problem, args, out)
        result["verify"] = res
        ok &= res["passed"]
    result["passed"] = bool(ok)
    return result


# --------------------------------------------------------------------------
# entry point

def _radii(text):
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides KOLMOFIX_SEED and the file")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--out", default="kolmofix-out", help="output directory")
    common.add_argument("--backend", choices=("closed", "grid", "particle"), default=None)
    common.add_argument("--compensate", choices=("origin-atom", "none"), default=None,
                        help="solve the truncated sequence with this compensation")
    common.add_argument("--truncate", type=_radii, default=None, help="radii, e.g. 4,6,8")
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="kolmofix", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"kolmofix {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("solve", "fixed-point solve"), ("verify", "check the hypotheses")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("problem", help="problem file or preset name")
    p = sub.add_parser("residual", parents=[common], help="weak residual of a measure")
    p.add_argument("problem")
    p.add_argument("--measure", default=None, help="measure CSV or grid JSON (default: solve)")
    p = sub.add_parser("diagnose", parents=[common], help="regularity and convergence diagnostics")
    p.add_argument("problem")
    p.add_argument("--lemma", choices=sorted(LEMMAS), required=True)
    p.add_argument("--measure", default=None)
    p = sub.add_parser("examples", parents=[common], help="list or run shipped presets")
    p.add_argument("name", nargs="?", choices=PRESET_NAMES)
    p.add_argument("--solve", action="store_true")
    p.add_argument("--verify", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        _accel.set_threads(args.threads)
    out = Path(args.out)
    try:
        if args.command == "examples":
            result = run_examples(args, out)
        else:
            problem = load(args.problem)
            if args.command == "solve":
                result, _ = run_solve(problem, args, out)
            elif args.command == "verify":
                result = run_verify(problem, args, out)
            elif args.command == "residual":
                result = run_residual(problem, args, out)
            else:
                result = run_diagnose(problem, args, out)
        write_report(out, result)
    except FileNotFoundError as err:
        print(f"kolmofix: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (ProblemError, ConfigurationError, MeasureError, FrozenSolveError, PicardError,
            ValueError, ArithmeticError) as err:
        print(f"kolmofix: error: {err}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{args.command}: {'pass' if result['passed'] else 'violations'} "
          f"(report: {out / 'report.json'})")
    return EXIT_OK if result["passed"] else EXIT_VIOLATION


def main():
    sys.exit(run())
