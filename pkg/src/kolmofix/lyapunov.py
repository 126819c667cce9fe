"""Generator application and numerical checks of Lyapunov-type conditions.

Conditions checked, for a field with generator ``L_mu``:

* pointwise drift: ``L_mu V(x) <= C - Lambda V(x)`` for all ``x`` and ``mu``;
* integral drift: ``int L_mu W(., mu) dmu <= C - Lambda int V dmu`` for
  compactly supported probability measures ``mu``;
* origin bound: ``-L_mu W(0, mu) <= C1 + C2 int H dmu`` with ``H`` small
  relative to ``V`` far out;
* moment bound of a solution: ``int V dmu <= C / Lambda``.

All checks run over finite samples of points and measures, and the
reports say which samples were used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .functions import ConstantFunction, ScalarFunction, as_function
from .measure import DiscreteMeasure, atoms_of, lyapunov_integral

ABS_TOL = 1e-8
REL_TOL = 1e-6


def _grad_hess(f, X, mu):
    if f.depends_on_measure:
        return f.grad(X, mu), f.hess(X, mu)
    return f.grad(X), f.hess(X)


def apply_generator(fld, mu, f, X, coefficients=None, include_source=True):
    """``sum a_ij d_ij f + sum b_i d_i f`` at the rows of ``X`` with coefficients frozen at ``mu``.

    A measure-dependent ``f`` (such as ``W(., mu)``) is evaluated at the same
    ``mu``.  Fields with a zeroth-order source term add it when
    ``include_source`` is true.
    """
    f = as_function(f, fld.dim)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A, B = fld.coefficients(X, mu) if coefficients is None else coefficients
    g, H = _grad_hess(f, X, mu)
    out = np.einsum("nij,nij->n", A, H) + np.einsum("ni,ni->n", B, g)
    if include_source:
        src = fld.source(X, mu)
        if src is not None:
            out = out + src
    return out


@dataclass
class LyapunovSpec:
    """Candidate functions and constants.

    ``W`` defaults to ``V`` and ``H`` to zero.
    """
    V: ScalarFunction
    W: ScalarFunction | None = None
    H: ScalarFunction | None = None
    C: float = 1.0
    Lambda: float = 1.0
    C1: float = 0.0
    C2: float = 0.0
    dim: int = 1

    def __post_init__(self):
        self.V = as_function(self.V, self.dim)
        self.W = self.V if self.W is None else as_function(self.W, self.dim)
        self.H = ConstantFunction(0.0, self.dim) if self.H is None else as_function(self.H, self.dim)
        if self.Lambda <= 0:
            raise ValueError("Lambda must be positive")

    def validate(self, X, measures=(), eps=0.1, shell=None):
        """Nonnegativity of V, W, H on ``X`` and the ratio ``H/V <= eps`` on ``shell``."""
        problems = []
        for name, f in (("V", self.V), ("H", self.H)):
            v = f.value(X)
            if np.any(v < -ABS_TOL):
                problems.append({"function": name, "x": X[np.argmin(v)].tolist(),
                                 "value": float(v.min())})
        for k, mu in enumerate(measures or [None]):
            if self.W.depends_on_measure and mu is None:
                continue
            v = self.W.value(X, mu) if self.W.depends_on_measure else self.W.value(X)
            if np.any(v < -ABS_TOL):
                problems.append({"function": "W", "measure": k, "x": X[np.argmin(v)].tolist(),
                                 "value": float(v.min())})
        if shell is not None and len(shell):
            ratio = self.H.value(shell) / np.maximum(self.V.value(shell), 1e-300)
            if np.max(ratio) > eps:
                problems.append({"function": "H/V", "x": shell[np.argmax(ratio)].tolist(),
                                 "value": float(np.max(ratio))})
        return problems


@dataclass
class ConditionReport:
    name: str
    passed: bool
    constants: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    n_violations: int = 0
    n_measures: int = 0
    n_points: int = 0
    worst_slack: float | None = None
    best_fit: dict | None = None
    frontier: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _exceeds(lhs, rhs, abs_tol=ABS_TOL, rel_tol=REL_TOL):
    return lhs > rhs + abs_tol + rel_tol * np.abs(rhs)


# --------------------------------------------------------------------------
# measure families

def measure_family(dim=1, count=100, max_atoms=16, box=3.0, seed=0, probes=False,
                   probe_radius=1e3):
    """Seeded random clouds of at most ``max_atoms`` atoms in ``[-box, box]^d``.

    With ``probes`` the family also contains ``delta_0`` and Dirac masses on a
    logarithmic ladder of radii up to ``probe_radius`` along each axis.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        k = int(rng.integers(1, max_atoms + 1))
        pts = rng.uniform(-box, box, size=(k, dim))
        w = rng.dirichlet(np.ones(k))
        out.append(DiscreteMeasure(pts, w / w.sum()))
    if probes:
        out.append(DiscreteMeasure.dirac(np.zeros(dim)))
        for r in np.geomspace(1.0, probe_radius, 13):
            for i in range(dim):
                for s in (-1.0, 1.0):
                    x = np.zeros(dim)
                    x[i] = s * r
                    out.append(DiscreteMeasure.dirac(x))
    return out


def default_grid(dim=1, half_width=8.0, resolution=None):
    resolution = resolution or {1: 801, 2: 81}.get(dim, 17)
    t = np.linspace(-half_width, half_width, resolution)
    mesh = np.meshgrid(*[t] * dim, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


DEFAULT_C = (0.5, 1.0, 2.0, 3.0, 5.0, 10.0)
DEFAULT_LAMBDA = (0.5, 1.0, 2.0, 5.0)


# --------------------------------------------------------------------------
# checks

def check_pointwise(fld, V, C, Lambda, grid=None, measures=None, max_witnesses=20) -> ConditionReport:
    """List all sampled ``(x, mu)`` with ``L_mu V(x) > C - Lambda V(x)`` beyond tolerance."""
    V = as_function(V, fld.dim)
    X = default_grid(fld.dim) if grid is None else np.atleast_2d(grid)
    measures = measure_family(fld.dim, probes=True) if measures is None else list(measures)
    rep = ConditionReport("pointwise", True, {"C": C, "Lambda": Lambda},
                          n_measures=len(measures), n_points=X.shape[0])
    Vx = V.value(X)
    worst = np.inf
    for k, mu in enumerate(measures):
        lhs = apply_generator(fld, mu, V, X)
        rhs = C - Lambda * Vx
        slack = rhs - lhs
        worst = min(worst, float(np.min(slack)))
        bad = np.flatnonzero(_exceeds(lhs, rhs))
        rep.n_violations += int(bad.size)
        for i in bad[: max(0, max_witnesses - len(rep.violations))]:
            rep.violations.append({"measure": k, "x": X[i].tolist(), "lhs": float(lhs[i]),
                                   "rhs": float(rhs[i])})
    rep.worst_slack = worst
    rep.passed = rep.n_violations == 0
    return rep


def sweep_pointwise(fld, V, Cs=DEFAULT_C, Lambdas=DEFAULT_LAMBDA, grid=None, measures=None):
    """Run ``check_pointwise`` for every ``(C, Lambda)`` pair; returns a list of reports."""
    X = default_grid(fld.dim) if grid is None else grid
    measures = measure_family(fld.dim, probes=True) if measures is None else measures
    return [check_pointwise(fld, V, C, L, X, measures, max_witnesses=1)
            for C in Cs for L in Lambdas]


def integral_terms(fld, spec: LyapunovSpec, mu):
    """``(int L_mu W(., mu) dmu, int V dmu)`` by exact summation over the atoms."""
    pts, w = atoms_of(mu)
    lhs = float(np.sum(w * apply_generator(fld, mu, spec.W, pts)))
    return lhs, lyapunov_integral(mu, spec.V)


def best_fit_constants(lhs, vint, Lambdas=None):
    """Smallest ``C`` for each ``Lambda`` making all samples satisfy the bound, and the pair minimising ``C/Lambda``."""
    lhs, vint = np.asarray(lhs), np.asarray(vint)
    Lambdas = np.geomspace(1e-3, 1e3, 121) if Lambdas is None else np.asarray(Lambdas)
    Cs = np.array([np.max(lhs + L * vint) for L in Lambdas])
    ratio = Cs / Lambdas
    i = int(np.argmin(np.where(Cs > 0, ratio, np.inf))) if np.any(Cs > 0) else int(np.argmin(Cs))
    frontier = [[float(L), float(c)] for L, c in zip(Lambdas, Cs)]
    return {"C": float(Cs[i]), "Lambda": float(Lambdas[i]), "ratio": float(ratio[i])}, frontier


def check_integral(fld, spec: LyapunovSpec, measures=None, max_witnesses=20) -> ConditionReport:
    """``int L_mu W(., mu) dmu <= C - Lambda int V dmu`` over a family of measures."""
    measures = measure_family(fld.dim) if measures is None else list(measures)
    rep = ConditionReport("integral", True, {"C": spec.C, "Lambda": spec.Lambda},
                          n_measures=len(measures))
    lhs_all, v_all, worst = [], [], np.inf
    for k, mu in enumerate(measures):
        lhs, vint = integral_terms(fld, spec, mu)
        rhs = spec.C - spec.Lambda * vint
        lhs_all.append(lhs)
        v_all.append(vint)
        worst = min(worst, rhs - lhs)
        if _exceeds(lhs, rhs):
            rep.n_violations += 1
            if len(rep.violations) < max_witnesses:
                rep.violations.append({"measure": k, "lhs": lhs, "rhs": rhs,
                                       "atoms": atoms_of(mu)[0].tolist()[:4]})
    rep.worst_slack = float(worst)
    rep.best_fit, rep.frontier = best_fit_constants(lhs_all, v_all)
    rep.passed = rep.n_violations == 0
    return rep


def sweep_integral(fld, candidates, Cs=DEFAULT_C, Lambdas=DEFAULT_LAMBDA, measures=None):
    """Integral check with ``W = V = candidate`` over a grid of ``(C, Lambda)``.

    Returns one entry per candidate: the pairs that pass (if any) and the
    best-fit constants.  The default family adds far-out point masses, which
    is where measure-independent candidates break down.
    """
    measures = measure_family(fld.dim, probes=True) if measures is None else list(measures)
    out = []
    for cand in candidates:
        V = as_function(cand, fld.dim)
        spec = LyapunovSpec(V, dim=fld.dim)
        terms = np.array([integral_terms(fld, spec, mu) for mu in measures])
        lhs, vint = terms[:, 0], terms[:, 1]
        passing = [[float(C), float(L)] for C in Cs for L in Lambdas
                   if not np.any(_exceeds(lhs, C - L * vint))]
        fit, _ = best_fit_constants(lhs, vint)
        out.append({"candidate": getattr(V, "text", repr(V)), "passing_pairs": passing,
                    "any_pass": bool(passing), "best_fit": fit, "n_measures": len(measures)})
    return out


def boundary_shell(dim, half_width=8.0, inner=0.9, resolution=41):
    X = default_grid(dim, half_width, resolution)
    return X[np.max(np.abs(X), axis=1) >= inner * half_width]


def check_H32(fld, spec: LyapunovSpec, measures=None, eps=0.1, half_width=8.0) -> ConditionReport:
    """``-L_mu W(0, mu) <= C1 + C2 int H dmu`` per measure, plus ``H/V <= eps`` on the boundary shell."""
    measures = measure_family(fld.dim) if measures is None else list(measures)
    rep = ConditionReport("H3.2", True, {"C1": spec.C1, "C2": spec.C2, "eps": eps},
                          n_measures=len(measures))
    origin = np.zeros((1, fld.dim))
    worst = np.inf
    for k, mu in enumerate(measures):
        lhs = -float(apply_generator(fld, mu, spec.W, origin)[0])
        rhs = spec.C1 + spec.C2 * lyapunov_integral(mu, spec.H)
        worst = min(worst, rhs - lhs)
        if _exceeds(lhs, rhs):
            rep.n_violations += 1
            if len(rep.violations) < 20:
                rep.violations.append({"measure": k, "lhs": lhs, "rhs": rhs})
    shell = boundary_shell(fld.dim, half_width)
    ratio = spec.H.value(shell) / np.maximum(spec.V.value(shell), 1e-300)
    if np.max(ratio) > eps:
        rep.n_violations += 1
        rep.violations.append({"kind": "H/V above eps on the boundary shell",
                               "x": shell[int(np.argmax(ratio))].tolist(), "ratio": float(np.max(ratio))})
    rep.worst_slack = float(worst)
    rep.passed = rep.n_violations == 0
    return rep


def verify_moment_bound(solution, V, C, Lambda, slack=0.05) -> ConditionReport:
    """``int V dmu <= (C / Lambda)(1 + slack)``."""
    value = lyapunov_integral(solution, V)
    bound = C / Lambda * (1.0 + slack)
    rep = ConditionReport("moment_bound", value <= bound,
                          {"C": C, "Lambda": Lambda, "slack": slack})
    rep.worst_slack = bound - value
    rep.best_fit = {"integral_V": value, "bound": bound}
    if not rep.passed:
        rep.n_violations = 1
        rep.violations.append({"integral_V": value, "bound": bound})
    return rep


def ray_growth_proxy(W, mu, dim=1, half_width=8.0, samples=64):
    """Whether ``W(., mu)`` increases along coordinate rays near the boundary (proxy for W -> infinity)."""
    t = np.linspace(0.75 * half_width, half_width, samples)
    ok = True
    for i in range(dim):
        for s in (-1.0, 1.0):
            X = np.zeros((samples, dim))
            X[:, i] = s * t
            v = W.value(X, mu) if W.depends_on_measure else W.value(X)
            ok &= bool(np.all(np.diff(v) > 0))
    return ok
