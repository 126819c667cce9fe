"""Self-consistent solutions by damped Picard iteration, and truncated operators.

``picard_solve`` repeats: freeze the current measure in the coefficients,
solve the linear stationary problem, blend the answer into the current
measure.  ``localized_solve`` runs the same loop on a sequence of
operators whose coefficients are cut off outside growing balls, with a
killing term that confines the mass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .coeff import CoefficientField, python_kernel
from .frozen import (FrozenProblem, FrozenSolveError, SdeConfig, solve_1d_closed, solve_ergodic,
                     solve_grid_fv, weak_residual)
from .functions import Cutoff, ExprFunction, as_function
from .kernels import CoefficientKernel, build_source
from .measure import (DiscreteMeasure, TruncationScheme, compensate_truncate,
                      lyapunov_integral, marginal_distance, marginal_w1, mixture)

log = logging.getLogger(__name__)

BACKENDS = ("closed", "grid", "particle")
COMPENSATE = ("origin-atom", "none")


class PicardError(RuntimeError):
    """Inner solve failure, tagged with the iteration at which it happened."""

    def __init__(self, message, iteration):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class PicardConfig:
    """Settings of the damped fixed-point loop.

    Parameters
    ----------
    theta : float
        Initial damping in (0, 1]; halved whenever the step distance grows.
    tol : float
        Stop once the distance between consecutive iterates is at most this.
    backend : {"closed", "grid", "particle"}
    R : float, optional
        Moment budget; a V-moment above ``10 R`` stops the run as diverged.
    V : function, optional
        Lyapunov weight in the stopping distance and the budget.
    """
    theta: float = 0.5
    max_iter: int = 50
    tol: float = 1e-3
    backend: str = "grid"
    R: float | None = None
    V: object = None
    cells: object = 400
    domain: tuple | None = None
    sde: SdeConfig = field(default_factory=SdeConfig)
    min_theta: float = 1e-3
    track_residual: bool = True
    keep_history: int = 8

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class SolveReport:
    status: str                       # converged | max_iter | diverged | degraded
    measure: object
    iterates: list = field(default_factory=list)
    assumptions: dict = field(default_factory=dict)
    cycle: dict | None = None
    levels: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == "converged"

    def to_dict(self):
        out = {
            "status": self.status,
            "iterations": len(self.iterates),
            "iterates": self.iterates,
            "assumptions": {k: (v.to_dict() if hasattr(v, "to_dict") else v)
                            for k, v in self.assumptions.items()},
            "cycle": self.cycle,
            "notes": self.notes,
        }
        if self.levels:
            out["levels"] = self.levels
        return out


# --------------------------------------------------------------------------
# inner solve

def frozen_solve(fld, sigma, cfg: PicardConfig):
    """One application of the solution map: solve ``L*_sigma mu = 0``."""
    prob = FrozenProblem(fld, sigma, cfg.domain)
    if cfg.backend == "closed":
        return solve_1d_closed(prob, cfg.cells)
    if cfg.backend == "grid":
        return solve_grid_fv(prob, cfg.cells)
    return solve_ergodic(prob, cfg.sde)


def _distance(mu, nu, V):
    return marginal_w1(mu, nu) if V is None else marginal_distance(mu, nu, V)


def _v_moment(mu, V):
    return None if V is None else lyapunov_integral(mu, V)


def _blend(sigma, new, theta, cfg):
    if theta >= 1.0:
        return new
    cap = None
    if cfg.backend == "particle":
        cap = cfg.sde.n_particles * cfg.sde.n_snapshots
    return mixture(sigma, new, theta, max_atoms=cap)


def _find_cycle(history, current, tol, V):
    """Earliest stored iterate (other than the last) within ``tol`` of ``current``."""
    for lag, past in enumerate(reversed(history[:-1]), start=1):
        if _distance(current, past, V) <= tol:
            return {"period": lag, "distance": _distance(current, past, V)}
    return None


def picard_solve(fld, mu0, cfg: PicardConfig | None = None, callback=None) -> SolveReport:
    """Damped fixed-point iteration ``sigma <- (1 - theta) sigma + theta Phi(sigma)``.

    The first step is undamped so that the iterates live in the backend's
    representation from then on.  For fields that do not depend on the
    measure the solution map is evaluated once and reused.
    """
    cfg = cfg or PicardConfig()
    V = None if cfg.V is None else as_function(cfg.V, fld.dim)
    sigma = mu0
    theta = cfg.theta
    prev_dist = math.inf
    cached = None
    history = []
    rep = SolveReport("max_iter", mu0)
    for k in range(1, cfg.max_iter + 1):
        try:
            if cached is not None:
                new = cached
            else:
                new = frozen_solve(fld, sigma, cfg)
                if not fld.depends_on_measure:
                    cached = new
        except (FrozenSolveError, ArithmeticError, ValueError) as err:
            raise PicardError(str(err), k) from err
        step_theta = 1.0 if k == 1 else theta
        nxt = _blend(sigma, new, step_theta, cfg)
        dist = _distance(nxt, sigma, V)
        entry = {"iteration": k, "theta": step_theta, "distance": dist,
                 "fixed_point_gap": dist if step_theta >= 1.0 else _distance(new, sigma, V), "v_moment": _v_moment(nxt, V)}
        if cfg.track_residual:
            entry["residual"] = weak_residual(nxt, fld)
        rep.iterates.append(entry)
        if callback is not None:
            callback(k, nxt, entry)
        log.info("picard %d: distance %.3g theta %.3g", k, dist, step_theta)
        sigma = nxt
        history = (history + [sigma])[-cfg.keep_history:]
        if cfg.R is not None and entry["v_moment"] is not None and entry["v_moment"] > 10 * cfg.R:
            rep.status = "diverged"
            rep.notes.append(f"V-moment {entry['v_moment']:.6g} exceeds 10 R = {10 * cfg.R:g}")
            break
        if k > 1 and dist <= cfg.tol:
            rep.status = "converged"
            break
        if k > 1 and dist > prev_dist:
            theta = max(theta / 2.0, cfg.min_theta)
        if k > 1:
            prev_dist = dist
    rep.measure = sigma
    if rep.status == "max_iter":
        rep.cycle = _find_cycle(history, sigma, cfg.tol, V)
        if rep.cycle:
            rep.notes.append(f"iterates revisit a previous state with period {rep.cycle['period']}")
    if cfg.R is not None and V is not None:
        vm = lyapunov_integral(sigma, V)
        rep.assumptions["moment_budget"] = {"integral_V": vm, "R": cfg.R,
                                            "within_budget": vm <= 1.05 * cfg.R}
    return rep


# --------------------------------------------------------------------------
# truncated operators

class TruncatedField(CoefficientField):
    """``phi_n L_{nu_n} f - Lambda (1 - phi_n) V`` for a base field.

    ``nu_n`` is the compensated truncation of the measure (``origin-atom``)
    or the plain truncation ``phi_n mu`` (``none``).  For particle runs the
    zeroth-order term is a killing rate ``Lambda (1 - phi_n) V``: a killed
    particle restarts at the origin.
    """

    def __init__(self, base, scheme: TruncationScheme, compensate="origin-atom"):
        if compensate not in COMPENSATE:
            raise ValueError(f"compensate must be one of {COMPENSATE}")
        self.base = base
        self.scheme = scheme
        self.compensate = compensate
        self.dim = base.dim
        self.m = base.m
        self.depends_on_measure = base.depends_on_measure
        self.diagonal = base.diagonal

    def __repr__(self):
        return f"TruncatedField({self.base!r}, n={self.scheme.n:g}, compensate={self.compensate})"

    def noise_dims(self):
        return self.base.noise_dims()

    def inner_measure(self, mu):
        if mu is None:
            return None
        return compensate_truncate(mu, self.scheme, subprobability=self.compensate == "none")

    def coefficients(self, X, mu=None, cache=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A, B = self.base.coefficients(X, self.inner_measure(mu))
        phi = self.scheme.cutoff.value(X)
        return A * phi[:, None, None], B * phi[:, None]

    def kill_rate(self, X, mu=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.scheme.Lambda * (1.0 - self.scheme.cutoff.value(X)) * self.scheme.V.value(X)

    def source(self, X, mu=None):
        return -self.kill_rate(X, mu)

    def compile(self, sigma) -> CoefficientKernel:
        base, sch = self.base, self.scheme
        if not (hasattr(base, "kernel_parts") and isinstance(sch.V, ExprFunction)
                and isinstance(sch.cutoff, Cutoff) and not sch.V.depends_on_measure):
            return python_kernel(self, sigma)
        try:
            a_src, b_src, _, theta = base.kernel_parts(self.inner_measure(sigma))
            v_src = ex.to_source(sch.V.node, {})
        except ex.NotCompilableError:
            return python_kernel(self, sigma)
        a_src = {k: f"phi * ({s})" for k, s in a_src.items()}
        b_src = [None if s is None else f"phi * ({s})" for s in b_src]
        kill = f"{float(sch.Lambda)!r} * (1.0 - phi) * ({v_src})"
        src = build_source(a_src, b_src, kill,
                           prelude=("r = _norm(x)", f"phi = _cutoff(r, {float(sch.n)!r})"))
        th = np.asarray(theta if theta else [0.0], dtype=float)
        return CoefficientKernel(src, th, self.dim, self.noise_dims(), has_kill=True,
                                 diag=self.diagonal)


def build_truncated_operator(fld, scheme: TruncationScheme, compensate="origin-atom") -> TruncatedField:
    """Field whose generator is ``phi_n L_{nu_n} f - Lambda (1 - phi_n) V``."""
    return TruncatedField(fld, scheme, compensate)


def localized_solve(fld, lyap, n_sequence, cfg: PicardConfig | None = None, mu0=None,
                    compensate="origin-atom", bound=None, slack=0.1) -> SolveReport:
    """Picard solves of the truncated problems for each radius in ``n_sequence``.

    Parameters
    ----------
    lyap : LyapunovSpec
        Supplies ``V`` and ``Lambda`` for the killing term.
    bound : float, optional
        Uniform moment estimate; defaults to ``C / Lambda``.  Levels whose
        V-moment exceeds ``bound * (1 + slack)`` are flagged.

    Returns
    -------
    SolveReport
        ``measure`` is the solution at the largest radius; ``levels`` holds
        per-radius moments and statuses.  A failing level makes the overall
        status ``degraded`` instead of aborting the sequence.
    """
    cfg = cfg or PicardConfig()
    ns = [float(n) for n in n_sequence]
    if not ns or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_sequence must be a nonempty increasing sequence")
    bound = lyap.C / lyap.Lambda if bound is None else float(bound)
    V = lyap.V
    if mu0 is None:
        mu0 = DiscreteMeasure.dirac(np.zeros(fld.dim))
    rep = SolveReport("converged", None)
    rep.notes.append(f"compensate={compensate}; bound={bound:g}")
    base_half = 8.0 if cfg.domain is None else float(np.max(np.abs(cfg.domain)))
    final = None
    for n in ns:
        scheme = TruncationScheme(n, lyap.Lambda, V, fld.dim)
        tfld = build_truncated_operator(fld, scheme, compensate)
        level_cfg = replace(cfg, V=cfg.V if cfg.V is not None else V)
        if cfg.backend != "particle":
            level_cfg.cells, level_cfg.domain = _enlarged_grid(cfg.cells, base_half,
                                                               max(base_half, n + 1.5))
        entry = {"n": n}
        try:
            sub = picard_solve(tfld, mu0, level_cfg)
        except PicardError as err:
            entry.update(status="failed", error=str(err))
            rep.status = "degraded"
            rep.levels.append(entry)
            continue
        vm = lyapunov_integral(sub.measure, V)
        entry.update(status=sub.status, iterations=len(sub.iterates), integral_V=vm,
                     within_bound=vm <= bound * (1 + slack))
        if sub.status != "converged":
            rep.status = "degraded"
        rep.levels.append(entry)
        final = sub
    done = [lv["integral_V"] for lv in rep.levels if "integral_V" in lv]
    rep.assumptions["uniform_bound"] = {
        "bound": bound, "slack": slack,
        "sup_integral_V": max(done) if done else None,
        "passed": bool(done) and max(done) <= bound * (1 + slack),
    }
    if done and max(done) > bound * (1 + slack):
        rep.notes.append("V-moments exceed the uniform bound")
    if final is not None:
        rep.measure = final.measure
        rep.iterates = final.iterates
    else:
        rep.status = "degraded"
    return rep


def _enlarged_grid(cells, base_half, half):
    """Cells and symmetric domain covering ``[-half, half]`` at the base cell width.

    Cells are added in pairs so that the cell centres of the base grid are
    kept.
    """
    c = np.atleast_1d(np.asarray(cells, dtype=int))
    h = 2.0 * base_half / c
    extra = np.ceil(np.maximum(half - base_half, 0.0) / h - 1e-9).astype(int)
    out = c + 2 * extra
    halves = out * h / 2.0
    if np.ndim(cells) == 0:
        return int(out[0]), (-float(halves[0]), float(halves[0]))
    return out.tolist(), (-halves, halves)
