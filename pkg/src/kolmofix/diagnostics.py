"""Empirical regularity and convergence diagnostics.

* ``projection_regularity``: L^r norm over a cube of the density of the
  ``eta``-weighted projection of a measure onto the ``y`` coordinates,
  estimated by Gaussian KDE and extrapolated in the bandwidth.
* ``coefficient_convergence``: ``sup_mu int_K |c(., sigma_n) - c(., sigma)| dmu``
  along a sequence ``sigma_n -> sigma``.
* ``mollification_convergence``: the same gap between a field and its
  mollifications as ``delta`` decreases.
* ``h2_gap``: the measure-continuity gap with the exponent chosen from ``m``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .coeff import MollifierKernel, mollify
from .measure import (DiscreteMeasure, MeasureError, ProjectionWindow, atoms_of, kde_lr_norm, project_y,
                      silverman_bandwidth)

SINGULAR_GROWTH = 0.25


class ConfigurationError(ValueError):
    pass


@dataclass
class RegularityConfig:
    """Window, exponent bump and KDE bandwidth schedule.

    ``bandwidths`` defaults to ``(h, h/2, h/4)`` with ``h`` from Silverman's
    rule applied to the projected measure.
    """
    window: ProjectionWindow
    gamma: float = 1.0
    bandwidths: tuple | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if self.bandwidths is not None and (len(self.bandwidths) < 2
                                            or min(self.bandwidths) <= 0):
            raise ConfigurationError("need at least two positive bandwidths")

    @property
    def r_prime(self):
        return h2_exponent(self.window.m, self.gamma)


def h2_exponent(m, gamma=1.0):
    """Exponent of the measure-continuity condition: ``inf`` (uniform) for m = 0, ``1 + gamma`` for m = 1, ``m`` otherwise."""
    if m == 0:
        return math.inf
    return 1.0 + gamma if m == 1 else float(m)


@dataclass
class DiagnosticReport:
    name: str
    passed: bool
    table: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_csv(self) -> str:
        if not self.table:
            return ""
        keys = list(self.table[0])
        rows = [",".join(keys)]
        rows += [",".join(repr(r[k]) for k in keys) for r in self.table]
        return "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# projection regularity

def richardson(values, hs):
    """Limit ``h -> 0`` of ``values`` sampled at geometrically shrinking ``hs``.

    Uses the observed order from the last three samples; falls back to the
    finest value when the differences do not shrink geometrically.
    """
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        return float(v[-1]), None
    d1, d2 = v[-3] - v[-2], v[-2] - v[-1]
    q = hs[-2] / hs[-1]
    if d1 == 0 or d2 == 0 or d1 * d2 < 0 or abs(d2) >= abs(d1):
        return float(v[-1]), None
    order = math.log(abs(d1 / d2)) / math.log(q)
    return float(v[-1] - d2 / (q ** order - 1.0)), order


def projection_regularity(mu, cfg: RegularityConfig) -> DiagnosticReport:
    """KDE estimate of ``||rho||_{L^r(K_y)}`` for the projection of ``eta mu``.

    The growth exponent is the slope of ``log norm`` against ``-log h``
    between the widest and the narrowest bandwidth; an atom in 1-D gives
    ``1 - 1/r``, a bounded density gives about 0.  Exponents above 0.25
    mark the projection as singular, hence outside the class with a
    bounded norm.
    """
    w = cfg.window
    if w.m == mu.dim:
        pts, wt = atoms_of(mu)
        proj = DiscreteMeasure(pts, wt, allow_empty=True)
    else:
        proj = project_y(mu, w)
    if proj.is_empty or proj.mass <= 0:
        raise MeasureError("empty projection: eta vanishes on the support")
    hs = cfg.bandwidths
    if hs is None:
        h = silverman_bandwidth(proj)
        hs = (h, h / 2, h / 4)
    hs = tuple(sorted((float(h) for h in hs), reverse=True))
    norms = [kde_lr_norm(proj, w.K_y, w.r, h) for h in hs]
    extrap, order = richardson(norms, hs)
    growth = math.log(max(norms[-1], 1e-300) / max(norms[0], 1e-300)) / math.log(hs[0] / hs[-1])
    singular = growth > SINGULAR_GROWTH
    in_class = (not singular) and extrap <= w.S
    rep = DiagnosticReport("projection_regularity", in_class,
                           [{"bandwidth": h, "norm": n} for h, n in zip(hs, norms)])
    rep.summary = {"extrapolated_norm": extrap, "observed_order": order, "growth_exponent": growth,
                   "singular": singular, "S": w.S, "r": w.r, "projected_mass": proj.mass,
                   "in_class": in_class}
    if singular:
        rep.notes.append("norm grows as the bandwidth shrinks; projection has no bounded density")
    return rep


# --------------------------------------------------------------------------
# coefficient gaps

def _restricted(mu, K):
    pts, w = atoms_of(mu)
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (pts.shape[1],)) for v in K)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return pts[inside], w[inside]


def integral_gap(fld_a, sigma_a, fld_b, sigma_b, mu, K):
    """``max_c int_K |c_a - c_b| dmu`` over all entries ``c`` of ``a`` and ``b``."""
    pts, w = _restricted(mu, K)
    if pts.shape[0] == 0:
        return 0.0
    A1, B1 = fld_a.coefficients(pts, sigma_a)
    A2, B2 = fld_b.coefficients(pts, sigma_b)
    ga = np.einsum("n,nij->ij", w, np.abs(A1 - A2))
    gb = np.einsum("n,ni->i", w, np.abs(B1 - B2))
    return float(max(np.max(ga), np.max(gb)))


def _loglog_slope(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def coefficient_convergence(fld, sigma_seq, sigma, test_measures, K, labels=None) -> DiagnosticReport:
    """Gap ``sup_mu int_K |c(., sigma_n) - c(., sigma)| dmu`` for each ``sigma_n``.

    ``sigma_seq`` may hold measures or, for seed-averaged studies, lists of
    measures (one per seed) whose gaps are averaged.  ``labels`` (for
    example sample sizes) are used for the log-log trend fit.
    """
    test_measures = list(test_measures)
    labels = list(range(1, len(sigma_seq) + 1)) if labels is None else list(labels)
    rows = []
    for lab, s in zip(labels, sigma_seq):
        group = s if isinstance(s, (list, tuple)) else [s]
        gaps = [max(integral_gap(fld, sn, fld, sigma, mu, K) for mu in test_measures)
                for sn in group]
        rows.append({"n": lab, "gap": float(np.mean(gaps)), "seeds": len(group)})
    gaps = np.array([r["gap"] for r in rows])
    monotone = bool(np.all(np.diff(gaps) <= 1e-15 + 1e-12 * gaps[:-1]))
    rep = DiagnosticReport("coefficient_convergence", monotone, rows)
    rep.summary = {"final_gap": float(gaps[-1]), "monotone": monotone,
                   "loglog_slope": _loglog_slope(labels, gaps)}
    return rep


def rate_band(labels, gaps, rate=0.5):
    """``max/min`` of ``gap * n^rate`` across the table: 1 for an exact power law."""
    scaled = np.asarray(gaps, dtype=float) * np.asarray(labels, dtype=float) ** rate
    if np.any(scaled <= 0):
        return math.inf
    return float(scaled.max() / scaled.min())


def mollification_convergence(fld, deltas, test_measures, K, sigma_measures=(None,),
                              kind="box", window: ProjectionWindow | None = None, tol=None,
                              slack=0.1, per_dim=64) -> DiagnosticReport:
    """``sup_{mu, sigma} int_K |c(., sigma) - c_delta(., sigma)| dmu`` for each ``delta``.

    Passes when the gap never grows by more than ``slack`` as ``delta``
    decreases and, with ``tol`` set, ends below ``tol``.  A ``window`` whose
    ``Q_y`` leaves less than unit margin around ``K_y`` is rejected.
    """
    if fld.m < 1:
        raise ConfigurationError("mollification acts on y and needs m >= 1")
    if window is not None and window.Q_y is not None and window.margin() < 1.0:
        raise ConfigurationError(f"Q_y must exceed K_y by a margin of at least 1 "
                                 f"(got {window.margin():g})")
    deltas = sorted((float(d) for d in deltas), reverse=True)
    test_measures = list(test_measures)
    rows = []
    for dl in deltas:
        moll = mollify(fld, MollifierKernel(kind, dl, fld.m), per_dim)
        gap = max(integral_gap(fld, s, moll, s, mu, K)
                  for mu in test_measures for s in sigma_measures)
        rows.append({"delta": dl, "gap": gap})
    gaps = np.array([r["gap"] for r in rows])
    steady = bool(np.all(gaps[1:] <= gaps[:-1] * (1 + slack) + 1e-15))
    small = tol is None or gaps[-1] <= tol
    rep = DiagnosticReport("mollification_convergence", steady and small, rows)
    rep.summary = {"final_gap": float(gaps[-1]), "nonincreasing": steady,
                   "loglog_slope": _loglog_slope(deltas, gaps), "kernel": kind}
    return rep


# --------------------------------------------------------------------------
# measure continuity

def h2_gap(fld, sigma_n, sigma, K_y=None, z_points=None, gamma=1.0, resolution=201):
    """Measure-continuity gap with the exponent chosen from ``fld.m``.

    m = 0: ``max_x (sum |da| + sum |db|)`` over the points ``z_points``
    (full coordinates).  m >= 1: ``max_z int_{K_y} (sum |da|^p + sum |db|^p) dy``
    with ``p = 1 + gamma`` (m = 1) or ``p = m``, by the midpoint rule.
    """
    d, m = fld.dim, fld.m
    if m == 0:
        X = np.atleast_2d(np.asarray(z_points, dtype=float))
        A1, B1 = fld.coefficients(X, sigma_n)
        A2, B2 = fld.coefficients(X, sigma)
        g = np.abs(A1 - A2).sum(axis=(1, 2)) + np.abs(B1 - B2).sum(axis=1)
        return float(np.max(g))
    if K_y is None:
        raise ConfigurationError("K_y is required for m >= 1")
    p = h2_exponent(m, gamma)
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (m,)) for v in K_y)
    per = max(2, int(round(resolution ** (1.0 / m))))
    axes = [lo[i] + (np.arange(per) + 0.5) * (hi[i] - lo[i]) / per for i in range(m)]
    Y = np.stack([g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    cell = float(np.prod((hi - lo) / per))
    zs = np.zeros((1, d - m)) if z_points is None else np.atleast_2d(np.asarray(z_points, dtype=float))
    worst = 0.0
    for z in zs:
        X = np.concatenate([Y, np.broadcast_to(z, (Y.shape[0], d - m))], axis=1)
        A1, B1 = fld.coefficients(X, sigma_n)
        A2, B2 = fld.coefficients(X, sigma)
        g = (np.abs(A1 - A2) ** p).sum(axis=(1, 2)) + (np.abs(B1 - B2) ** p).sum(axis=1)
        worst = max(worst, float(np.sum(g) * cell))
    return worst


def h2_convergence(fld, sigma_seq, sigma, labels=None, **kw) -> DiagnosticReport:
    labels = list(range(1, len(sigma_seq) + 1)) if labels is None else list(labels)
    rows = [{"n": lab, "gap": h2_gap(fld, s, sigma, **kw)} for lab, s in zip(labels, sigma_seq)]
    gaps = [r["gap"] for r in rows]
    rep = DiagnosticReport("h2_convergence", gaps[-1] <= gaps[0], rows)
    rep.summary = {"exponent": h2_exponent(fld.m, kw.get("gamma", 1.0)), "final_gap": gaps[-1],
                   "loglog_slope": _loglog_slope(labels, gaps)}
    return rep


__all__ = [
    "ConfigurationError", "DiagnosticReport", "RegularityConfig", "coefficient_convergence",
    "h2_convergence", "h2_exponent", "h2_gap", "integral_gap", "mollification_convergence",
    "projection_regularity", "rate_band", "richardson",
]
