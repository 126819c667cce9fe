"""Discrete and gridded (sub-)probability measures and operations on them."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .functions import Cutoff, ScalarFunction, as_function


class MeasureError(ValueError):
    pass


class UnsupportedDimensionError(MeasureError):
    pass


class NonFiniteValueError(MeasureError):
    pass


MASS_TOL = 1e-12
GRID_MASS_TOL = 1e-9


class DiscreteMeasure:
    """Weighted atoms ``sum_k w_k delta_{x_k}`` in ``R^d``.

    Parameters
    ----------
    points : array_like, shape (K, d) or (K,)
    weights : array_like, shape (K,), optional
        Defaults to equal weights summing to one.
    probability : bool
        Require total mass 1 (within 1e-12).
    allow_empty : bool
        Permit zero total mass (projections that miss the window).
    """

    def __init__(self, points, weights=None, probability=False, allow_empty=False):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise MeasureError("points must have shape (K, d)")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / max(pts.shape[0], 1))
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise MeasureError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise MeasureError("points and weights must be finite")
        if np.any(w < 0):
            raise MeasureError("weights must be nonnegative")
        mass = float(np.sum(w))
        if mass > 1.0 + MASS_TOL:
            raise MeasureError(f"total mass {mass!r} exceeds 1")
        if mass <= 0.0 and not allow_empty:
            raise MeasureError("measure has zero total mass")
        if probability and abs(mass - 1.0) > MASS_TOL:
            raise MeasureError(f"probability measure has mass {mass!r}")
        self.points = pts
        self.weights = w
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def mass(self):
        return float(np.sum(self.weights))

    @property
    def is_empty(self):
        return self.mass <= 0.0

    @property
    def size(self):
        return self.points.shape[0]

    def atoms(self):
        return self.points, self.weights

    def is_probability(self, tol=MASS_TOL):
        return abs(self.mass - 1.0) <= tol

    def __repr__(self):
        return f"DiscreteMeasure(size={self.size}, dim={self.dim}, mass={self.mass:.12g})"

    @classmethod
    def dirac(cls, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x[None, :], [1.0], probability=True)

    def mean(self):
        return self.weights @ self.points / self.mass

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(self.dim)] + ["weight"])
        for p, w in zip(self.points, self.weights):
            writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, probability=False):
        rows = list(csv.reader(io.StringIO(text)))
        header = [h.strip() for h in rows[0]]
        d = len(header) - 1
        if header != [f"x{i + 1}" for i in range(d)] + ["weight"]:
            raise MeasureError(f"bad measure CSV header {header}")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        data = data.reshape(-1, d + 1)
        return cls(data[:, :d], data[:, d], probability=probability)


@dataclass(frozen=True)
class Axis:
    lower: float
    upper: float
    cells: int

    @property
    def h(self):
        return (self.upper - self.lower) / self.cells

    def centers(self):
        return self.lower + (np.arange(self.cells) + 0.5) * self.h

    def edges(self):
        return np.linspace(self.lower, self.upper, self.cells + 1)


class GridDensity:
    """Cell-averaged density on a uniform tensor grid.

    ``values`` has shape ``(n_1, ..., n_d)``; the first axis varies slowest
    in the flattened (row-major) order used for dumps.
    """

    def __init__(self, axes, values, probability=False):
        self.axes = tuple(a if isinstance(a, Axis) else Axis(float(a[0]), float(a[1]), int(a[2]))
                          for a in axes)
        vals = np.asarray(values, dtype=float).reshape([a.cells for a in self.axes])
        if not np.all(np.isfinite(vals)):
            raise MeasureError("density values must be finite")
        if np.any(vals < 0):
            raise MeasureError("density values must be nonnegative")
        self.values = vals
        self.values.setflags(write=False)
        if probability and abs(self.mass - 1.0) > GRID_MASS_TOL:
            raise MeasureError(f"probability density has mass {self.mass!r}")

    @property
    def dim(self):
        return len(self.axes)

    @property
    def cell_volume(self):
        return float(np.prod([a.h for a in self.axes]))

    @property
    def mass(self):
        return float(np.sum(self.values) * self.cell_volume)

    @property
    def is_empty(self):
        return self.mass <= 0.0

    @property
    def size(self):
        return self.values.size

    def centers(self):
        mesh = np.meshgrid(*[a.centers() for a in self.axes], indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def atoms(self):
        """Cell centres with weights ``value * cell volume`` (midpoint rule)."""
        return self.centers(), self.values.reshape(-1) * self.cell_volume

    def is_probability(self, tol=GRID_MASS_TOL):
        return abs(self.mass - 1.0) <= tol

    def to_discrete(self, drop_zero=True):
        pts, w = self.atoms()
        if drop_zero:
            keep = w > 0
            pts, w = pts[keep], w[keep]
        return DiscreteMeasure(pts, np.minimum(w, 1.0), allow_empty=True)

    def __repr__(self):
        shape = "x".join(str(a.cells) for a in self.axes)
        return f"GridDensity({shape}, mass={self.mass:.12g})"

    @classmethod
    def from_pdf(cls, pdf, axes, normalize=True):
        """Sample ``pdf`` (on an ``(N, d)`` array) at cell centres."""
        probe = cls(axes, np.zeros([int(a[2]) if not isinstance(a, Axis) else a.cells
                                    for a in axes]))
        vals = np.asarray(pdf(probe.centers()), dtype=float).reshape(probe.values.shape)
        if normalize:
            vals = vals / (np.sum(vals) * probe.cell_volume)
        return cls(probe.axes, vals, probability=normalize)

    def to_json(self) -> str:
        return json.dumps({
            "axes": [{"lower": a.lower, "upper": a.upper, "cells": a.cells} for a in self.axes],
            "values": [float(v) for v in self.values.reshape(-1)],
        })

    @classmethod
    def from_json(cls, text: str, probability=False):
        obj = json.loads(text)
        axes = [Axis(float(a["lower"]), float(a["upper"]), int(a["cells"])) for a in obj["axes"]]
        return cls(axes, np.asarray(obj["values"], dtype=float), probability=probability)


Measure = DiscreteMeasure | GridDensity


def atoms_of(mu):
    if isinstance(mu, (DiscreteMeasure, GridDensity)):
        return mu.atoms()
    raise TypeError(f"not a measure: {mu!r}")


# --------------------------------------------------------------------------
# functionals

def moment(mu, p: float, kind: str = "abs", index: int = 0, require_probability=False) -> float:
    """Moment functional of ``mu``.

    ``kind`` is ``"abs"`` for the integral of ``|x|^p`` (Euclidean norm),
    ``"radial"`` for ``|x - mean|^p`` and ``"component"`` for ``x_i^p``.
    Grid densities use the midpoint rule.
    """
    if p < 0:
        raise MeasureError("moment order must be nonnegative")
    if require_probability and not mu.is_probability():
        raise MeasureError(f"expected a probability measure, mass is {mu.mass!r}")
    pts, w = atoms_of(mu)
    if kind == "abs":
        base = np.linalg.norm(pts, axis=1)
    elif kind == "radial":
        mass = float(np.sum(w))
        if mass <= 0:
            return 0.0
        base = np.linalg.norm(pts - (w @ pts) / mass, axis=1)
    elif kind == "component":
        if not 0 <= index < pts.shape[1]:
            raise MeasureError(f"component {index + 1} out of range for dim {pts.shape[1]}")
        base = pts[:, index]
        if float(p) != int(p) and np.any(base < 0):
            raise MeasureError("non-integer component moment of a signed coordinate")
    else:
        raise MeasureError(f"unknown moment kind {kind!r}")
    return float(np.sum(w * np.power(base, float(p))))


def lyapunov_integral(mu, V) -> float:
    """Integral of ``V`` against ``mu``; raises naming the first non-finite point."""
    V = as_function(V, mu.dim)
    pts, w = atoms_of(mu)
    vals = V.value(pts, mu) if V.depends_on_measure else V.value(pts)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise NonFiniteValueError(f"V is not finite at support point {pts[np.argmax(bad)].tolist()}")
    return float(np.sum(w * vals))


def in_PR(mu, V, R) -> bool:
    return lyapunov_integral(mu, V) <= R


@dataclass
class MeasureClassConfig:
    """The class of probability measures with ``integral V <= R``."""
    V: ScalarFunction
    R: float

    def __post_init__(self):
        if self.R < 0:
            raise MeasureError("R must be nonnegative")

    def validate(self, box=8.0, samples=2001):
        d = self.V.dim
        t = np.linspace(-box, box, samples)
        line = np.zeros((samples, d))
        line[:, 0] = t
        if np.any(self.V.value(line) < 0):
            raise MeasureError("V takes negative values")
        corners = np.array(np.meshgrid(*[[-box, box]] * d, indexing="ij")).reshape(d, -1).T
        if np.min(self.V.value(corners)) <= float(self.V.value(np.zeros((1, d)))[0]):
            raise MeasureError("V does not grow from the origin to the domain corners")

    def contains(self, mu) -> bool:
        return in_PR(mu, self.V, self.R)


# --------------------------------------------------------------------------
# distances

def _quantile_distance(x, wx, y, wy, p):
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx, y, wy = x[ox], wx[ox] / np.sum(wx), y[oy], wy[oy] / np.sum(wy)
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    levels = np.union1d(cx, cy)
    lengths = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - 0.5 * lengths
    ix = np.minimum(np.searchsorted(cx, mid, side="left"), len(x) - 1)
    iy = np.minimum(np.searchsorted(cy, mid, side="left"), len(y) - 1)
    cost = np.abs(x[ix] - y[iy]) ** p
    return float(np.sum(lengths * cost)) ** (1.0 / p)


def wasserstein_1d(mu, nu, p: float = 1.0) -> float:
    """p-Wasserstein distance on the line through the monotone (quantile) coupling."""
    if p < 1:
        raise MeasureError("p must be at least 1")
    if mu.dim != 1 or nu.dim != 1:
        raise UnsupportedDimensionError("wasserstein_1d needs one-dimensional measures; "
                                        "use marginal_distance in higher dimension")
    (x, wx), (y, wy) = atoms_of(mu), atoms_of(nu)
    keepx, keepy = wx > 0, wy > 0
    return _quantile_distance(x[keepx, 0], wx[keepx], y[keepy, 0], wy[keepy], p)


def marginal_w1(mu, nu) -> float:
    """Largest W1 distance between coordinate marginals."""
    (x, wx), (y, wy) = atoms_of(mu), atoms_of(nu)
    if x.shape[1] != y.shape[1]:
        raise MeasureError("dimension mismatch")
    kx, ky = wx > 0, wy > 0
    return max(_quantile_distance(x[kx, i], wx[kx], y[ky, i], wy[ky], 1.0)
               for i in range(x.shape[1]))


def marginal_distance(mu, nu, V) -> float:
    """Stopping metric: max marginal W1 plus the gap of the V-moments."""
    return marginal_w1(mu, nu) + abs(lyapunov_integral(mu, V) - lyapunov_integral(nu, V))


def v_weak_gap(mu, nu, V, test_fns, growth_tol=None) -> float:
    """Largest ``|int f dmu - int f dnu|`` over a battery of test functions.

    With ``growth_tol`` set, every ``f`` is checked to satisfy
    ``|f| <= growth_tol * V`` on both supports.
    """
    test_fns = list(test_fns)
    if not test_fns:
        raise MeasureError("empty test battery")
    V = as_function(V, mu.dim)
    (x, wx), (y, wy) = atoms_of(mu), atoms_of(nu)
    gap = 0.0
    for f in test_fns:
        f = as_function(f, mu.dim)
        fx, fy = f.value(x), f.value(y)
        if growth_tol is not None:
            for pts, vals in ((x, fx), (y, fy)):
                if np.any(np.abs(vals) > growth_tol * V.value(pts) + 1e-12):
                    raise MeasureError(f"{f!r} is not dominated by V on the support")
        gap = max(gap, abs(float(np.sum(wx * fx)) - float(np.sum(wy * fy))))
    return gap


# --------------------------------------------------------------------------
# mixtures

def mixture(mu, nu, theta: float, max_atoms=None):
    """``(1 - theta) mu + theta nu``.

    Grids on identical axes blend values.  Discrete measures concatenate
    atoms; with ``max_atoms`` the result is thinned by deterministic
    systematic resampling.
    """
    if not 0.0 <= theta <= 1.0:
        raise MeasureError("theta must lie in [0, 1]")
    if isinstance(mu, GridDensity) and isinstance(nu, GridDensity) and mu.axes == nu.axes:
        return GridDensity(mu.axes, (1 - theta) * mu.values + theta * nu.values)
    (x, wx), (y, wy) = atoms_of(mu), atoms_of(nu)
    pts = np.concatenate([x, y])
    w = np.concatenate([(1 - theta) * wx, theta * wy])
    keep = w > 0
    pts, w = pts[keep], w[keep]
    if max_atoms is not None and pts.shape[0] > max_atoms:
        pts, w = systematic_resample(pts, w, max_atoms)
    return DiscreteMeasure(pts, w)


def systematic_resample(points, weights, n):
    """Deterministic systematic resampling to ``n`` equally weighted atoms."""
    mass = float(np.sum(weights))
    c = np.cumsum(weights) / mass
    c[-1] = 1.0
    u = (np.arange(n) + 0.5) / n
    idx = np.searchsorted(c, u, side="left")
    return points[idx], np.full(n, mass / n)


# --------------------------------------------------------------------------
# truncation

@dataclass
class TruncationScheme:
    """Cutoff of radius ``n`` (1 on the ball ``B_n``, 0 outside ``B_{n+1}``) with rate and weight."""
    n: float
    Lambda: float
    V: ScalarFunction
    dim: int = 1
    cutoff: ScalarFunction = field(default=None)

    def __post_init__(self):
        if self.n <= 0:
            raise MeasureError("n must be positive")
        if self.Lambda <= 0:
            raise MeasureError("Lambda must be positive")
        self.V = as_function(self.V, self.dim)
        if self.cutoff is None:
            self.cutoff = Cutoff(self.n, self.dim)


def mass_defect(mu, scheme: TruncationScheme) -> float:
    pts, w = atoms_of(mu)
    return float(np.sum(w * scheme.cutoff.value(pts)))


def compensate_truncate(mu, scheme: TruncationScheme, subprobability=False) -> DiscreteMeasure:
    """``phi_n mu + (1 - I) delta_0`` with ``I = int phi_n dmu``; without the atom if ``subprobability``."""
    pts, w = atoms_of(mu)
    phi = scheme.cutoff.value(pts)
    wn = w * phi
    keep = wn > 0
    pts, wn = pts[keep], wn[keep]
    if subprobability:
        return DiscreteMeasure(pts, wn, allow_empty=True)
    atom = 1.0 - float(np.sum(wn))
    pts = np.concatenate([pts, np.zeros((1, mu.dim))])
    wn = np.concatenate([wn, [max(atom, 0.0)]])
    return DiscreteMeasure(pts, wn, probability=mu.is_probability())


# --------------------------------------------------------------------------
# projections and kernel density

@dataclass
class ProjectionWindow:
    """Split ``x = (y, z)`` at ``m``; cutoff ``eta`` in ``z``; cube ``K_y`` for norms.

    ``K_y`` and ``Q_y`` are given as ``(lower, upper)`` arrays of length
    ``m``; ``Q_z`` bounds the support of ``eta``.
    """
    m: int
    K_y: tuple
    eta: ScalarFunction | None = None
    Q_y: tuple | None = None
    Q_z: tuple | None = None
    r: float = 2.0
    S: float = 10.0

    def __post_init__(self):
        if self.m < 1:
            raise MeasureError("m must be at least 1")
        if self.r <= 1:
            raise MeasureError("r must exceed 1")
        lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in self.K_y)
        if lo.shape != (self.m,) or hi.shape != (self.m,) or np.any(hi <= lo):
            raise MeasureError("K_y must be a nondegenerate cube in R^m")
        self.K_y = (lo, hi)
        if self.Q_y is not None:
            qlo, qhi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in self.Q_y)
            if np.any(qlo >= lo) or np.any(qhi <= hi):
                raise MeasureError("K_y must lie in the interior of Q_y")
            self.Q_y = (qlo, qhi)

    def margin(self):
        if self.Q_y is None:
            return np.inf
        return float(min(np.min(self.K_y[0] - self.Q_y[0]), np.min(self.Q_y[1] - self.K_y[1])))


def project_y(mu, window: ProjectionWindow) -> DiscreteMeasure:
    """Push ``eta(z) mu`` forward to the first ``m`` coordinates."""
    pts, w = atoms_of(mu)
    d = pts.shape[1]
    if window.m >= d:
        raise MeasureError(f"projection needs m < d (m={window.m}, d={d})")
    z = pts[:, window.m:]
    eta = np.ones(len(w)) if window.eta is None else window.eta.value(z)
    if np.any((eta < 0) | (eta > 1)):
        raise MeasureError("eta must take values in [0, 1]")
    wy = w * eta
    keep = wy > 0
    if not np.any(keep):
        return DiscreteMeasure(np.zeros((1, window.m)), [0.0], allow_empty=True)
    return DiscreteMeasure(pts[keep, :window.m], wy[keep], allow_empty=True)


def silverman_bandwidth(mu) -> float:
    """Silverman's rule with the effective sample size ``1 / sum(w^2)`` of the normalised weights."""
    pts, w = atoms_of(mu)
    w = w / np.sum(w)
    n_eff = 1.0 / np.sum(w * w)
    m = pts.shape[1]
    mean = w @ pts
    sd = np.sqrt(np.maximum(w @ (pts - mean) ** 2, 0.0))
    q = []
    for i in range(m):
        o = np.argsort(pts[:, i])
        c = np.cumsum(w[o])
        q75 = pts[o, i][min(np.searchsorted(c, 0.75), len(c) - 1)]
        q25 = pts[o, i][min(np.searchsorted(c, 0.25), len(c) - 1)]
        q.append((q75 - q25) / 1.349)
    spread = np.array([min(s, iq) if iq > 0 else s for s, iq in zip(sd, q)])
    spread = float(np.mean(spread)) if np.any(spread > 0) else 1.0
    if m == 1:
        return 0.9 * spread * n_eff ** (-0.2)
    return spread * (4.0 / ((m + 2) * n_eff)) ** (1.0 / (m + 4))


def kde_lr_norm(mu_y, K_y, r: float, bandwidth: float | None = None, cells_per_dim=None,
                backend=None) -> float:
    """L^r norm over the cube ``K_y`` of a Gaussian kernel estimate of the density of ``mu_y``.

    The estimate keeps the total mass of ``mu_y`` (sub-probability inputs
    give sub-probability densities).  The integral uses the midpoint rule
    on ``cells_per_dim`` cells per axis (default 400 for m = 1, 120 for
    m = 2, 40 above).
    """
    if r <= 1:
        raise MeasureError("r must exceed 1")
    pts, w = atoms_of(mu_y)
    if float(np.sum(w)) <= 0:
        raise MeasureError("zero total weight")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(mu_y)
    if bandwidth <= 0:
        raise MeasureError("bandwidth must be positive")
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in K_y)
    m = pts.shape[1]
    if lo.shape != (m,):
        raise MeasureError("K_y dimension does not match the measure")
    n = cells_per_dim or {1: 400, 2: 120}.get(m, 40)
    grid = GridDensity([(lo[i], hi[i], n) for i in range(m)], np.zeros([n] * m))
    dens = kernels.kde_grid(pts, w, grid.centers(), bandwidth, backend=backend)
    return float(np.sum(dens ** r) * grid.cell_volume) ** (1.0 / r)
