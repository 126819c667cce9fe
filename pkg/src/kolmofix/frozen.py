"""Linear stationary problems with the measure frozen in the coefficients.

Three backends produce a probability solution of ``L*_sigma mu = 0``:

* ``solve_1d_closed``: integrating factor, 1-D, non-degenerate only;
* ``solve_grid_fv``: exponentially fitted finite volumes, 1-D and 2-D,
  zero-flux walls, upwinding where the diffusion vanishes;
* ``solve_ergodic``: Euler-Maruyama particles, time-averaged after a
  burn-in, any dimension and any degeneracy.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import cumulative_trapezoid
from scipy.special import expm1

from . import kernels
from .functions import hermite_bump_battery
from .lyapunov import apply_generator
from .measure import Axis, DiscreteMeasure, GridDensity, atoms_of, systematic_resample

log = logging.getLogger(__name__)


class FrozenSolveError(RuntimeError):
    pass


class DegenerateCoefficientError(FrozenSolveError):
    pass


class NegativeDensityError(FrozenSolveError):
    pass


class TrajectoryBlowUpError(FrozenSolveError):
    def __init__(self, message, time, witness):
        super().__init__(message)
        self.time = time
        self.witness = witness


class NonPSDError(FrozenSolveError):
    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


@dataclass
class FrozenProblem:
    field: object
    sigma: object
    domain: tuple = None          # (lower, upper), scalars or length-d arrays
    boundary: str = "zero-flux"

    def __post_init__(self):
        d = self.field.dim
        if self.domain is None:
            self.domain = (-8.0, 8.0)
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy() for v in self.domain)
        if np.any(hi <= lo):
            raise FrozenSolveError("empty domain")
        self.domain = (lo, hi)
        if self.boundary != "zero-flux":
            raise FrozenSolveError(f"unsupported boundary {self.boundary!r}")

    def axes(self, cells):
        cells = np.broadcast_to(np.asarray(cells, dtype=int), (self.field.dim,))
        return [Axis(float(self.domain[0][i]), float(self.domain[1][i]), int(cells[i]))
                for i in range(self.field.dim)]


@dataclass
class SdeConfig:
    dt: float = 1e-3
    T: float = 200.0
    burn_in: float = 20.0
    n_particles: int = 10_000
    seed: int = 0
    n_snapshots: int = 100
    guard: float = 1e6

    def __post_init__(self):
        if self.dt <= 0 or self.T <= 0:
            raise FrozenSolveError("dt and T must be positive")
        if not 0 <= self.burn_in < self.T:
            raise FrozenSolveError("burn_in must lie in [0, T)")
        if self.dt > self.T / 100:
            raise FrozenSolveError("dt must not exceed T/100")
        if self.n_particles < 1 or self.n_snapshots < 1:
            raise FrozenSolveError("need at least one particle and one snapshot")

    @classmethod
    def with_env_seed(cls, **kw):
        """Config whose seed is overridden by ``KOLMOFIX_SEED`` when set."""
        env = os.environ.get("KOLMOFIX_SEED")
        if env is not None and env.strip():
            kw["seed"] = int(env)
        return cls(**kw)


# --------------------------------------------------------------------------
# closed form

def solve_1d_closed(problem: FrozenProblem, cells=400, tol=1e-12) -> GridDensity:
    """``rho ~ exp(int_0^x b/a) / a`` sampled at cell centres and normalised."""
    fld = problem.field
    if fld.dim != 1:
        raise FrozenSolveError("solve_1d_closed is one-dimensional")
    (axis,) = problem.axes(cells)
    x = axis.centers()
    A, B = fld.coefficients(x[:, None], problem.sigma)
    a, b = A[:, 0, 0], B[:, 0]
    if np.min(a) <= tol:
        i = int(np.argmin(a))
        raise DegenerateCoefficientError(
            f"a = {a[i]:.3g} at x = {x[i]:.6g}: the closed form needs a > 0 on the domain; "
            "use solve_grid_fv or solve_ergodic")
    phi = cumulative_trapezoid(b / a, x, initial=0.0)
    i0 = int(np.argmin(np.abs(x)))
    logr = phi - phi[i0] - np.log(a)
    rho = np.exp(logr - np.max(logr))
    rho /= np.sum(rho) * axis.h
    return GridDensity([axis], rho, probability=True)


# --------------------------------------------------------------------------
# finite volumes

def bernoulli(s):
    """``s / (exp(s) - 1)`` with the removable singularity at 0."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-8
    safe = np.where(small, 1.0, s)
    with np.errstate(over="ignore"):
        out = safe / expm1(safe)
    return np.where(small, 1.0 - 0.5 * s, out)


def _face_coefficients(D, v, h, diff_tol):
    """Flux ``F = c1 rho_left - c2 rho_right`` across a face (per unit area)."""
    live = D > diff_tol
    Dsafe = np.where(live, D, 1.0)
    pe = np.where(live, v * h / Dsafe, 0.0)
    c1 = np.where(live, Dsafe / h * bernoulli(-pe), np.maximum(v, 0.0))
    c2 = np.where(live, Dsafe / h * bernoulli(pe), np.maximum(-v, 0.0))
    return c1, c2, live, pe


def _assemble_faces(fld, sigma, axes, diff_tol):
    """Face data for each axis: (left index, right index, c1, c2, live, pe)."""
    d = len(axes)
    shape = tuple(a.cells for a in axes)
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    centers_1d = [a.centers() for a in axes]
    mesh = np.meshgrid(*centers_1d, indexing="ij")
    centers = np.stack([g.reshape(-1) for g in mesh], axis=1)
    A_c, _ = fld.coefficients(centers, sigma)
    off = A_c.copy()
    off[:, np.arange(d), np.arange(d)] = 0.0
    if np.max(np.abs(off), initial=0.0) > 1e-14:
        raise FrozenSolveError("finite volumes support diagonal diffusion only")
    faces = []
    for k in range(d):
        if shape[k] < 2:
            continue
        h = axes[k].h
        sl_l = [slice(None)] * d
        sl_r = [slice(None)] * d
        sl_l[k] = slice(0, shape[k] - 1)
        sl_r[k] = slice(1, shape[k])
        left = idx[tuple(sl_l)].reshape(-1)
        right = idx[tuple(sl_r)].reshape(-1)
        xf = 0.5 * (centers[left] + centers[right])
        A_f, B_f = fld.coefficients(xf, sigma)
        D = A_f[:, k, k]
        if np.any(D < -1e-10):
            raise FrozenSolveError(f"negative diffusion {D.min():.3g} on a face")
        D = np.maximum(D, 0.0)
        v = B_f[:, k] - (A_c[right, k, k] - A_c[left, k, k]) / h
        c1, c2, live, pe = _face_coefficients(D, v, h, diff_tol)
        faces.append((k, left, right, c1, c2, live, pe))
    return centers, faces


def _chain_1d(c1, c2, live, pe, n):
    """Zero-flux chain ``rho_{i+1} / rho_i = c1 / c2`` solved in log space."""
    inc = np.empty(n - 1)
    inc[live] = pe[live]
    dead = ~live
    with np.errstate(divide="ignore", invalid="ignore"):
        inc[dead] = np.log(c1[dead]) - np.log(c2[dead])
    inc[np.isnan(inc)] = 0.0                # uncoupled faces: arbitrary choice
    # infinite increments split the line into segments; mass sits on the
    # segments reached by the most +inf and fewest -inf jumps
    level = np.concatenate([[0], np.cumsum(np.where(np.isposinf(inc), 1,
                                                    np.where(np.isneginf(inc), -1, 0)))])
    finite = np.where(np.isfinite(inc), inc, 0.0)
    logr = np.concatenate([[0.0], np.cumsum(finite)])
    top = level == level.max()
    out = np.zeros(n)
    seg_start = np.flatnonzero(top & ~np.concatenate([[False], top[:-1]]))
    for s in seg_start:
        e = s
        while e + 1 < n and top[e + 1] and np.isfinite(inc[e]):
            e += 1
        seg = logr[s:e + 1]
        vals = np.exp(seg - seg.max())
        out[s:e + 1] = vals / vals.sum() / len(seg_start)
    return out


def solve_grid_fv(problem: FrozenProblem, cells=400, diff_tol=1e-14,
                  negative_tol=1e-10) -> GridDensity:
    """Stationary zero-flux finite-volume solution with Scharfetter-Gummel fluxes.

    Faces with vanishing diffusion use pure upwinding of the effective
    drift ``b - da/dx``.  A killing rate (truncated operators) removes
    mass in proportion to the rate and returns it in the cell containing
    the origin.
    """
    fld = problem.field
    d = fld.dim
    if d not in (1, 2):
        raise FrozenSolveError("finite volumes are implemented for d = 1 and d = 2")
    axes = problem.axes(cells)
    shape = tuple(a.cells for a in axes)
    n = int(np.prod(shape))
    vol = float(np.prod([a.h for a in axes]))
    centers, faces = _assemble_faces(fld, problem.sigma, axes, diff_tol)
    kill = fld.kill_rate(centers, problem.sigma)
    if d == 1 and kill is None:
        if faces:
            _, _, _, c1, c2, live, pe = faces[0]
            rho = _chain_1d(c1, c2, live, pe, n)
        else:
            rho = np.ones(1)
        rho = rho / (np.sum(rho) * vol)
        return GridDensity(axes, rho, probability=True)

    rows, cols, vals = [], [], []
    for k, left, right, c1, c2, live, pe in faces:
        area = vol / axes[k].h
        a1, a2 = area * c1, area * c2
        rows += [left, left, right, right]
        cols += [left, right, left, right]
        vals += [-a1, a2, a1, -a2]
    origin = int(np.argmin(np.sum(centers ** 2, axis=1)))
    if kill is not None:
        kv = np.broadcast_to(np.asarray(kill, dtype=float), (n,)) * vol
        ar = np.arange(n)
        rows += [ar, np.full(n, origin)]
        cols += [ar, ar]
        vals += [-kv, kv]
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tolil()
    M[origin, :] = vol
    rhs = np.zeros(n)
    rhs[origin] = 1.0
    lu = spla.splu(M.tocsc())
    rho = lu.solve(rhs)
    if not np.all(np.isfinite(rho)):
        raise FrozenSolveError("finite-volume linear solve failed (singular system)")
    Mr = M.tocsr()
    rho = rho + lu.solve(rhs - Mr @ rho)        # one step of iterative refinement
    resid = np.linalg.norm(Mr @ rho - rhs)
    if resid > 1e-6 * max(1.0, np.linalg.norm(rho)):
        raise FrozenSolveError(f"finite-volume linear solve did not converge (residual {resid:.3g})")
    scale = float(np.max(np.abs(rho)))
    if rho.min() < -negative_tol * max(scale, 1.0):
        i = int(np.argmin(rho))
        raise NegativeDensityError(
            f"negative density {rho[i]:.3g} at {centers[i].tolist()} (max {scale:.3g})")
    rho = np.maximum(rho, 0.0)
    rho /= np.sum(rho) * vol
    return GridDensity(axes, rho.reshape(shape), probability=True)


# --------------------------------------------------------------------------
# particles

class ParticleMeasure(DiscreteMeasure):
    """Equal-weight snapshot cloud, particle-major, with Monte Carlo error estimates."""

    def __init__(self, points, n_particles, n_snapshots):
        super().__init__(points, np.full(points.shape[0], 1.0 / points.shape[0]))
        self.n_particles = n_particles
        self.n_snapshots = n_snapshots

    def std_error(self, f) -> float:
        """Standard error of ``int f dmu`` from the spread of per-particle time averages.

        ``f`` maps an ``(N, d)`` array to ``(N,)``.
        """
        vals = np.asarray(f(self.points), dtype=float).reshape(self.n_particles, self.n_snapshots)
        per = vals.mean(axis=1)
        if self.n_particles < 2:
            return float("nan")
        return float(per.std(ddof=1) / math.sqrt(self.n_particles))


def initial_cloud(sigma, n, dim):
    if sigma is None:
        return np.zeros((n, dim))
    pts, w = atoms_of(sigma)
    if pts.shape[0] == n and np.allclose(w, w[0]):
        return np.array(pts)
    return systematic_resample(pts, w, n)[0]


def gaussian_cloud(n, dim, seed=0, scale=1.0, symmetric=True) -> DiscreteMeasure:
    """Equal-weight normal sample; with ``symmetric`` it is closed under ``x -> -x``."""
    half = (n + 1) // 2 if symmetric else n
    z = kernels.stream_normals(seed, half, dim) * scale
    if symmetric:
        z = np.concatenate([z, -z])[:n]
        if n % 2:
            z[half - 1] = 0.0
    return DiscreteMeasure(z, np.full(n, 1.0 / n))


def snapshot_steps(cfg: SdeConfig):
    n_steps = int(round(cfg.T / cfg.dt))
    burn = int(round(cfg.burn_in / cfg.dt))
    span = n_steps - burn
    k = min(cfg.n_snapshots, span)
    steps = burn + np.round(np.arange(1, k + 1) * span / k).astype(np.int64)
    return n_steps, np.unique(steps)


def solve_ergodic(problem: FrozenProblem, cfg: SdeConfig, x0=None, backend=None) -> ParticleMeasure:
    """Time-averaged Euler-Maruyama cloud for ``dX = b dt + sqrt(2a) dW``.

    Particles start from ``x0`` (or a deterministic resampling of the
    frozen measure).  When the field has a killing rate, a particle is
    killed with probability ``1 - exp(-rate dt)`` per step and restarted
    at the origin.
    """
    fld = problem.field
    kernel = fld.compile(problem.sigma)
    if x0 is None:
        x0 = initial_cloud(problem.sigma, cfg.n_particles, fld.dim)
    n_steps, steps = snapshot_steps(cfg)
    res = kernels.run_em(kernel, x0, cfg.dt, n_steps, steps, cfg.guard, cfg.seed, backend=backend)
    if res.status == kernels.STATUS_BLOWUP:
        t = res.fail_step * cfg.dt
        raise TrajectoryBlowUpError(
            f"particle {res.fail_particle} left |x| <= {cfg.guard:g} at t = {t:.6g}",
            t, res.witness.tolist())
    if res.status == kernels.STATUS_NONPSD:
        raise NonPSDError(f"diffusion matrix not PSD at x = {res.witness.tolist()} "
                          f"(particle {res.fail_particle}, step {res.fail_step})",
                          res.witness.tolist())
    return ParticleMeasure(res.points, res.n_particles, res.n_snapshots)


# --------------------------------------------------------------------------
# residuals

def default_battery(dim, max_degree=4, radius=4.0):
    return hermite_bump_battery(dim, max_degree, radius)


def weak_residual(mu, fld, sigma=None, battery=None, per_function=False):
    """``max_u |int L_sigma u dmu|`` over a battery of compactly supported test functions.

    ``sigma`` defaults to ``mu`` (the residual of the nonlinear equation).
    """
    if battery is None:
        battery = default_battery(fld.dim)
    battery = list(battery)
    if not battery:
        raise FrozenSolveError("empty test battery")
    sigma = mu if sigma is None else sigma
    pts, w = atoms_of(mu)
    A, B = fld.coefficients(pts, sigma)
    vals = []
    for u in battery:
        Lu = apply_generator(fld, sigma, u, pts, coefficients=(A, B), include_source=False)
        vals.append(abs(float(np.sum(w * Lu))))
    return vals if per_function else max(vals)
