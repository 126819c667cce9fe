"""Measure-dependent coefficient fields and checks of their regularity hypotheses.

A field supplies, at points ``X`` of shape ``(N, d)`` and a measure ``mu``,
the diffusion matrices ``A`` of shape ``(N, d, d)`` and drifts ``B`` of
shape ``(N, d)``.  The first ``m`` coordinates (``y``) are the directions
in which ``A`` is required to be non-degenerate; the rest (``z``) may
carry no noise at all.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import expr as ex
from .kernels import CoefficientKernel, build_source
from .measure import DiscreteMeasure

PSD_TOL = 1e-10


class FieldError(ValueError):
    pass


def parse_coeff(text: str) -> ex.Node:
    """Parse a coefficient expression (see :mod:`kolmofix.expr` for the grammar)."""
    return ex.parse(text)


def eval_coeff(node, x, mu=None, cache=None) -> float:
    """Value of an expression at a single point ``x`` under ``mu``."""
    if isinstance(node, str):
        node = ex.parse(node)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(ex.evaluate(node, x[None, :], mu, cache)[0])


class CoefficientField:
    """Base class for coefficient fields."""

    dim: int
    m: int
    depends_on_measure: bool = True
    diagonal: bool = False      # a is diagonal for every (x, mu)

    def coefficients(self, X, mu=None, cache=None):
        raise NotImplementedError

    def source(self, X, mu=None):
        """Term added to the generator value independently of the test function, or ``None``."""
        return None

    def kill_rate(self, X, mu=None):
        """Killing rate of the associated particle system (restart at the origin), or ``None``."""
        return None

    def noise_dims(self):
        """Coordinates whose diffusion entry is not identically zero."""
        return np.arange(self.dim)

    def compile(self, sigma) -> CoefficientKernel:
        """Freeze ``sigma`` into the coefficients and return a particle kernel."""
        return python_kernel(self, sigma)

    def check_symmetric_psd(self, X, mu=None, tol=PSD_TOL):
        A, _ = self.coefficients(X, mu)
        if not np.allclose(A, np.swapaxes(A, 1, 2), atol=1e-12, rtol=0):
            raise FieldError("diffusion matrix is not symmetric")
        lmin = np.linalg.eigvalsh(A)[:, 0]
        bad = np.flatnonzero(lmin < -tol)
        return [{"x": X[i].tolist(), "min_eigenvalue": float(lmin[i])} for i in bad]


def python_kernel(fld, sigma) -> CoefficientKernel:
    """A numpy-only particle kernel that calls ``fld.coefficients`` directly."""
    d = fld.dim

    def coeffs(x, th, a, b):
        A, B = fld.coefficients(np.ascontiguousarray(x.T), sigma)
        a[...] = np.moveaxis(A, 0, -1)
        b[...] = B.T
        rate = fld.kill_rate(np.ascontiguousarray(x.T), sigma)
        return 0.0 if rate is None else rate

    return CoefficientKernel(source="", theta=np.zeros(1), dim=d, active=fld.noise_dims(),
                             has_kill=fld.kill_rate(np.zeros((1, d)), sigma) is not None,
                             diag=bool(fld.diagonal), py_fn=coeffs)


def _matrix_of_nodes(a, dim):
    """Normalise ``a`` (nested lists, dict, or scalar for 1-D) to a symmetric node matrix."""
    if isinstance(a, (str, ex.Node.__args__)) and dim == 1:
        a = [[a]]
    if isinstance(a, dict):
        mat = [[None] * dim for _ in range(dim)]
        for (i, j), v in a.items():
            mat[i][j] = v
        a = mat
    out = [[None] * dim for _ in range(dim)]
    for i in range(dim):
        for j in range(dim):
            v = a[i][j] if i < len(a) and j < len(a[i]) else None
            if v is None:
                continue
            out[i][j] = ex.parse(v) if isinstance(v, str) else (
                ex.Const(float(v)) if isinstance(v, (int, float)) else v)
    for i in range(dim):
        for j in range(i + 1, dim):
            u, v = out[i][j], out[j][i]
            if u is None and v is not None:
                out[i][j] = v
            elif v is None and u is not None:
                out[j][i] = u
            elif u is not None and u != v:
                raise FieldError(f"a[{i + 1}][{j + 1}] and a[{j + 1}][{i + 1}] differ")
    return [[ex.ZERO if n is None else n for n in row] for row in out]


class ExprField(CoefficientField):
    """Coefficients given by expressions in the small language.

    Parameters
    ----------
    a : nested list / dict of expressions
        Diffusion matrix (symmetric; a missing entry mirrors its transpose).
    b : list of expressions
    m : int
        Number of leading coordinates with non-degenerate diffusion.
    """

    def __init__(self, a, b, m=None, dim=None):
        if isinstance(b, (str, int, float)):
            b = [b]
        dim = dim or len(b)
        self.dim = dim
        self.a_nodes = _matrix_of_nodes(a, dim)
        self.b_nodes = [ex.parse(v) if isinstance(v, str) else ex.Const(float(v)) if
                        isinstance(v, (int, float)) else v for v in b]
        if len(self.b_nodes) != dim:
            raise FieldError(f"b has {len(self.b_nodes)} entries, expected {dim}")
        for n in self._nodes():
            if ex.max_coordinate(n) >= dim:
                raise FieldError(f"{ex.to_text(n)} references a coordinate beyond dim={dim}")
        self.m = dim if m is None else int(m)
        if not 0 <= self.m <= dim:
            raise FieldError("m must lie in [0, dim]")
        self.depends_on_measure = any(ex.depends_on_measure(n) for n in self._nodes())
        self.diagonal = all(self.a_nodes[i][j] == ex.ZERO
                            for i in range(dim) for j in range(dim) if i != j)

    def _nodes(self):
        return [n for row in self.a_nodes for n in row] + self.b_nodes

    def __repr__(self):
        return f"ExprField(dim={self.dim}, m={self.m})"

    def describe(self):
        return {
            "a": [[ex.to_text(n) for n in row] for row in self.a_nodes],
            "b": [ex.to_text(n) for n in self.b_nodes],
            "m": self.m,
        }

    def noise_dims(self):
        return np.array([i for i in range(self.dim) if self.a_nodes[i][i] != ex.ZERO], dtype=np.int64)

    def coefficients(self, X, mu=None, cache=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cache = cache or ex.FunctionalCache()
        N, d = X.shape
        A = np.zeros((N, d, d))
        B = np.zeros((N, d))
        for i in range(d):
            for j in range(i, d):
                n = self.a_nodes[i][j]
                if n != ex.ZERO:
                    A[:, i, j] = A[:, j, i] = ex.evaluate(n, X, mu, cache)
            if self.b_nodes[i] != ex.ZERO:
                B[:, i] = ex.evaluate(self.b_nodes[i], X, mu, cache)
        return A, B

    def kernel_parts(self, sigma, slots=None, theta=None):
        """Source strings for the entries with functionals of ``sigma`` bound to ``th``."""
        slots = {} if slots is None else slots
        theta = [] if theta is None else theta
        cache = ex.FunctionalCache()
        for n in self._nodes():
            for fnode in ex.functionals(n):
                if fnode not in slots:
                    slots[fnode] = len(theta)
                    theta.append(ex.evaluate_functional(fnode, sigma, cache))
        a_src = {}
        for i in range(self.dim):
            for j in range(i, self.dim):
                if self.a_nodes[i][j] != ex.ZERO:
                    a_src[(i, j)] = ex.to_source(self.a_nodes[i][j], slots)
        b_src = [None if n == ex.ZERO else ex.to_source(n, slots) for n in self.b_nodes]
        return a_src, b_src, slots, theta

    def compile(self, sigma) -> CoefficientKernel:
        try:
            a_src, b_src, _, theta = self.kernel_parts(sigma)
        except ex.NotCompilableError:
            return python_kernel(self, sigma)
        th = np.asarray(theta if theta else [0.0], dtype=float)
        return CoefficientKernel(build_source(a_src, b_src), th, self.dim, self.noise_dims(),
                                 diag=self.diagonal)


class CallableField(CoefficientField):
    """Coefficients from Python callables ``a(X, mu) -> (N, d, d)`` and ``b(X, mu) -> (N, d)``."""

    def __init__(self, a, b, dim, m=None, depends_on_measure=True, noise_dims=None, diagonal=False):
        self._a, self._b = a, b
        self.dim = dim
        self.m = dim if m is None else m
        self.depends_on_measure = depends_on_measure
        self._noise = None if noise_dims is None else np.asarray(noise_dims, dtype=np.int64)
        self.diagonal = diagonal

    def noise_dims(self):
        return np.arange(self.dim) if self._noise is None else self._noise

    def coefficients(self, X, mu=None, cache=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.asarray(self._a(X, mu), dtype=float).reshape(X.shape[0], self.dim, self.dim)
        B = np.asarray(self._b(X, mu), dtype=float).reshape(X.shape[0], self.dim)
        return A, B


# --------------------------------------------------------------------------
# hypothesis checks

@dataclass
class AssumptionReport:
    name: str
    passed: bool
    lambda_est: float | None = None
    sup_bound_est: float | None = None
    modulus_samples: list = field(default_factory=list)
    envelope: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    n_measures: int = 0
    n_points: int = 0

    def to_dict(self):
        return asdict(self)


def _cube(K, dim):
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (dim,)).copy() for v in K)
    if np.any(hi < lo):
        raise FieldError("cube bounds are inverted")
    return lo, hi


def cube_grid(K, dim, resolution=21):
    lo, hi = _cube(K, dim)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def _measures(measures, fld):
    if measures is None or len(measures) == 0:
        return [DiscreteMeasure.dirac(np.zeros(fld.dim))]
    return list(measures)


def _safe_coefficients(fld, X, mu):
    try:
        A, B = fld.coefficients(X, mu)
    except ex.CoeffEvaluationError as err:
        return None, None, str(err)
    return A, B, None


def check_H11(fld, K, measures=None, resolution=21, tol=1e-12) -> AssumptionReport:
    """Smallest eigenvalue of the leading ``m x m`` diffusion block over a cube and measures."""
    rep = AssumptionReport("H1.1", True)
    if fld.m == 0:
        rep.notes.append("m = 0: no non-degenerate block, condition holds trivially")
        return rep
    X = cube_grid(K, fld.dim, resolution)
    measures = _measures(measures, fld)
    rep.n_measures, rep.n_points = len(measures), X.shape[0]
    lam = np.inf
    for k, mu in enumerate(measures):
        A, _, err = _safe_coefficients(fld, X, mu)
        if err:
            rep.violations.append({"measure": k, "error": err})
            rep.passed = False
            continue
        full = np.linalg.eigvalsh(A)[:, 0]
        for i in np.flatnonzero(full < -PSD_TOL)[:5]:
            rep.violations.append({"measure": k, "x": X[i].tolist(), "kind": "not PSD",
                                   "min_eigenvalue": float(full[i])})
        block = np.linalg.eigvalsh(A[:, :fld.m, :fld.m])[:, 0]
        i = int(np.argmin(block))
        if block[i] < lam:
            lam = float(block[i])
            witness = {"measure": k, "x": X[i].tolist(), "min_eigenvalue": lam}
    rep.lambda_est = None if not np.isfinite(lam) else lam
    if rep.lambda_est is not None and rep.lambda_est <= tol:
        rep.violations.append(dict(witness, kind="degenerate block"))
    rep.passed = not rep.violations
    return rep


def check_H12(fld, K, measures=None, resolution=21) -> AssumptionReport:
    """Sup over the cube and measures of ``max|a_ij| + max|b_i|``."""
    rep = AssumptionReport("H1.2", True)
    X = cube_grid(K, fld.dim, resolution)
    measures = _measures(measures, fld)
    rep.n_measures, rep.n_points = len(measures), X.shape[0]
    sup = 0.0
    for k, mu in enumerate(measures):
        A, B, err = _safe_coefficients(fld, X, mu)
        if err:
            rep.violations.append({"measure": k, "error": err})
            continue
        size = np.max(np.abs(A), axis=(1, 2)) + np.max(np.abs(B), axis=1)
        bad = ~np.isfinite(size)
        if np.any(bad):
            rep.violations.append({"measure": k, "x": X[np.argmax(bad)].tolist(),
                                   "kind": "non-finite coefficient"})
            continue
        sup = max(sup, float(np.max(size)))
    rep.sup_bound_est = sup
    rep.passed = not rep.violations
    return rep


def _coefficient_gap(fld, P, Q, mu):
    A1, B1 = fld.coefficients(P, mu)
    A2, B2 = fld.coefficients(Q, mu)
    return np.maximum(np.max(np.abs(A1 - A2), axis=(1, 2)), np.max(np.abs(B1 - B2), axis=1))


def check_H13(fld, K, measures=None, pair_budget=2000, seed=0, n_bins=32,
              refine_pairs=16, refine_levels=30, jump_tol=1e-6) -> AssumptionReport:
    """Empirical modulus of continuity in ``z`` at fixed ``y``.

    Random pairs ``(y, z), (y, z')`` in the cube are binned on a log scale
    of ``|z - z'|``; the pairs with the largest gaps are then bisected
    (keeping the half with the larger gap) so that small scales are
    sampled where the coefficients vary most.  The envelope is the running
    maximum of the per-bin maxima.  A value above ``jump_tol`` (scaled by
    the sup bound) in the smallest bin is reported as a discontinuity.
    """
    rep = AssumptionReport("H1.3", True)
    d, m = fld.dim, fld.m
    if m >= d:
        rep.notes.append("no degenerate z-block: modulus in z is vacuous")
        return rep
    lo, hi = _cube(K, d)
    rng = np.random.default_rng(seed)
    measures = _measures(measures, fld)
    rep.n_measures = len(measures)
    diam = float(np.linalg.norm(hi[m:] - lo[m:]))
    if diam <= 0:
        rep.notes.append("cube has empty z-extent")
        return rep
    h_min = diam * 2.0 ** (-refine_levels)
    edges = np.geomspace(h_min, diam, n_bins + 1)
    per_measure = max(1, pair_budget // len(measures))
    dist_all, gap_all = [], []
    sup = 1.0
    for k, mu in enumerate(measures):
        P = rng.uniform(lo, hi, size=(per_measure, d))
        Q = P.copy()
        Q[:, m:] = rng.uniform(lo[m:], hi[m:], size=(per_measure, d - m))
        try:
            gap = _coefficient_gap(fld, P, Q, mu)
            A, B = fld.coefficients(P, mu)
        except ex.CoeffEvaluationError as err:
            rep.violations.append({"measure": k, "error": str(err)})
            continue
        sup = max(sup, float(np.max(np.abs(A))), float(np.max(np.abs(B))))
        dist = np.linalg.norm(P[:, m:] - Q[:, m:], axis=1)
        dist_all.append(dist)
        gap_all.append(gap)
        # bisection refinement from the worst pairs
        order = np.argsort(-gap, kind="stable")[:refine_pairs]
        p, q = P[order].copy(), Q[order].copy()
        for _ in range(refine_levels):
            mid = 0.5 * (p + q)
            g1 = _coefficient_gap(fld, p, mid, mu)
            g2 = _coefficient_gap(fld, mid, q, mu)
            left = g1 >= g2
            q = np.where(left[:, None], mid, q)
            p = np.where(left[:, None], p, mid)
            dist_all.append(np.linalg.norm(p[:, m:] - q[:, m:], axis=1))
            gap_all.append(np.maximum(g1, g2))
    if not dist_all:
        rep.passed = False
        return rep
    dist = np.concatenate(dist_all)
    gap = np.concatenate(gap_all)
    order = np.argsort(dist, kind="stable")
    dist, gap = dist[order], gap[order]
    rep.modulus_samples = [[float(a), float(b)] for a, b in zip(dist, gap)]
    idx = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, n_bins - 1)
    binmax = np.zeros(n_bins)
    np.maximum.at(binmax, idx, gap)
    env = np.maximum.accumulate(binmax)
    rep.envelope = [[float(e), float(v)] for e, v in zip(edges[1:], env)]
    rep.sup_bound_est = sup
    if env[0] > jump_tol * sup:
        rep.violations.append({"kind": "modulus does not vanish at 0",
                               "distance": float(edges[1]), "gap": float(env[0])})
    rep.passed = not rep.violations
    return rep


# --------------------------------------------------------------------------
# mollification in y

@dataclass(frozen=True)
class MollifierKernel:
    """Radial kernel inside the unit ball of ``R^m``, rescaled by ``delta``.

    ``box`` is the unit-width box (constant on ``|y| < 1/2``); the other
    kinds use the whole unit ball.
    """
    kind: str = "box"
    delta: float = 0.5
    m: int = 1

    def __post_init__(self):
        if self.kind not in ("box", "triangular", "quartic"):
            raise FieldError(f"unknown kernel kind {self.kind!r}")
        if self.delta <= 0:
            raise FieldError("delta must be positive")

    @property
    def support(self):
        return 0.5 if self.kind == "box" else 1.0

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        inside = r < 1.0
        if self.kind == "box":
            return (r < 0.5) * 1.0
        if self.kind == "triangular":
            return np.where(inside, 1.0 - r, 0.0)
        return np.where(inside, (1.0 - r * r) ** 2, 0.0)

    def nodes(self, per_dim=64):
        """Quadrature nodes (unit scale) and weights summing to one."""
        s = self.support
        t = -s + (np.arange(per_dim) + 0.5) * (2.0 * s / per_dim)
        mesh = np.meshgrid(*[t] * self.m, indexing="ij")
        pts = np.stack([g.reshape(-1) for g in mesh], axis=1)
        w = self.profile(np.linalg.norm(pts, axis=1))
        keep = w > 0
        pts, w = pts[keep], w[keep]
        return pts, w / np.sum(w)


class MollifiedField(CoefficientField):
    """``a_delta(y, z) = int h_delta(y - v) a(v, z) dv`` by fixed quadrature; same for ``b``."""

    def __init__(self, base, kernel: MollifierKernel, per_dim=64):
        if kernel.m != base.m:
            raise FieldError(f"kernel acts on {kernel.m} coordinates but m = {base.m}")
        self.base, self.kernel = base, kernel
        self.dim, self.m = base.dim, base.m
        self.depends_on_measure = base.depends_on_measure
        self.diagonal = base.diagonal
        nodes, self.w = kernel.nodes(per_dim)
        self.shifts = np.zeros((nodes.shape[0], self.dim))
        self.shifts[:, :self.m] = kernel.delta * nodes

    def noise_dims(self):
        return self.base.noise_dims()

    def coefficients(self, X, mu=None, cache=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cache = cache or ex.FunctionalCache()
        N, d = X.shape
        A = np.zeros((N, d, d))
        B = np.zeros((N, d))
        chunk = max(1, 200_000 // max(N, 1))
        for s in range(0, len(self.w), chunk):
            sh, w = self.shifts[s:s + chunk], self.w[s:s + chunk]
            pts = (X[None, :, :] - sh[:, None, :]).reshape(-1, d)
            Ak, Bk = self.base.coefficients(pts, mu, cache) if isinstance(self.base, ExprField) \
                else self.base.coefficients(pts, mu)
            A += np.einsum("q,qnij->nij", w, Ak.reshape(len(w), N, d, d))
            B += np.einsum("q,qni->ni", w, Bk.reshape(len(w), N, d))
        return A, B


def mollify(fld, kernel: MollifierKernel, per_dim=64):
    """Convolve the coefficients in the ``y`` coordinates with ``kernel``."""
    if fld.m == 0:
        warnings.warn("m = 0: mollification in y is the identity", stacklevel=2)
        return fld
    if per_dim < 64:
        raise FieldError("use at least 64 quadrature nodes per dimension")
    return MollifiedField(fld, kernel, per_dim)
