"""Scalar function handles with value, gradient and Hessian access.

Every handle takes points as an ``(N, d)`` array and an optional measure
(only expression handles containing ``MOM``/``INT`` look at it) and
returns arrays of shape ``(N,)``, ``(N, d)`` and ``(N, d, d)``.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import hermite_e

from . import expr as ex


class MissingDerivativeError(ValueError):
    pass


def _as_points(X, dim=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if dim is None or X.shape[0] == dim else X[:, None]
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {X.shape[1]}")
    return X


class ScalarFunction:
    """Base class; subclasses override ``value`` and usually ``grad``/``hess``."""

    dim: int = 1
    depends_on_measure = False

    def value(self, X, mu=None):
        raise NotImplementedError

    def grad(self, X, mu=None):
        raise MissingDerivativeError(f"{self!r} has no gradient")

    def hess(self, X, mu=None):
        raise MissingDerivativeError(f"{self!r} has no Hessian")

    def __call__(self, X, mu=None):
        return self.value(X, mu)

    def __add__(self, other):
        return LinearCombination([(1.0, self), (1.0, other)])

    def __rmul__(self, c):
        return LinearCombination([(float(c), self)])


class ExprFunction(ScalarFunction):
    """Function defined by an expression; derivatives are symbolic."""

    def __init__(self, source, dim=1):
        self.node = ex.parse(source) if isinstance(source, str) else source
        if ex.max_coordinate(self.node) >= dim:
            raise ValueError(f"{ex.to_text(self.node)} references a coordinate beyond dim={dim}")
        self.dim = dim
        self.depends_on_measure = ex.depends_on_measure(self.node)
        self._grad = None
        self._hess = None

    @property
    def text(self):
        return ex.to_text(self.node)

    def __repr__(self):
        return f"ExprFunction({self.text!r}, dim={self.dim})"

    def _derivs(self):
        if self._grad is None:
            self._grad = [ex.diff(self.node, i) for i in range(self.dim)]
            self._hess = [[ex.diff(self._grad[i], j) if j >= i else None
                           for j in range(self.dim)] for i in range(self.dim)]
        return self._grad, self._hess

    def value(self, X, mu=None, cache=None):
        return ex.evaluate(self.node, _as_points(X, self.dim), mu, cache)

    def grad(self, X, mu=None, cache=None):
        X = _as_points(X, self.dim)
        cache = cache or ex.FunctionalCache()
        g, _ = self._derivs()
        return np.stack([ex.evaluate(gi, X, mu, cache) for gi in g], axis=1)

    def hess(self, X, mu=None, cache=None):
        X = _as_points(X, self.dim)
        cache = cache or ex.FunctionalCache()
        _, h = self._derivs()
        out = np.empty((X.shape[0], self.dim, self.dim))
        for i in range(self.dim):
            for j in range(i, self.dim):
                out[:, i, j] = out[:, j, i] = ex.evaluate(h[i][j], X, mu, cache)
        return out


class FunctionHandle(ScalarFunction):
    """Wrap plain callables ``f(X)``, ``grad(X)``, ``hess(X)`` on ``(N, d)`` arrays."""

    def __init__(self, value, grad=None, hess=None, dim=1, name=None):
        self._value, self._grad, self._hess = value, grad, hess
        self.dim = dim
        self.name = name or getattr(value, "__name__", "function")

    def __repr__(self):
        return f"FunctionHandle({self.name})"

    def value(self, X, mu=None):
        return np.asarray(self._value(_as_points(X, self.dim)), dtype=float)

    def grad(self, X, mu=None):
        if self._grad is None:
            raise MissingDerivativeError(f"{self.name} has no gradient")
        return np.asarray(self._grad(_as_points(X, self.dim)), dtype=float)

    def hess(self, X, mu=None):
        if self._hess is None:
            raise MissingDerivativeError(f"{self.name} has no Hessian")
        return np.asarray(self._hess(_as_points(X, self.dim)), dtype=float)


class LinearCombination(ScalarFunction):
    def __init__(self, terms):
        self.terms = [(float(c), f) for c, f in terms]
        self.dim = self.terms[0][1].dim
        self.depends_on_measure = any(f.depends_on_measure for _, f in self.terms)

    def value(self, X, mu=None):
        return sum(c * f.value(X, mu) for c, f in self.terms)

    def grad(self, X, mu=None):
        return sum(c * f.grad(X, mu) for c, f in self.terms)

    def hess(self, X, mu=None):
        return sum(c * f.hess(X, mu) for c, f in self.terms)


class ConstantFunction(ScalarFunction):
    def __init__(self, c=0.0, dim=1):
        self.c, self.dim = float(c), dim

    def value(self, X, mu=None):
        return np.full(_as_points(X, self.dim).shape[0], self.c)

    def grad(self, X, mu=None):
        return np.zeros(_as_points(X, self.dim).shape)

    def hess(self, X, mu=None):
        X = _as_points(X, self.dim)
        return np.zeros((X.shape[0], self.dim, self.dim))


# --------------------------------------------------------------------------
# smooth step and cutoffs

def _f(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1, with first and second derivatives."""
    t = np.asarray(t, dtype=float)
    s = np.clip(t, 0.0, 1.0)
    val = np.where(t >= 1.0, 1.0, 0.0)
    d1 = np.zeros_like(s)
    d2 = np.zeros_like(s)
    inner = (t > 0.0) & (t < 1.0)
    if np.any(inner):
        u = np.clip(s[inner], 1e-3, 1 - 1e-3)
        f, g = _f(u), _f(1.0 - u)
        f1 = f / u**2
        g1 = -g / (1.0 - u)**2
        f2 = f * (1.0 / u**4 - 2.0 / u**3)
        g2 = g * (1.0 / (1.0 - u)**4 - 2.0 / (1.0 - u)**3)
        D, D1 = f + g, f1 + g1
        N = f1 * g - f * g1
        N1 = f2 * g - f * g2
        val[inner] = _f(s[inner]) / (_f(s[inner]) + _f(1.0 - s[inner]))
        d1[inner] = N / D**2
        d2[inner] = (N1 * D - 2.0 * N * D1) / D**3
    return val, d1, d2


class RadialFunction(ScalarFunction):
    """``g(|x|)`` given a routine returning ``g, g', g'' / r-safe`` pieces."""

    def _profile(self, r):
        """Return g(r), g'(r), g''(r), g'(r)/r (finite at r = 0)."""
        raise NotImplementedError

    def value(self, X, mu=None):
        X = _as_points(X, self.dim)
        return self._profile(np.linalg.norm(X, axis=1))[0]

    def grad(self, X, mu=None):
        X = _as_points(X, self.dim)
        _, _, _, g1r = self._profile(np.linalg.norm(X, axis=1))
        return g1r[:, None] * X

    def hess(self, X, mu=None):
        X = _as_points(X, self.dim)
        r = np.linalg.norm(X, axis=1)
        _, _, g2, g1r = self._profile(r)
        safe = np.where(r > 0, r, 1.0)
        u = X / safe[:, None]
        outer = u[:, :, None] * u[:, None, :]
        eye = np.eye(self.dim)[None]
        radial = np.where(r > 0, g2, g1r)
        return radial[:, None, None] * outer + g1r[:, None, None] * (eye - outer)


class Cutoff(RadialFunction):
    """Equal to 1 on the ball of radius ``n``, 0 outside radius ``n + 1``."""

    def __init__(self, n, dim=1):
        if n <= 0:
            raise ValueError("cutoff radius must be positive")
        self.n, self.dim = float(n), dim

    def __repr__(self):
        return f"Cutoff(n={self.n:g}, dim={self.dim})"

    def _profile(self, r):
        s, s1, s2 = smooth_step(self.n + 1.0 - r)
        g1 = -s1
        g1r = np.where(r > 0, g1 / np.where(r > 0, r, 1.0), 0.0)
        return s, g1, s2, g1r


class Bump1D:
    """``exp(1 - 1/(1 - (x/R)^2))`` on ``|x| < R``, zero outside; value 1 at 0."""

    def __init__(self, R=4.0):
        self.R = float(R)

    def __call__(self, x):
        R2 = self.R**2
        s = 1.0 - x * x / R2
        live = s > 1e-2
        sl = np.where(live, s, 1.0)
        b = np.where(live, np.exp(1.0 - 1.0 / sl), 0.0)
        q = -2.0 * x / (R2 * sl**2)
        q1 = -2.0 / (R2 * sl**2) - 8.0 * x * x / (R2 * R2 * sl**3)
        return b, np.where(live, b * q, 0.0), np.where(live, b * (q * q + q1), 0.0)


class SeparableFunction(ScalarFunction):
    """Product of one-dimensional factors, ``u(x) = prod_i u_i(x_i)``.

    Each factor maps a 1-D array to ``(value, first, second)`` derivatives.
    """

    def __init__(self, factors, name="separable"):
        self.factors = list(factors)
        self.dim = len(self.factors)
        self.name = name

    def __repr__(self):
        return f"SeparableFunction({self.name})"

    def _pieces(self, X):
        X = _as_points(X, self.dim)
        return [f(X[:, i]) for i, f in enumerate(self.factors)]

    @staticmethod
    def _prod_except(vals, skip):
        out = np.ones_like(vals[0])
        for k, v in enumerate(vals):
            if k not in skip:
                out = out * v
        return out

    def value(self, X, mu=None):
        vals = [p[0] for p in self._pieces(X)]
        return self._prod_except(vals, ())

    def grad(self, X, mu=None):
        pieces = self._pieces(X)
        vals = [p[0] for p in pieces]
        return np.stack([pieces[i][1] * self._prod_except(vals, (i,))
                         for i in range(self.dim)], axis=1)

    def hess(self, X, mu=None):
        pieces = self._pieces(X)
        vals = [p[0] for p in pieces]
        n = vals[0].shape[0]
        out = np.empty((n, self.dim, self.dim))
        for i in range(self.dim):
            out[:, i, i] = pieces[i][2] * self._prod_except(vals, (i,))
            for j in range(i + 1, self.dim):
                out[:, i, j] = out[:, j, i] = (pieces[i][1] * pieces[j][1]
                                               * self._prod_except(vals, (i, j)))
        return out


def _hermite_factor(k, bump):
    c = np.zeros(k + 1)
    c[k] = 1.0
    c1 = hermite_e.hermeder(c, 1) if k >= 1 else np.zeros(1)
    c2 = hermite_e.hermeder(c, 2) if k >= 2 else np.zeros(1)

    def factor(x):
        p, p1, p2 = hermite_e.hermeval(x, c), hermite_e.hermeval(x, c1), hermite_e.hermeval(x, c2)
        b, b1, b2 = bump(x)
        return p * b, p1 * b + p * b1, p2 * b + 2.0 * p1 * b1 + p * b2

    return factor


def hermite_bump_battery(dim=1, max_degree=4, radius=4.0):
    """Test functions ``prod_i He_{k_i}(x_i) * bump(x_i / radius)`` with total degree <= max_degree.

    All members are smooth with compact support in the cube of half-width
    ``radius``.
    """
    bump = Bump1D(radius)
    out = []
    for ks in np.ndindex(*([max_degree + 1] * dim)):
        if sum(ks) > max_degree:
            continue
        name = "*".join(f"He{k}(x{i + 1})" for i, k in enumerate(ks)) + f"*bump(R={radius:g})"
        out.append(SeparableFunction([_hermite_factor(k, bump) for k in ks], name=name))
    return out


def as_function(obj, dim=1):
    """Coerce strings, nodes, numbers and handles to a ``ScalarFunction``."""
    if isinstance(obj, ScalarFunction):
        return obj
    if isinstance(obj, (int, float)):
        return ConstantFunction(obj, dim)
    if isinstance(obj, str) or isinstance(obj, ex.Node.__args__):
        return ExprFunction(obj, dim)
    if callable(obj):
        return FunctionHandle(obj, dim=dim)
    raise TypeError(f"cannot interpret {obj!r} as a function")
