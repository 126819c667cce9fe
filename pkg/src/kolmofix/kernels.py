"""Hot loops: Euler-Maruyama particle runs and Gaussian KDE sums.

Each kernel has a numba implementation and a vectorised numpy twin with
the same arithmetic and the same random streams.  The public wrappers
``run_em`` and ``kde_grid`` dispatch on ``_accel.numba_enabled()``.

Random numbers come from a counter-based splitmix64 generator, one
stream per particle seeded from ``(seed, particle index)``, so results
do not depend on scheduling.  Normals use the Marsaglia polar method and
keep the second variate of each pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
TWO_M53 = 1.0 / 9007199254740992.0

STATUS_OK, STATUS_BLOWUP, STATUS_NONPSD = 0, 1, 2


# --------------------------------------------------------------------------
# generated coefficient functions

def _np_ind(op):
    return lambda a, b: op(a, b) * 1.0


def _np_cutoff(r, n):
    from .functions import smooth_step
    return smooth_step(n + 1.0 - np.asarray(r, dtype=float))[0]


NUMPY_HELPERS = {
    "_div": np.divide, "_powi": np.power, "_pow": np.power, "_abs": np.abs,
    "_min": np.minimum, "_max": np.maximum, "_sqrt": np.sqrt, "_exp": np.exp,
    "_log": np.log, "_sin": np.sin, "_cos": np.cos, "_sign": np.sign,
    "_ge": _np_ind(np.greater_equal), "_le": _np_ind(np.less_equal),
    "_gt": _np_ind(np.greater), "_lt": _np_ind(np.less),
    "_norm": lambda x: np.sqrt(np.sum(x * x, axis=0)), "_cutoff": _np_cutoff,
}


@njit(inline="always")
def _nb_div(a, b):
    return a / b


@njit(inline="always")
def _nb_powi(a, k):
    return a ** k


@njit(inline="always")
def _nb_pow(a, b):
    return a ** b


@njit(inline="always")
def _nb_sign(a):
    return 1.0 if a > 0 else (-1.0 if a < 0 else 0.0)


@njit(inline="always")
def _nb_ge(a, b):
    return 1.0 if a >= b else 0.0


@njit(inline="always")
def _nb_le(a, b):
    return 1.0 if a <= b else 0.0


@njit(inline="always")
def _nb_gt(a, b):
    return 1.0 if a > b else 0.0


@njit(inline="always")
def _nb_lt(a, b):
    return 1.0 if a < b else 0.0


@njit(inline="always")
def _nb_norm(x):
    s = 0.0
    for i in range(x.shape[0]):
        s += x[i] * x[i]
    return math.sqrt(s)


@njit(inline="always")
def _nb_expinv(t):
    return math.exp(-1.0 / t) if t > 0.0 else 0.0


@njit(inline="always")
def _nb_cutoff(r, n):
    t = n + 1.0 - r
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    f = _nb_expinv(t)
    return f / (f + _nb_expinv(1.0 - t))


@njit(inline="always")
def _nb_min(a, b):
    return a if a <= b else b


@njit(inline="always")
def _nb_max(a, b):
    return a if a >= b else b


@njit(inline="always")
def _nb_sqrt(a):
    return math.sqrt(a) if a >= 0.0 else math.nan


@njit(inline="always")
def _nb_log(a):
    return math.log(a) if a > 0.0 else math.nan


NUMBA_HELPERS = {
    "_div": _nb_div, "_powi": _nb_powi, "_pow": _nb_pow, "_abs": abs,
    "_min": _nb_min, "_max": _nb_max, "_sqrt": _nb_sqrt, "_exp": math.exp,
    "_log": _nb_log, "_sin": math.sin, "_cos": math.cos, "_sign": _nb_sign,
    "_ge": _nb_ge, "_le": _nb_le, "_gt": _nb_gt, "_lt": _nb_lt,
    "_norm": _nb_norm, "_cutoff": _nb_cutoff,
}


@dataclass
class CoefficientKernel:
    """Compiled coefficients of a frozen field.

    ``source`` defines ``coeffs(x, th, a, b)``: it fills ``a`` and ``b`` at
    one point (numba: ``x`` of shape ``(d,)``) or at many points (numpy:
    ``x`` of shape ``(d, N)``) and returns the killing rate.  Entries of
    ``a`` it never writes are zero.
    """
    source: str
    theta: np.ndarray
    dim: int
    active: np.ndarray          # coordinates that can carry noise
    has_kill: bool = False
    diag: bool = False          # diffusion diagonal on the active block
    py_fn: object = field(default=None, repr=False)   # numpy-only fallback

    def numpy_fn(self):
        if self.py_fn is not None:
            return self.py_fn
        return _compile(self.source, "numpy")

    def numba_fn(self):
        return _compile(self.source, "numba")


_COMPILED = {}


def _compile(source, flavour):
    key = (source, flavour)
    fn = _COMPILED.get(key)
    if fn is None:
        ns = dict(NUMPY_HELPERS if flavour == "numpy" else NUMBA_HELPERS)
        ns["math"] = math
        exec(compile(source, "<kolmofix-coeffs>", "exec"), ns)
        fn = ns["coeffs"]
        if flavour == "python":
            pass
        elif flavour == "numba":
            fn = _accel.numba.njit(error_model="numpy")(fn)
        _COMPILED[key] = fn
    return fn


def build_source(a_src, b_src, kill_src=None, prelude=()):
    """Assemble the body of ``coeffs`` from per-entry source strings.

    ``a_src`` maps ``(i, j)`` with ``i <= j`` to an expression string;
    ``b_src`` is a list with one string per coordinate (``None`` for 0).
    """
    lines = ["def coeffs(x, th, a, b):"]
    lines += [f"    {p}" for p in prelude]
    for (i, j), s in sorted(a_src.items()):
        if i == j:
            lines.append(f"    a[{i}, {i}] = {s}")
        else:
            lines.append(f"    a[{i}, {j}] = {s}")
            lines.append(f"    a[{j}, {i}] = a[{i}, {j}]")
    for i, s in enumerate(b_src):
        if s is not None:
            lines.append(f"    b[{i}] = {s}")
    lines.append(f"    return {kill_src if kill_src else '0.0'}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# random streams

@njit(inline="always")
def _nb_splitmix(state):
    state = state + np.uint64(GOLDEN)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return state, z ^ (z >> np.uint64(31))


@njit(inline="always")
def _nb_stream(seed, p):
    _, hp = _nb_splitmix(np.uint64(p))
    _, h = _nb_splitmix(np.uint64(seed) ^ hp)
    return h


@njit(inline="always")
def _nb_uniform(state):
    state, z = _nb_splitmix(state)
    return state, (z >> np.uint64(11)) * TWO_M53


def _np_splitmix(state):
    with np.errstate(over="ignore"):
        state = state + np.uint64(GOLDEN)
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return state, z ^ (z >> np.uint64(31))


def _np_stream(seed, idx):
    _, hp = _np_splitmix(np.asarray(idx, dtype=np.uint64))
    _, h = _np_splitmix(np.uint64(seed) ^ hp)
    return h


def _np_uniform(state):
    state, z = _np_splitmix(state)
    return state, (z >> np.uint64(11)).astype(np.float64) * TWO_M53


def stream_normals(seed, n_streams, count):
    """``count`` standard normals from each of ``n_streams`` particle streams.

    Deterministic in ``(seed, stream index)``; used for initial clouds.
    """
    state = _np_stream(seed, np.arange(n_streams, dtype=np.uint64))
    spare = np.zeros(n_streams)
    has = np.zeros(n_streams, dtype=bool)
    out = np.empty((n_streams, count))
    for j in range(count):
        state, out[:, j] = _np_polar(state, spare, has)
    return out


def _np_polar(state, spare, has):
    """One normal per stream; mutates ``spare``/``has`` and returns the new state."""
    z = np.empty(state.shape[0])
    z[has] = spare[has]
    need = np.flatnonzero(~has)
    has[has] = False
    while need.size:
        st = state[need]
        st, u1 = _np_uniform(st)
        st, u2 = _np_uniform(st)
        state[need] = st
        v1, v2 = 2.0 * u1 - 1.0, 2.0 * u2 - 1.0
        q = v1 * v1 + v2 * v2
        ok = (q < 1.0) & (q > 0.0)
        idx = need[ok]
        f = np.sqrt(-2.0 * np.log(q[ok]) / q[ok])
        z[idx] = v1[ok] * f
        spare[idx] = v2[ok] * f
        has[idx] = True
        need = need[~ok]
    return state, z


# --------------------------------------------------------------------------
# Euler-Maruyama

@njit(error_model="numpy")
def _nb_sqrt_psd(M, S, tol):
    """Write the PSD square root of symmetric ``M`` into ``S``; return min eigenvalue."""
    k = M.shape[0]
    if k == 1:
        m = M[0, 0]
        S[0, 0] = math.sqrt(m) if m > 0.0 else 0.0
        return m
    if k == 2:
        p, q, r = M[0, 0], M[0, 1], M[1, 1]
        tr = p + r
        disc = math.sqrt((p - r) * (p - r) + 4.0 * q * q)
        lmin = 0.5 * (tr - disc)
        if lmin < -tol:
            return lmin
        det = p * r - q * q
        s = math.sqrt(det) if det > 0.0 else 0.0
        t2 = tr + 2.0 * s
        if t2 <= 0.0:
            S[0, 0] = S[0, 1] = S[1, 0] = S[1, 1] = 0.0
            return lmin
        t = math.sqrt(t2)
        S[0, 0] = (p + s) / t
        S[1, 1] = (r + s) / t
        S[0, 1] = S[1, 0] = q / t
        return lmin
    w, U = np.linalg.eigh(M)
    for i in range(k):
        for j in range(k):
            acc = 0.0
            for l in range(k):
                if w[l] > 0.0:
                    acc += U[i, l] * math.sqrt(w[l]) * U[j, l]
            S[i, j] = acc
    return w[0]


@njit(inline="always")
def _nb_normal(st, have, spare):
    if have:
        return st, False, spare, spare
    while True:
        st, u1 = _nb_uniform(st)
        st, u2 = _nb_uniform(st)
        v1 = 2.0 * u1 - 1.0
        v2 = 2.0 * u2 - 1.0
        q = v1 * v1 + v2 * v2
        if q < 1.0 and q > 0.0:
            break
    f = math.sqrt(-2.0 * math.log(q) / q)
    return st, True, v2 * f, v1 * f


def _np_sqrt_psd(M, tol):
    """Batched PSD square roots of ``M`` (shape ``(N, k, k)``) and min eigenvalues."""
    N, k, _ = M.shape
    if k == 1:
        m = M[:, 0, 0]
        return np.sqrt(np.maximum(m, 0.0))[:, None, None], m
    if k == 2:
        p, q, r = M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]
        tr = p + r
        lmin = 0.5 * (tr - np.sqrt((p - r) ** 2 + 4.0 * q * q))
        s = np.sqrt(np.maximum(p * r - q * q, 0.0))
        t2 = tr + 2.0 * s
        t = np.sqrt(np.where(t2 > 0.0, t2, 1.0))
        live = t2 > 0.0
        S = np.zeros_like(M)
        S[:, 0, 0] = np.where(live, (p + s) / t, 0.0)
        S[:, 1, 1] = np.where(live, (r + s) / t, 0.0)
        S[:, 0, 1] = S[:, 1, 0] = np.where(live, q / t, 0.0)
        return S, lmin
    w, U = np.linalg.eigh(M)
    S = np.einsum("nil,nl,njl->nij", U, np.sqrt(np.maximum(w, 0.0)), U)
    return S, w[:, 0]


def _em_numpy(coeffs, X0, th, active, diag, dt, n_steps, snap_steps, guard, seed,
              has_kill, psd_tol, out):
    N, d = X0.shape
    k = active.shape[0]
    n_snap = snap_steps.shape[0]
    x = X0.T.copy()                      # (d, N)
    a = np.zeros((d, d, N))
    b = np.zeros((d, N))
    state = _np_stream(seed, np.arange(N, dtype=np.uint64))
    spare = np.zeros(N)
    has = np.zeros(N, dtype=bool)
    sq = math.sqrt(dt)
    snap_pos = {int(s): i for i, s in enumerate(snap_steps)}
    rows = np.arange(N) * n_snap
    for step in range(1, n_steps + 1):
        kill = coeffs(x, th, a, b)
        if diag:
            aii = np.broadcast_to(a[active, active], (k, N))
            lmin = np.min(2.0 * aii, axis=0)
        else:
            M = 2.0 * np.moveaxis(a[np.ix_(active, active)], -1, 0)
            S, lmin = _np_sqrt_psd(M, psd_tol)
        bad = np.flatnonzero((lmin < -psd_tol) | np.isnan(lmin))
        if bad.size:
            p = int(bad[0])
            return STATUS_NONPSD, p, step, x[:, p].copy()
        xi = np.empty((k, N))
        for u in range(k):
            state, xi[u] = _np_polar(state, spare, has)
        x += np.broadcast_to(b, (d, N)) * dt
        if diag:
            x[active] += np.sqrt(2.0 * np.maximum(aii, 0.0)) * xi * sq
        else:
            x[active] += np.einsum("nuv,vn->un", S, xi) * sq
        if has_kill:
            state, uk = _np_uniform(state)
            hit = uk < -np.expm1(-np.broadcast_to(kill, (N,)) * dt)
            x[:, hit] = 0.0
        ok = np.abs(x) <= guard
        if not ok.all():
            p = int(np.flatnonzero(~ok.all(axis=0))[0])
            return STATUS_BLOWUP, p, step, x[:, p].copy()
        i = snap_pos.get(step)
        if i is not None:
            out[rows + i] = x.T
    return STATUS_OK, -1, -1, np.zeros(d)


@dataclass
class EmResult:
    points: np.ndarray           # (N * n_snap, d), particle-major
    n_particles: int
    n_snapshots: int
    status: int
    fail_particle: int
    fail_step: int
    witness: np.ndarray


_EM_TEMPLATE = """
def em(X0, th, dt, n_steps, snap_steps, guard, seed, psd_tol, out):
    N = X0.shape[0]
    n_snap = snap_steps.shape[0]
    sq = math.sqrt(dt)
    x = np.zeros({d})
    a = np.zeros(({d}, {d}))
    b = np.zeros({d})
    witness = np.zeros({d})
    M = np.zeros(({k}, {k}))
    S = np.zeros(({k}, {k}))
    for p in range(N):
        st = _nb_stream(seed, p)
        have = False
        spare = 0.0
        for j in range({d}):
            x[j] = X0[p, j]
        si = 0
        next_snap = snap_steps[0] if n_snap > 0 else -1
        for step in range(1, n_steps + 1):
            kill = coeffs(x, th, a, b)
{noise}
{drift}
{killing}
{guard}
            if step == next_snap:
                for j in range({d}):
                    out[p * n_snap + si, j] = x[j]
                si += 1
                next_snap = snap_steps[si] if si < n_snap else -1
    return 0, -1, -1, witness
"""

_FAIL = """{ind}for j in range({d}):
{ind}    witness[j] = x[j]
{ind}return {code}, p, step, witness"""


def _em_source(d, active, diag, has_kill):
    ind = " " * 12
    k = len(active)
    noise = []
    if diag:
        for u, i in enumerate(active):
            noise += [f"{ind}a{u} = a[{i}, {i}]",
                      f"{ind}if a{u} < -0.5 * psd_tol or a{u} != a{u}:",
                      _FAIL.format(ind=ind + "    ", d=d, code=STATUS_NONPSD),
                      f"{ind}st, have, spare, z = _nb_normal(st, have, spare)",
                      f"{ind}n{u} = math.sqrt(2.0 * a{u}) * z if a{u} > 0.0 else 0.0"]
    else:
        for u, i in enumerate(active):
            for v, j in enumerate(active):
                noise.append(f"{ind}M[{u}, {v}] = 2.0 * a[{i}, {j}]")
        noise += [f"{ind}lmin = _nb_sqrt_psd(M, S, psd_tol)",
                  f"{ind}if lmin < -psd_tol or lmin != lmin:",
                  _FAIL.format(ind=ind + "    ", d=d, code=STATUS_NONPSD)]
        for u in range(k):
            noise += [f"{ind}st, have, spare, z{u} = _nb_normal(st, have, spare)"]
        for u in range(k):
            noise.append(f"{ind}n{u} = " + " + ".join(f"S[{u}, {v}] * z{v}" for v in range(k)))
    pos = {i: u for u, i in enumerate(active)}
    drift = [f"{ind}x[{j}] += b[{j}] * dt" + (f" + n{pos[j]} * sq" if j in pos else "")
             for j in range(d)]
    killing = []
    if has_kill:
        killing = [f"{ind}st, uk = _nb_uniform(st)",
                   f"{ind}if uk < -math.expm1(-kill * dt):",
                   f"{ind}    for j in range({d}):",
                   f"{ind}        x[j] = 0.0"]
    guard = [f"{ind}if not (abs(x[{j}]) <= guard):\n" + _FAIL.format(ind=ind + "    ", d=d,
                                                                     code=STATUS_BLOWUP)
             for j in range(d)]
    return _EM_TEMPLATE.format(d=d, k=max(k, 1), noise="\n".join(noise) or f"{ind}pass",
                               drift="\n".join(drift), killing="\n".join(killing),
                               guard="\n".join(guard))


_EM_COMPILED = {}


def _em_kernel(kernel):
    key = (kernel.source, kernel.dim, tuple(int(i) for i in kernel.active), bool(kernel.diag),
           bool(kernel.has_kill))
    fn = _EM_COMPILED.get(key)
    if fn is None:
        ns = {"math": math, "np": np, "_nb_stream": _nb_stream, "_nb_normal": _nb_normal,
              "_nb_uniform": _nb_uniform, "_nb_sqrt_psd": _nb_sqrt_psd}
        ns.update(NUMBA_HELPERS)
        ns["coeffs"] = _accel.numba.njit(inline="always", error_model="numpy")(
            _compile(kernel.source, "python"))
        src = _em_source(*key[1:])
        exec(compile(src, "<kolmofix-em>", "exec"), ns)
        fn = _accel.numba.njit(error_model="numpy")(ns["em"])
        _EM_COMPILED[key] = fn
    return fn


def run_em(kernel: CoefficientKernel, X0, dt, n_steps, snap_steps, guard, seed,
           psd_tol=1e-10, backend=None) -> EmResult:
    """Euler-Maruyama for ``dX = b dt + sqrt(2a) dW`` with optional kill-and-restart at 0.

    ``snap_steps`` lists the (1-based, increasing) steps at which positions
    are recorded.  ``backend`` forces ``"numba"`` or ``"numpy"``.
    """
    X0 = np.ascontiguousarray(X0, dtype=float)
    snap_steps = np.ascontiguousarray(snap_steps, dtype=np.int64)
    active = np.ascontiguousarray(kernel.active, dtype=np.int64)
    th = np.ascontiguousarray(kernel.theta, dtype=float)
    out = np.zeros((X0.shape[0] * snap_steps.shape[0], X0.shape[1]))
    use_numba = _accel.numba_enabled() if backend is None else backend == "numba"
    use_numba = use_numba and kernel.py_fn is None
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if use_numba:
        status, p, step, wit = _em_kernel(kernel)(X0, th, float(dt), int(n_steps), snap_steps,
                                                  float(guard), np.uint64(seed), float(psd_tol), out)
    else:
        status, p, step, wit = _em_numpy(kernel.numpy_fn(), X0, th, active, bool(kernel.diag), float(dt),
                                         int(n_steps), snap_steps, float(guard), np.uint64(seed),
                                         bool(kernel.has_kill), float(psd_tol), out)
    return EmResult(out, X0.shape[0], snap_steps.shape[0], int(status), int(p), int(step),
                    np.asarray(wit, dtype=float).copy())


# --------------------------------------------------------------------------
# Gaussian kernel density on a grid

@njit(error_model="numpy")
def _kde_numba(pts, w, grid, h, out):
    # pts sorted by the first coordinate
    G, m = grid.shape
    K = pts.shape[0]
    norm = 1.0 / (h * math.sqrt(2.0 * math.pi)) ** m
    first = pts[:, 0]
    for g in range(G):
        lo = np.searchsorted(first, grid[g, 0] - 8.0 * h)
        hi = np.searchsorted(first, grid[g, 0] + 8.0 * h, side="right")
        acc = 0.0
        for i in range(lo, hi):
            e = 0.0
            for j in range(m):
                t = (pts[i, j] - grid[g, j]) / h
                e += t * t
            acc += w[i] * math.exp(-0.5 * e)
        out[g] = acc * norm
    _ = K
    return out


def _kde_numpy(pts, w, grid, h, out):
    G, m = grid.shape
    norm = 1.0 / (h * math.sqrt(2.0 * math.pi)) ** m
    first = pts[:, 0]
    lo = np.searchsorted(first, grid[:, 0] - 8.0 * h)
    hi = np.searchsorted(first, grid[:, 0] + 8.0 * h, side="right")
    for g in range(G):
        p = pts[lo[g]:hi[g]]
        e = np.sum(((p - grid[g]) / h) ** 2, axis=1)
        out[g] = np.dot(w[lo[g]:hi[g]], np.exp(-0.5 * e)) * norm
    return out


def kde_grid(points, weights, grid, bandwidth, backend=None):
    """Gaussian product-kernel density of a weighted cloud at the rows of ``grid``.

    Only atoms within 8 bandwidths (in the first coordinate) contribute.
    """
    points = np.asarray(points, dtype=float)
    order = np.argsort(points[:, 0], kind="stable")
    pts = np.ascontiguousarray(points[order])
    w = np.ascontiguousarray(np.asarray(weights, dtype=float)[order])
    grid = np.ascontiguousarray(grid, dtype=float)
    out = np.zeros(grid.shape[0])
    use_numba = _accel.numba_enabled() if backend is None else backend == "numba"
    fn = _kde_numba if use_numba else _kde_numpy
    return fn(pts, w, grid, float(bandwidth), out)
