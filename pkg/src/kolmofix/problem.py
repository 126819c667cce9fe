"""Problem files: a flat ``key = value`` format describing a field and its solver.

Example::

    # Ornstein-Uhlenbeck
    dim = 1
    m = 1
    a[1][1] = "1"
    b[1] = "-x1"
    V = "x1^2/2"
    C = 1
    Lambda = 2
    solver.backend = grid
    solver.cells = 400

Expressions are quoted strings in the coefficient language (see
:mod:`kolmofix.expr`).  Indices are 1-based.  Recognised keys:

``dim``, ``m``, ``a[i][j]``, ``b[i]``
    the field; ``a`` is symmetric, so one of ``a[i][j]``/``a[j][i]`` suffices.
``V``, ``W``, ``H``, ``C``, ``Lambda``, ``C1``, ``C2``
    Lyapunov data; ``W`` may use ``MOM``/``INT`` and defaults to ``V``.
``candidates``
    ``;``-separated measure-independent Lyapunov candidates for the
    negative integral check.
``check.K``
    cube for the regularity checks, ``lo, hi`` (same bounds in every axis).
``solver.*``
    ``backend`` (closed | grid | particle), ``cells``, ``domain`` (``lo, hi``),
    ``theta``, ``tol``, ``max_iter``, ``R``, ``dt``, ``T``, ``burn_in``,
    ``n_particles``, ``n_snapshots``, ``seed``, ``guard``.
``init.*``
    starting measure: ``kind`` (gaussian | dirac), ``scale``, ``n``, ``center``.
``truncation.n``
    radii for the localized solve, comma-separated.
``diag.*``
    ``K_y``, ``r``, ``S``, ``gamma``, ``eta_radius`` for the diagnostics.
"""

from __future__ import annotations

import ast
import configparser
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .coeff import ExprField
from .frozen import SdeConfig, gaussian_cloud
from .functions import ExprFunction
from .lyapunov import LyapunovSpec
from .measure import DiscreteMeasure

PRESET_NAMES = ("ou", "cubic-interaction", "compact-support-diffusion", "half-line-diffusion",
                "langevin-kinetic", "langevin-meanfield")

_A_KEY = re.compile(r"^a\[(\d+)\]\[(\d+)\]$")
_B_KEY = re.compile(r"^b\[(\d+)\]$")
_SCALAR = {"dim", "m", "V", "W", "H", "C", "Lambda", "C1", "C2", "candidates", "name",
           "description"}
_SOLVER = {"backend", "cells", "domain", "theta", "tol", "max_iter", "R", "dt", "T", "burn_in",
           "n_particles", "n_snapshots", "seed", "guard"}
_INIT = {"kind", "scale", "n", "center"}
_DIAG = {"K_y", "r", "S", "gamma", "eta_radius"}


class ProblemError(ValueError):
    pass


def _unquote(v: str) -> str:
    v = v.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        try:
            return ast.literal_eval(v)
        except (ValueError, SyntaxError) as err:
            raise ProblemError(f"bad quoted value {v}") from err
    return v


def _floats(v: str):
    try:
        return [float(t) for t in v.replace(";", ",").split(",") if t.strip()]
    except ValueError as err:
        raise ProblemError(f"expected numbers, got {v!r}") from err


@dataclass
class Problem:
    name: str
    dim: int
    m: int
    a: dict
    b: list
    V: str | None = None
    W: str | None = None
    H: str | None = None
    C: float = 1.0
    Lambda: float = 1.0
    C1: float = 0.0
    C2: float = 0.0
    candidates: list = field(default_factory=list)
    K: tuple = (-1.0, 1.0)
    solver: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    truncation: list = field(default_factory=list)
    diag: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        self.field = ExprField(self.a, self.b, m=self.m, dim=self.dim)

    # ---- derived objects
    def function(self, text):
        return None if text is None else ExprFunction(text, self.dim)

    def lyapunov_spec(self) -> LyapunovSpec:
        if self.V is None:
            raise ProblemError(f"problem {self.name!r} defines no V")
        return LyapunovSpec(self.function(self.V), self.function(self.W), self.function(self.H),
                            C=self.C, Lambda=self.Lambda, C1=self.C1, C2=self.C2, dim=self.dim)

    @property
    def backend(self):
        return self.solver.get("backend", "grid")

    @property
    def seed(self):
        return int(self.solver.get("seed", 0))

    def domain(self):
        lo, hi = self.solver.get("domain", (-8.0, 8.0))
        return (lo, hi)

    def sde_config(self, seed=None) -> SdeConfig:
        keys = ("dt", "T", "burn_in", "n_particles", "n_snapshots", "guard")
        kw = {k: self.solver[k] for k in keys if k in self.solver}
        for k in ("n_particles", "n_snapshots"):
            if k in kw:
                kw[k] = int(kw[k])
        kw["seed"] = self.seed if seed is None else int(seed)
        return SdeConfig(**kw)

    def picard_config(self, backend=None, tol=None, seed=None):
        from .fixedpoint import PicardConfig
        s = self.solver
        cells = s.get("cells", 400)
        return PicardConfig(
            theta=float(s.get("theta", 0.5)), max_iter=int(s.get("max_iter", 50)),
            tol=float(tol if tol is not None else s.get("tol", 1e-3)),
            backend=backend or self.backend, R=s.get("R"), V=self.function(self.V),
            cells=cells, domain=self.domain(), sde=self.sde_config(seed))

    def initial_measure(self, backend=None, seed=None) -> DiscreteMeasure:
        kind = self.init.get("kind", "gaussian")
        center = np.broadcast_to(np.asarray(self.init.get("center", 0.0), dtype=float), (self.dim,))
        if kind == "dirac":
            return DiscreteMeasure.dirac(center)
        if kind != "gaussian":
            raise ProblemError(f"unknown init.kind {kind!r}")
        backend = backend or self.backend
        default_n = int(self.solver.get("n_particles", 10_000)) if backend == "particle" else 20_000
        n = int(self.init.get("n", default_n))
        seed = self.seed if seed is None else int(seed)
        cloud = gaussian_cloud(n, self.dim, seed=seed, scale=float(self.init.get("scale", 1.0)))
        return DiscreteMeasure(cloud.points + center, cloud.weights)

    def describe(self):
        return {"name": self.name, "dim": self.dim, "m": self.m, **self.field.describe(),
                "V": self.V, "W": self.W, "H": self.H, "C": self.C, "Lambda": self.Lambda,
                "C1": self.C1, "C2": self.C2, "description": self.description}


def parse_problem(text: str, name="problem") -> Problem:
    """Parse the ``key = value`` problem format (see module docstring)."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[problem]\n" + text)
    except configparser.Error as err:
        raise ProblemError(f"{name}: {err}") from err
    items = dict(cp["problem"])
    out = {"a": {}, "b": {}, "solver": {}, "init": {}, "diag": {}, "truncation": []}
    scalars = {}
    for key, raw in items.items():
        v = _unquote(raw)
        if (mt := _A_KEY.match(key)):
            out["a"][(int(mt.group(1)) - 1, int(mt.group(2)) - 1)] = v
        elif (mt := _B_KEY.match(key)):
            out["b"][int(mt.group(1)) - 1] = v
        elif key in _SCALAR:
            scalars[key] = v
        elif key.startswith("solver.") and key[7:] in _SOLVER:
            k = key[7:]
            if k == "backend":
                out["solver"][k] = v
            elif k == "domain":
                out["solver"][k] = tuple(_floats(v))
            elif k == "cells":
                vals = [int(x) for x in _floats(v)]
                out["solver"][k] = vals[0] if len(vals) == 1 else vals
            else:
                out["solver"][k] = _floats(v)[0]
        elif key.startswith("init.") and key[5:] in _INIT:
            k = key[5:]
            out["init"][k] = v if k == "kind" else (_floats(v) if k == "center" else _floats(v)[0])
        elif key.startswith("diag.") and key[5:] in _DIAG:
            k = key[5:]
            out["diag"][k] = tuple(_floats(v)) if k == "K_y" else _floats(v)[0]
        elif key == "truncation.n":
            out["truncation"] = _floats(v)
        elif key == "check.K":
            out["K"] = tuple(_floats(v))
        else:
            raise ProblemError(f"{name}: unknown key {key!r}")
    if "dim" not in scalars:
        raise ProblemError(f"{name}: missing 'dim'")
    dim = int(float(scalars["dim"]))
    if dim < 1:
        raise ProblemError(f"{name}: dim must be positive")
    b = [out["b"].get(i, "0") for i in range(dim)]
    if any(i >= dim for i in out["b"]) or any(max(k) >= dim for k in out["a"]):
        raise ProblemError(f"{name}: coefficient index beyond dim={dim}")
    if "backend" in out["solver"] and out["solver"]["backend"] not in ("closed", "grid", "particle"):
        raise ProblemError(f"{name}: unknown solver.backend {out['solver']['backend']!r}")
    num = {k: float(scalars[k]) for k in ("C", "Lambda", "C1", "C2") if k in scalars}
    cands = [c.strip() for c in scalars.get("candidates", "").split(";") if c.strip()]
    try:
        return Problem(
            name=scalars.get("name", name), dim=dim, m=int(float(scalars.get("m", dim))),
            a=out["a"], b=b, V=scalars.get("V"), W=scalars.get("W"), H=scalars.get("H"),
            candidates=cands, K=out.get("K", (-1.0, 1.0)), solver=out["solver"],
            init=out["init"], truncation=out["truncation"], diag=out["diag"],
            description=scalars.get("description", ""), **num)
    except (ValueError, TypeError) as err:
        raise ProblemError(f"{name}: {err}") from err


def load_problem(path) -> Problem:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"problem file not found: {path}")
    return parse_problem(path.read_text(), name=path.stem)


def preset_text(name: str) -> str:
    if name not in PRESET_NAMES:
        raise ProblemError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return resources.files("kolmofix").joinpath("presets").joinpath(f"{name}.cfg").read_text()


def load_preset(name: str) -> Problem:
    return parse_problem(preset_text(name), name=name)


def list_presets():
    """Catalogue of shipped presets: name, dimension, split index and description."""
    out = []
    for n in PRESET_NAMES:
        p = load_preset(n)
        out.append({"name": n, "dim": p.dim, "m": p.m, "backend": p.backend,
                    "description": p.description})
    return out
