"""A small expression language for measure-dependent coefficients.

Grammar (whitespace-insensitive, ``**`` is accepted for ``^``)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | "pi" | x<i> | y<i> | "(" expr ")"
            | FUNC "(" expr ("," expr)* ")"
            | "IND" "(" expr CMP expr ")"
            | "MOM" "(" NUMBER "," (abs | radial | y<i>) ")"
            | "INT" "(" expr ")"

``x1..xd`` are state coordinates.  Inside ``INT(...)`` the integration
variable is ``y1..yd``; ``INT(f)`` stands for the integral of ``f(y)``
against the measure, ``MOM(p, abs)`` for the integral of ``|y|^p``,
``MOM(p, radial)`` for the centred moment of ``|y - mean|^p`` and
``MOM(p, yi)`` for the integral of ``y_i^p``.  ``FUNC`` is one of
``abs min max sqrt exp log sin cos sign``; ``CMP`` is one of
``>= <= > <``.

Examples::

    x1^2 * MOM(1, abs)^3            # cubic interaction, diffusion
    INT(2*y1) - x1                  # mean-reverting drift
    x1 * IND(x1 >= 0)               # half-line diffusion
    0.5 * INT((x1 - 2*y1)^2)        # measure-dependent Lyapunov function
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

FUNCTIONS = {"abs": 1, "min": 2, "max": 2, "sqrt": 1, "exp": 1, "log": 1,
             "sin": 1, "cos": 1, "sign": 1}
COMPARISONS = (">=", "<=", ">", "<")


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message, line, column):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownIdentifierError(ExprSyntaxError):
    pass


class CoeffEvaluationError(ArithmeticError):
    pass


class NotCompilableError(ExprError):
    pass


# --------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Coord:
    index: int                 # zero based
    integrand: bool = False    # True for y_i inside INT


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


@dataclass(frozen=True)
class Indicator:
    left: "Node"
    op: str
    right: "Node"


@dataclass(frozen=True)
class Moment:
    p: float
    kind: str                  # "abs", "radial" or "component"
    index: int = -1


@dataclass(frozen=True)
class Integral:
    body: "Node"


Node = Union[Const, Coord, Neg, BinOp, Call, Indicator, Moment, Integral]


def children(node):
    if isinstance(node, Neg):
        return (node.arg,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    if isinstance(node, Indicator):
        return (node.left, node.right)
    if isinstance(node, Integral):
        return (node.body,)
    return ()


def depends_on_x(node) -> bool:
    if isinstance(node, Coord):
        return not node.integrand
    if isinstance(node, Moment):
        return False
    return any(depends_on_x(c) for c in children(node))


def depends_on_measure(node) -> bool:
    if isinstance(node, (Moment, Integral)):
        return True
    return any(depends_on_measure(c) for c in children(node))


def max_coordinate(node) -> int:
    """Largest coordinate index referenced (x, y or moment component), or -1."""
    own = -1
    if isinstance(node, Coord):
        own = node.index
    elif isinstance(node, Moment) and node.kind == "component":
        own = node.index
    return max([own] + [max_coordinate(c) for c in children(node)])


def functionals(node) -> list:
    """Outermost x-independent functional nodes, in first-seen order."""
    found = []

    def walk(n):
        if isinstance(n, Moment) or (isinstance(n, Integral) and not depends_on_x(n)):
            if n not in found:
                found.append(n)
            return
        for c in children(n):
            walk(c)

    walk(node)
    return found


# --------------------------------------------------------------------------
# tokenizer / parser

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|>=|<=|[-+*/^(),<>])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text):
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "ws":
            chunk = m.group()
            nl = chunk.count("\n")
            if nl:
                line += nl
                line_start = pos + chunk.rfind("\n") + 1
        else:
            tok = m.group()
            if tok == "**":
                tok = "^"
            tokens.append(_Tok(kind, tok, line, pos - line_start + 1))
        pos = m.end()
    tokens.append(_Tok("eof", "", line, pos - line_start + 1))
    return tokens


_COORD = re.compile(r"([xy])([1-9]\d*)$")


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0
        self.in_integral = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def fail(self, message, tok=None, cls=ExprSyntaxError):
        tok = tok or self.tok
        raise cls(message, tok.line, tok.col)

    def advance(self):
        tok = self.tok
        self.i += 1
        return tok

    def expect(self, text):
        if self.tok.text != text or self.tok.kind == "num":
            self.fail(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def parse(self):
        node = self.expr()
        if self.tok.kind != "eof":
            self.fail(f"unexpected {self.tok.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            arg = self.unary()
            return Neg(arg) if op == "-" else arg
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind != "ident":
            self.fail(f"unexpected {tok.text or 'end of input'!r}")
        self.advance()
        name = tok.text
        m = _COORD.match(name)
        if m:
            integrand = m.group(1) == "y"
            if integrand and not self.in_integral:
                self.fail(f"{name!r} is only defined inside INT(...)", tok, UnknownIdentifierError)
            return Coord(int(m.group(2)) - 1, integrand)
        if name == "pi":
            return Const(math.pi)
        if name == "IND":
            self.expect("(")
            left = self.expr()
            if self.tok.text not in COMPARISONS:
                self.fail("expected a comparison inside IND(...)")
            op = self.advance().text
            right = self.expr()
            self.expect(")")
            return Indicator(left, op, right)
        if name == "MOM":
            return self.moment()
        if name == "INT":
            self.expect("(")
            self.in_integral += 1
            body = self.expr()
            self.in_integral -= 1
            self.expect(")")
            return Integral(body)
        if name in FUNCTIONS:
            self.expect("(")
            args = [self.expr()]
            while self.tok.text == ",":
                self.advance()
                args.append(self.expr())
            self.expect(")")
            if len(args) != FUNCTIONS[name]:
                self.fail(f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}", tok)
            return Call(name, tuple(args))
        self.fail(f"unknown identifier {name!r}", tok, UnknownIdentifierError)

    def moment(self):
        self.expect("(")
        sign = 1.0
        if self.tok.text == "-":
            self.fail("moment order must be nonnegative")
        tok = self.tok
        if tok.kind != "num":
            self.fail("expected a numeric moment order")
        p = sign * float(self.advance().text)
        self.expect(",")
        kind_tok = self.tok
        if kind_tok.kind != "ident":
            self.fail("expected abs, radial or y<i>")
        self.advance()
        self.expect(")")
        if kind_tok.text in ("abs", "radial"):
            return Moment(p, kind_tok.text)
        m = _COORD.match(kind_tok.text)
        if m and m.group(1) == "y":
            return Moment(p, "component", int(m.group(2)) - 1)
        self.fail(f"unknown moment kind {kind_tok.text!r}", kind_tok, UnknownIdentifierError)


def parse(text: str) -> Node:
    """Parse ``text`` into an expression tree."""
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# printer

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 5


def _fmt_number(v):
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_text(node) -> str:
    """Render ``node`` so that ``parse(to_text(parse(s))) == parse(s)``."""
    if isinstance(node, Const):
        s = _fmt_number(node.value)
        return f"({s})" if node.value < 0 else s
    if isinstance(node, Coord):
        return f"{'y' if node.integrand else 'x'}{node.index + 1}"
    if isinstance(node, Neg):
        inner = to_text(node.arg)
        if _prec(node.arg) <= 3:
            inner = f"({inner})"
        return "-" + inner
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        left, right = to_text(node.left), to_text(node.right)
        if node.op == "^":
            if _prec(node.left) <= p:
                left = f"({left})"
            if _prec(node.right) < 3:
                right = f"({right})"
            return f"{left}^{right}"
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
        return f"{left} {node.op} {right}"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_text(a) for a in node.args)})"
    if isinstance(node, Indicator):
        return f"IND({to_text(node.left)} {node.op} {to_text(node.right)})"
    if isinstance(node, Moment):
        kind = f"y{node.index + 1}" if node.kind == "component" else node.kind
        return f"MOM({_fmt_number(node.p)}, {kind})"
    if isinstance(node, Integral):
        return f"INT({to_text(node.body)})"
    raise TypeError(f"not an expression node: {node!r}")


# --------------------------------------------------------------------------
# simplifying constructors and differentiation

ZERO, ONE = Const(0.0), Const(1.0)


def _is(node, v):
    return isinstance(node, Const) and node.value == v


def add(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return BinOp("+", a, b)


def sub(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return BinOp("-", a, b)


def mul(a, b):
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if isinstance(b, Const) and not isinstance(a, Const):
        a, b = b, a
    if isinstance(a, Const):
        if isinstance(b, Neg):
            return mul(Const(-a.value), b.arg)
        if isinstance(b, BinOp) and b.op == "*" and isinstance(b.left, Const):
            return mul(Const(a.value * b.left.value), b.right)
    return BinOp("*", a, b)


def div(a, b):
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return BinOp("/", a, b)


def neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    if isinstance(a, BinOp) and a.op == "*" and isinstance(a.left, Const):
        return mul(Const(-a.left.value), a.right)
    return Neg(a)


def power(a, b):
    if _is(b, 1.0):
        return a
    if _is(b, 0.0):
        return ONE
    return BinOp("^", a, b)


def const_value(node):
    """Float value of a subtree without coordinates or functionals, else None."""
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Neg):
        v = const_value(node.arg)
        return None if v is None else -v
    if isinstance(node, BinOp):
        a, b = const_value(node.left), const_value(node.right)
        if a is None or b is None:
            return None
        try:
            return float({"+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b,
                          "/": lambda: a / b, "^": lambda: a ** b}[node.op]())
        except (ZeroDivisionError, OverflowError, TypeError):
            return None
    return None


def diff(node, i: int):
    """Derivative with respect to the state coordinate ``x_{i+1}``.

    Indicators, ``sign`` and the kinks of ``abs``/``min``/``max`` are
    differentiated almost everywhere.
    """
    if not depends_on_x(node):
        return ZERO
    if isinstance(node, Coord):
        return ONE if node.index == i else ZERO
    if isinstance(node, Neg):
        return neg(diff(node.arg, i))
    if isinstance(node, Integral):
        return Integral(diff(node.body, i))
    if isinstance(node, BinOp):
        u, v = node.left, node.right
        du, dv = diff(u, i), diff(v, i)
        if node.op == "+":
            return add(du, dv)
        if node.op == "-":
            return sub(du, dv)
        if node.op == "*":
            return add(mul(du, v), mul(u, dv))
        if node.op == "/":
            if not depends_on_x(v):
                return div(du, v)
            return div(sub(mul(du, v), mul(u, dv)), power(v, Const(2.0)))
        if node.op == "^":
            if not depends_on_x(v):
                c = const_value(v)
                if c is not None:
                    return mul(mul(Const(c), power(u, Const(c - 1.0))), du)
                return mul(mul(v, power(u, sub(v, ONE))), du)
            log_u = Call("log", (u,))
            return mul(node, add(mul(dv, log_u), div(mul(v, du), u)))
    if isinstance(node, Call):
        u = node.args[0]
        du = diff(u, i)
        name = node.name
        if name == "abs":
            return mul(Call("sign", (u,)), du)
        if name == "sign":
            return ZERO
        if name == "sqrt":
            return div(du, mul(Const(2.0), node))
        if name == "exp":
            return mul(node, du)
        if name == "log":
            return div(du, u)
        if name == "sin":
            return mul(Call("cos", (u,)), du)
        if name == "cos":
            return neg(mul(Call("sin", (u,)), du))
        v = node.args[1]
        dv = diff(v, i)
        if name == "min":
            return add(mul(Indicator(u, "<=", v), du), mul(Indicator(u, ">", v), dv))
        if name == "max":
            return add(mul(Indicator(u, ">=", v), du), mul(Indicator(u, "<", v), dv))
    if isinstance(node, Indicator):
        return ZERO
    raise TypeError(f"cannot differentiate {node!r}")


# --------------------------------------------------------------------------
# vectorised evaluation

def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise CoeffEvaluationError(f"non-finite value in {what}")
    return value


class FunctionalCache:
    """Memo of functional values keyed by (node, measure).

    Caches are cheap and meant to live for one evaluation context; they
    are never shared between threads.
    """

    def __init__(self):
        self._store = {}

    def get(self, node, mu, compute):
        key = (node, id(mu))
        hit = self._store.get(key)
        if hit is not None and hit[0] is mu:
            return hit[1]
        value = compute()
        self._store[key] = (mu, value)
        return value


def _measure_atoms(mu):
    if mu is None:
        raise CoeffEvaluationError("expression needs a measure but none was given")
    return mu.atoms()


class _Evaluator:
    def __init__(self, mu, cache):
        self.mu = mu
        self.cache = cache if cache is not None else FunctionalCache()

    def run(self, node, xcols, ycols=None):
        return self._eval(node, xcols, ycols)

    def _eval(self, node, xc, yc):
        if isinstance(node, Const):
            return node.value
        if isinstance(node, Coord):
            cols = yc if node.integrand else xc
            if cols is None or node.index >= len(cols):
                raise CoeffEvaluationError(f"coordinate {to_text(node)} out of range")
            return cols[node.index]
        if isinstance(node, Neg):
            return -self._eval(node.arg, xc, yc)
        if isinstance(node, BinOp):
            a = self._eval(node.left, xc, yc)
            b = self._eval(node.right, xc, yc)
            op = node.op
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if op == "/":
                if np.any(np.asarray(b) == 0):
                    raise CoeffEvaluationError(f"division by zero in {to_text(node)}")
                return a / b
            with np.errstate(all="ignore"):
                out = np.power(a, b)
            return _check_finite(out, to_text(node))
        if isinstance(node, Call):
            args = [self._eval(a, xc, yc) for a in node.args]
            with np.errstate(all="ignore"):
                out = _NUMPY_CALLS[node.name](*args)
            return _check_finite(out, to_text(node))
        if isinstance(node, Indicator):
            a = self._eval(node.left, xc, yc)
            b = self._eval(node.right, xc, yc)
            return np.asarray(_COMPARE[node.op](a, b), dtype=float) * 1.0
        if isinstance(node, Moment):
            return self.cache.get(node, self.mu, lambda: self._moment(node))
        if isinstance(node, Integral):
            if not depends_on_x(node):
                return self.cache.get(node, self.mu, lambda: self._integral(node, None))
            return self._integral(node, xc)
        raise TypeError(f"not an expression node: {node!r}")

    def _moment(self, node):
        from .measure import moment
        if self.mu is None:
            raise CoeffEvaluationError("expression needs a measure but none was given")
        index = node.index if node.kind == "component" else 0
        return float(moment(self.mu, node.p, node.kind, index=index))

    def _integral(self, node, xc):
        pts, w = _measure_atoms(self.mu)
        ycols = [pts[:, k] for k in range(pts.shape[1])]
        if xc is None:
            vals = np.broadcast_to(self._eval(node.body, None, ycols), w.shape)
            return float(np.sum(w * vals))
        n = np.broadcast_shapes(*[np.shape(c) for c in xc])[0] if xc else 1
        chunk = max(1, 2_000_000 // max(1, len(w)))
        out = np.empty(n)
        yb = [c[None, :] for c in ycols]
        for s in range(0, n, chunk):
            xb = [np.broadcast_to(c, (n,))[s:s + chunk, None] for c in xc]
            vals = self._eval(node.body, xb, yb)
            out[s:s + chunk] = np.broadcast_to(vals, (len(xb[0]), len(w))) @ w
        return out


_COMPARE = {">=": np.greater_equal, "<=": np.less_equal, ">": np.greater, "<": np.less}
_NUMPY_CALLS = {"abs": np.abs, "min": np.minimum, "max": np.maximum, "sqrt": np.sqrt,
                "exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos, "sign": np.sign}


def evaluate(node, X, mu=None, cache=None) -> np.ndarray:
    """Evaluate ``node`` at the rows of ``X`` (shape ``(N, d)``) under ``mu``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    xcols = [X[:, k] for k in range(X.shape[1])]
    out = _Evaluator(mu, cache).run(node, xcols)
    return np.broadcast_to(np.asarray(out, dtype=float), (X.shape[0],)).copy()


def evaluate_functional(node, mu, cache=None) -> float:
    """Value of an x-independent functional node under ``mu``."""
    if depends_on_x(node):
        raise ExprError(f"{to_text(node)} depends on x")
    return float(_Evaluator(mu, cache).run(node, None))


# --------------------------------------------------------------------------
# source generation for compiled kernels

def to_source(node, slots: dict) -> str:
    """Python source of ``node`` for a generated kernel.

    ``slots`` maps functional nodes to positions in the parameter vector
    ``th``; coordinates become ``x[i]``.  The helper names (``_div``,
    ``_ge``, ...) are resolved in the namespace the kernel is built in,
    so the same source serves numba scalars and numpy rows.
    """
    if node in slots:
        return f"th[{slots[node]}]"
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Coord):
        if node.integrand:
            raise NotCompilableError("integration variable outside a functional")
        return f"x[{node.index}]"
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg, slots)})"
    if isinstance(node, BinOp):
        a, b = to_source(node.left, slots), to_source(node.right, slots)
        if node.op == "/":
            return f"_div({a}, {b})"
        if node.op == "^":
            if isinstance(node.right, Const) and float(node.right.value).is_integer() \
                    and abs(node.right.value) <= 8:
                return f"_powi({a}, {int(node.right.value)})"
            return f"_pow({a}, {b})"
        return f"({a} {node.op} {b})"
    if isinstance(node, Call):
        return f"_{node.name}({', '.join(to_source(a, slots) for a in node.args)})"
    if isinstance(node, Indicator):
        name = {">=": "_ge", "<=": "_le", ">": "_gt", "<": "_lt"}[node.op]
        return f"{name}({to_source(node.left, slots)}, {to_source(node.right, slots)})"
    if isinstance(node, (Moment, Integral)):
        raise NotCompilableError(f"{to_text(node)} depends on x inside a functional")
    raise TypeError(f"not an expression node: {node!r}")
