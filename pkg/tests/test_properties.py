"""Property-based invariants."""

import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kolmofix import expr as ex
from kolmofix.coeff import ExprField
from kolmofix.functions import ExprFunction, LinearCombination
from kolmofix.lyapunov import apply_generator
from kolmofix.measure import (DiscreteMeasure, ProjectionWindow, TruncationScheme,
                              compensate_truncate, lyapunov_integral, mixture, moment, project_y,
                              wasserstein_1d)
from kolmofix.functions import Cutoff

coords = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


@st.composite
def measures(draw, dim=1, max_atoms=12):
    k = draw(st.integers(1, max_atoms))
    pts = draw(arrays(float, (k, dim), elements=coords))
    raw = draw(arrays(float, k, elements=st.floats(0.01, 1.0)))
    return DiscreteMeasure(pts, raw / raw.sum())


@given(measures(), st.floats(0.5, 10), st.floats(0.1, 5))
def test_compensation_conserves_mass(mu, n, lam):
    out = compensate_truncate(mu, TruncationScheme(n, lam, "x1^2"))
    assert abs(out.mass - 1.0) <= 1e-12


@given(measures(), st.floats(0.5, 10))
def test_compensation_moment_bound(mu, n):
    V = ExprFunction("1 + x1^2")
    out = compensate_truncate(mu, TruncationScheme(n, 1.0, V))
    assert lyapunov_integral(out, V) <= lyapunov_integral(mu, V) + 1.0 + 1e-12


@given(measures(), measures(), measures())
def test_w1_axioms(a, b, c):
    ab, ba = wasserstein_1d(a, b), wasserstein_1d(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-12
    assert wasserstein_1d(a, a) <= 1e-12
    assert wasserstein_1d(a, c) <= ab + wasserstein_1d(b, c) + 1e-12


@given(measures(dim=2), st.sampled_from(["abs", "radial", "component"]))
def test_zeroth_moment_is_mass(mu, kind):
    assert abs(moment(mu, 0, kind) - mu.mass) <= 1e-12


@given(measures(), measures(), st.floats(0, 1))
def test_mixture_mass(a, b, theta):
    assert abs(mixture(a, b, theta).mass - 1.0) <= 1e-12


@given(measures(dim=2), st.floats(0.2, 5))
def test_projection_mass(mu, radius):
    eta = Cutoff(radius)
    p = project_y(mu, ProjectionWindow(1, ([-1.0], [1.0]), eta=eta))
    expected = float(np.sum(mu.weights * eta.value(mu.points[:, 1:])))
    assert abs(p.mass - expected) <= 1e-12


@given(measures(max_atoms=6), st.floats(-3, 3), st.floats(-3, 3),
       arrays(float, 5, elements=st.floats(-4, 4)))
def test_generator_linear(mu, alpha, beta, xs):
    fld = ExprField("1 + x1^2 * MOM(1, abs)", ["INT(y1) - x1^3"], m=1)
    f, g = ExprFunction("sin(x1) + x1^3"), ExprFunction("exp(-x1^2)")
    X = xs[:, None]
    lhs = apply_generator(fld, mu, LinearCombination([(alpha, f), (beta, g)]), X)
    rhs = alpha * apply_generator(fld, mu, f, X) + beta * apply_generator(fld, mu, g, X)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * (1 + np.max(np.abs(rhs))))


# random expressions for the printer/parser round trip
leaves = st.one_of(st.floats(0, 100, allow_nan=False).map(lambda v: f"{v!r}"),
                   st.sampled_from(["x1", "x2", "pi", "MOM(2, abs)", "MOM(1, y2)", "INT(y1*x1)"]))


def _compose(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*", "/", "^"]), children)
        .map(lambda t: f"({t[0]}) {t[1]} ({t[2]})"),
        children.map(lambda c: f"-({c})"),
        st.tuples(st.sampled_from(["abs", "sin", "exp", "sqrt"]), children).map(lambda t: f"{t[0]}({t[1]})"),
        st.tuples(children, children).map(lambda t: f"max({t[0]}, {t[1]})"),
        st.tuples(children, st.sampled_from([">=", "<"]), children).map(lambda t: f"IND({t[0]} {t[1]} {t[2]})"),
    )


@given(st.recursive(leaves, _compose, max_leaves=12))
def test_parse_print_parse(text):
    node = ex.parse(text)
    printed = ex.to_text(node)
    assert ex.parse(printed) == node
    assert ex.to_text(ex.parse(printed)) == printed


@given(measures(max_atoms=5), st.floats(-3, 3))
def test_evaluation_pure(mu, x):
    node = ex.parse("x1^2 * MOM(1, abs)^3 + INT(sin(y1 - x1))")
    a = ex.evaluate(node, [[x]], mu)
    b = ex.evaluate(node, [[x]], mu)
    assume(np.all(np.isfinite(a)))
    assert a.tobytes() == b.tobytes()
