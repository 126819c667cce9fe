import math

import numpy as np
import pytest

from kolmofix.coeff import ExprField
from kolmofix.diagnostics import (ConfigurationError, RegularityConfig, coefficient_convergence,
                                  h2_convergence, h2_exponent, h2_gap, integral_gap,
                                  mollification_convergence, projection_regularity, rate_band,
                                  richardson)
from kolmofix.frozen import gaussian_cloud
from kolmofix.measure import DiscreteMeasure, ProjectionWindow

UNIT = ([-1.0], [1.0])
TESTS_1D = [DiscreteMeasure(np.linspace(-2, 2, 401)[:, None]), DiscreteMeasure.dirac([1.5])]


def window(**kw):
    return ProjectionWindow(1, UNIT, **kw)


class TestHelpers:
    @pytest.mark.parametrize("m,gamma,expected", [(0, 1, math.inf), (1, 1, 2.0), (1, 0.5, 1.5),
                                                  (2, 1, 2.0), (3, 1, 3.0)])
    def test_h2_exponent(self, m, gamma, expected):
        assert h2_exponent(m, gamma) == expected

    def test_richardson_exact_power(self):
        hs = [0.4, 0.2, 0.1]
        vals = [2.0 + 3.0 * h ** 2 for h in hs]
        limit, order = richardson(vals, hs)
        assert limit == pytest.approx(2.0, abs=1e-12) and order == pytest.approx(2.0)

    def test_richardson_fallback(self):
        assert richardson([1.0, 2.0, 1.5], [0.4, 0.2, 0.1]) == (1.5, None)

    def test_rate_band(self):
        assert rate_band([100, 400], [0.1, 0.05]) == pytest.approx(1.0)
        assert rate_band([1, 4], [1.0, 0.0]) == math.inf

    def test_regularity_config(self):
        with pytest.raises(ConfigurationError):
            RegularityConfig(window(), gamma=0.0)
        with pytest.raises(ConfigurationError):
            RegularityConfig(window(), bandwidths=(0.1,))


class TestProjection:
    def test_gaussian_marginal(self):
        rep = projection_regularity(gaussian_cloud(100_000, 2, seed=3), RegularityConfig(window()))
        exact = math.sqrt(math.erf(1.0) / (2.0 * math.sqrt(math.pi)))
        assert rep.passed
        assert rep.summary["extrapolated_norm"] == pytest.approx(exact, rel=0.05)

    def test_product_with_point_in_z(self):
        y = gaussian_cloud(20_000, 1, seed=1).points
        prod = DiscreteMeasure(np.hstack([y, np.full_like(y, 0.25)]))
        hs = (0.2, 0.1, 0.05)
        a = projection_regularity(prod, RegularityConfig(window(), bandwidths=hs))
        b = projection_regularity(DiscreteMeasure(y), RegularityConfig(window(), bandwidths=hs))
        assert a.table == b.table

    def test_atom_is_singular(self):
        rep = projection_regularity(DiscreteMeasure(np.zeros((1, 2)), [1.0]),
                                    RegularityConfig(window(), bandwidths=(0.1, 0.05, 0.025)))
        assert not rep.passed and rep.summary["growth_exponent"] >= 0.4

    def test_empty_projection(self):
        from kolmofix.functions import Cutoff
        from kolmofix.measure import MeasureError
        mu = DiscreteMeasure(np.array([[0.0, 9.0]]), [1.0])
        with pytest.raises(MeasureError):
            projection_regularity(mu, RegularityConfig(window(eta=Cutoff(1.0))))


class TestCoefficientConvergence:
    def test_measure_free(self, ou_field):
        seq = [gaussian_cloud(n, 1, seed=n) for n in (10, 100)]
        rep = coefficient_convergence(ou_field, seq, gaussian_cloud(1000, 1), TESTS_1D, (-2, 2))
        assert all(r["gap"] == 0.0 for r in rep.table)

    def test_compact_support_mean_shift(self, compact_field):
        ns = [1, 2, 4, 8]
        rep = coefficient_convergence(compact_field, [DiscreteMeasure.dirac([1.0 / n]) for n in ns],
                                      DiscreteMeasure.dirac([0.0]), TESTS_1D, (-2, 2), labels=ns)
        assert [r["gap"] for r in rep.table] == pytest.approx([2.0 / n for n in ns], rel=1e-12)
        assert rep.passed and rep.summary["loglog_slope"] == pytest.approx(-1.0)

    def test_cubic_monte_carlo_rate(self):
        from scipy.stats import norm
        from kolmofix.measure import GridDensity
        fld = ExprField("x1^2 * MOM(1, abs)^3", ["-2 * x1^3 * MOM(1, abs)"], m=1)
        sigma = GridDensity.from_pdf(lambda x: norm.pdf(x[:, 0]), [(-10.0, 10.0, 20001)])
        sizes = [100, 1000]
        seq = [[gaussian_cloud(n, 1, seed=s, symmetric=False) for s in range(10)] for n in sizes]
        rep = coefficient_convergence(fld, seq, sigma, TESTS_1D, (-2, 2), labels=sizes)
        assert rep.passed and rate_band(sizes, [r["gap"] for r in rep.table]) <= 3.0

    def test_integral_gap_restricted_to_cube(self, compact_field):
        far = DiscreteMeasure.dirac([5.0])
        assert integral_gap(compact_field, DiscreteMeasure.dirac([1.0]), compact_field,
                            DiscreteMeasure.dirac([0.0]), far, (-2, 2)) == 0.0


class TestMollificationConvergence:
    CLOUD = DiscreteMeasure(np.linspace(-1, 1, 4001)[:, None])

    def test_constant(self):
        rep = mollification_convergence(ExprField("2", ["-1"], m=1), [0.5, 0.25], [self.CLOUD], (-1, 1))
        assert all(r["gap"] < 1e-14 for r in rep.table)

    def test_heaviside(self):
        rep = mollification_convergence(ExprField("IND(x1 >= 0)", ["0"], m=1), [0.5, 0.25, 0.125],
                                        [self.CLOUD], (-1, 1))
        # cloud density 1/2 near the jump
        for r in rep.table:
            assert r["gap"] == pytest.approx(r["delta"] / 4 * 0.5, rel=0.1)

    def test_lipschitz(self):
        rep = mollification_convergence(ExprField("2 + abs(x1)", ["0"], m=1), [0.5, 0.25, 0.125],
                                        [self.CLOUD], (-1, 1), kind="quartic")
        assert rep.passed and all(r["gap"] <= 1.0 * r["delta"] for r in rep.table)

    def test_margin_enforced(self):
        w = ProjectionWindow(1, UNIT, Q_y=([-1.5], [1.5]))
        with pytest.raises(ConfigurationError):
            mollification_convergence(ExprField("1", ["0"], m=1), [0.5], [self.CLOUD], (-1, 1), window=w)

    def test_needs_y(self, cubic_field):
        with pytest.raises(ConfigurationError):
            mollification_convergence(cubic_field, [0.5], [self.CLOUD], (-1, 1))


class TestH2:
    def test_m0_sup_gap(self, compact_field):
        g = h2_gap(compact_field, DiscreteMeasure.dirac([0.5]), DiscreteMeasure.dirac([0.0]),
                   z_points=[[0.0], [1.0]])
        assert g == pytest.approx(1.0)

    def test_m1_integral(self):
        fld = ExprField("1", ["INT(y1) * x1"], m=1)
        # |b_n - b| = |x| * 0.5 on [-1, 1]; with p = 2 the integral is 0.25 * 2/3
        g = h2_gap(fld, DiscreteMeasure.dirac([0.5]), DiscreteMeasure.dirac([0.0]), K_y=UNIT,
                   resolution=2001)
        assert g == pytest.approx(0.25 * 2 / 3, rel=1e-5)

    def test_convergence_table(self, compact_field):
        seq = [DiscreteMeasure.dirac([1.0 / n]) for n in (1, 2, 4)]
        rep = h2_convergence(compact_field, seq, DiscreteMeasure.dirac([0.0]), labels=[1, 2, 4],
                             z_points=[[0.0]])
        assert rep.passed and rep.summary["exponent"] == math.inf

    def test_needs_cube(self, ou_field):
        with pytest.raises(ConfigurationError):
            h2_gap(ou_field, DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([0.0]))
