import numpy as np
import pytest

from kolmofix.coeff import ExprField
from kolmofix.fixedpoint import (PicardConfig, PicardError, build_truncated_operator,
                                 localized_solve, picard_solve)
from kolmofix.frozen import gaussian_cloud
from kolmofix.functions import ExprFunction
from kolmofix.lyapunov import LyapunovSpec, apply_generator
from kolmofix.measure import (DiscreteMeasure, GridDensity, TruncationScheme, compensate_truncate,
                              lyapunov_integral, marginal_w1, moment)


def gaussian_start(n=20_000):
    return gaussian_cloud(n, 1, seed=0)


class TestPicard:
    def test_cubic_goes_to_origin(self, cubic_field):
        rep = picard_solve(cubic_field, gaussian_start(), PicardConfig(cells=401, V="x1^2/2", R=1.5))
        assert rep.converged
        assert moment(rep.measure, 1, "abs") <= 0.05
        assert rep.assumptions["moment_budget"]["within_budget"]

    def test_compact_support(self, compact_field):
        rep = picard_solve(compact_field, gaussian_start(), PicardConfig(V="x1^2"))
        assert rep.converged
        assert abs(moment(rep.measure, 1, "component")) <= 0.02
        assert lyapunov_integral(rep.measure, "x1^2") <= 1.05

    def test_measure_free_field_is_constant(self, ou_field):
        rep = picard_solve(ou_field, DiscreteMeasure.dirac([3.0]), PicardConfig())
        assert rep.converged and len(rep.iterates) == 2
        assert rep.iterates[1]["distance"] == 0.0

    def test_first_step_undamped(self, compact_field):
        rep = picard_solve(compact_field, gaussian_start(), PicardConfig(theta=0.25))
        assert rep.iterates[0]["theta"] == 1.0 and rep.iterates[1]["theta"] == 0.25

    def test_iterates_keep_mass(self, compact_field):
        masses = []
        picard_solve(compact_field, gaussian_start(), PicardConfig(),
                     callback=lambda k, mu, e: masses.append(mu.mass))
        assert np.allclose(masses, 1.0, atol=1e-12)

    def test_diverged(self):
        fld = ExprField("1", ["1 + 2 * INT(y1) - x1"])
        rep = picard_solve(fld, DiscreteMeasure.dirac([0.0]),
                           PicardConfig(V="x1^2", R=1.0, domain=(-40, 40), cells=800))
        assert rep.status == "diverged"
        assert rep.iterates[-1]["v_moment"] > 10.0

    def test_cycle_reported(self):
        fld = ExprField("1", ["1 - INT(y1) - x1"])
        rep = picard_solve(fld, DiscreteMeasure.dirac([0.0]), PicardConfig(theta=1.0, max_iter=6))
        assert rep.status == "max_iter"
        assert rep.cycle is not None and rep.cycle["period"] == 2

    def test_inner_failure_wrapped(self, halfline_field):
        cfg = PicardConfig(backend="closed", domain=(-1, 1))
        with pytest.raises(PicardError) as info:
            picard_solve(halfline_field, DiscreteMeasure.dirac([1.0]), cfg)
        assert info.value.iteration == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PicardConfig(theta=0.0)
        with pytest.raises(ValueError):
            PicardConfig(backend="spectral")

    def test_report_dict(self, ou_field):
        d = picard_solve(ou_field, DiscreteMeasure.dirac([0.0])).to_dict()
        assert d["status"] == "converged" and d["iterations"] == 2


class TestTruncatedOperator:
    def setup_method(self):
        self.V = ExprFunction("x1^2/2")
        self.scheme = TruncationScheme(2.0, 2.0, self.V)
        self.mu = DiscreteMeasure(np.array([[-1.0], [0.5], [4.0]]), [0.3, 0.3, 0.4])

    def test_inside_ball(self, cubic_field):
        tf = build_truncated_operator(cubic_field, self.scheme)
        X = np.array([[-1.5], [0.2], [2.0]])
        nu = compensate_truncate(self.mu, self.scheme)
        f = ExprFunction("sin(x1)")
        assert np.allclose(apply_generator(tf, self.mu, f, X), apply_generator(cubic_field, nu, f, X),
                           atol=1e-14)

    def test_outside_ball(self, cubic_field):
        tf = build_truncated_operator(cubic_field, self.scheme)
        X = np.array([[3.5], [-10.0]])
        for f in ("sin(x1)", "x1^4"):
            assert np.allclose(apply_generator(tf, self.mu, f, X), -2.0 * self.V.value(X), atol=1e-12)

    def test_compactly_supported_measure_unchanged(self, cubic_field):
        inside = DiscreteMeasure(np.array([[-1.0], [1.5]]), [0.5, 0.5])
        tf = build_truncated_operator(cubic_field, self.scheme)
        nu = tf.inner_measure(inside)
        assert nu.weights[-1] == 0.0 and np.allclose(nu.weights[:2], 0.5)

    def test_bad_variant(self, cubic_field):
        with pytest.raises(ValueError):
            build_truncated_operator(cubic_field, self.scheme, "reflect")


class TestLocalized:
    def test_ou_large_radius(self, ou_field):
        spec = LyapunovSpec("x1^2/2", C=1.0, Lambda=2.0)
        rep = localized_solve(ou_field, spec, [8.0], PicardConfig())
        ref = picard_solve(ou_field, DiscreteMeasure.dirac([0.0])).measure
        # compare on the common grid cells
        mu = rep.measure
        assert isinstance(mu, GridDensity)
        lo = int(round((ref.axes[0].lower - mu.axes[0].lower) / mu.axes[0].h))
        vals = mu.values[lo:lo + ref.axes[0].cells]
        assert np.sum(np.abs(vals - ref.values)) * ref.axes[0].h <= 1e-3

    @pytest.mark.parametrize("variant", ["origin-atom", "none"])
    def test_cubic_uniform_bound(self, cubic_field, variant):
        spec = LyapunovSpec("x1^2/2", C=3.0, Lambda=2.0)
        rep = localized_solve(cubic_field, spec, [4, 6, 8], PicardConfig(cells=401),
                              mu0=gaussian_start(), compensate=variant)
        assert rep.status == "converged"
        assert all(lv["integral_V"] <= 1.5 * 1.1 for lv in rep.levels)
        assert rep.assumptions["uniform_bound"]["passed"]

    def test_single_radius_is_one_solve(self, compact_field):
        spec = LyapunovSpec("x1^2", C=1.0, Lambda=1.0)
        cfg = PicardConfig()
        rep = localized_solve(compact_field, spec, [5.0], cfg, mu0=gaussian_start())
        tf = build_truncated_operator(compact_field, TruncationScheme(5.0, 1.0, spec.V))
        direct = picard_solve(tf, gaussian_start(), PicardConfig(V=spec.V, domain=(-8.0, 8.0)))
        assert marginal_w1(rep.measure, direct.measure) == 0.0

    def test_sequence_validation(self, ou_field):
        with pytest.raises(ValueError):
            localized_solve(ou_field, LyapunovSpec("x1^2"), [6, 4])

    def test_particle_backend_with_killing(self, ou_field):
        from kolmofix.frozen import SdeConfig
        spec = LyapunovSpec("x1^2/2", C=1.0, Lambda=2.0)
        cfg = PicardConfig(backend="particle",
                           sde=SdeConfig(dt=1e-2, T=20, burn_in=2, n_particles=200, n_snapshots=20))
        rep = localized_solve(ou_field, spec, [1.0], cfg)
        # killing beyond |x| = 1 pulls the second moment below the untruncated value 1
        assert moment(rep.measure, 2, "abs") < 0.9
