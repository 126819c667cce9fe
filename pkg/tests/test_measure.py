import math

import numpy as np
import pytest

from kolmofix.functions import ExprFunction
from kolmofix.measure import (DiscreteMeasure, GridDensity, MeasureError, ProjectionWindow,
                              TruncationScheme, compensate_truncate, in_PR, kde_lr_norm,
                              lyapunov_integral, marginal_distance, marginal_w1, mass_defect,
                              mixture, moment, project_y, v_weak_gap, wasserstein_1d)
from kolmofix.frozen import gaussian_cloud
from kolmofix.functions import Cutoff

# ||standard normal density||_{L^2([-1, 1])} = sqrt(erf(1) / (2 sqrt(pi)))
NORMAL_L2_UNIT = math.sqrt(math.erf(1.0) / (2.0 * math.sqrt(math.pi)))


def two_point(a=-1.0, b=1.0):
    return DiscreteMeasure(np.array([[a], [b]]), [0.5, 0.5])


class TestConstruction:
    def test_default_weights_are_uniform(self):
        mu = DiscreteMeasure(np.arange(4.0))
        assert mu.dim == 1 and mu.size == 4
        assert mu.mass == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("w", [[-0.1, 1.1], [0.7, 0.7], [np.nan, 1.0]])
    def test_rejects_bad_weights(self, w):
        with pytest.raises(MeasureError):
            DiscreteMeasure(np.zeros((2, 1)), w)

    def test_length_mismatch(self):
        with pytest.raises(MeasureError):
            DiscreteMeasure(np.zeros((3, 1)), [0.5, 0.5])

    def test_probability_flag(self):
        with pytest.raises(MeasureError):
            DiscreteMeasure(np.zeros((2, 1)), [0.25, 0.5], probability=True)
        DiscreteMeasure(np.zeros((2, 1)), [0.25, 0.5])

    def test_immutable(self):
        mu = two_point()
        with pytest.raises(ValueError):
            mu.weights[0] = 0.3

    def test_csv_round_trip(self):
        mu = DiscreteMeasure(np.array([[0.1, -2.0], [1.0 / 3, 5.0]]), [0.25, 0.75])
        back = DiscreteMeasure.from_csv(mu.to_csv())
        assert np.array_equal(back.points, mu.points)
        assert np.array_equal(back.weights, mu.weights)

    def test_grid_json_round_trip(self):
        g = GridDensity([(0.0, 1.0, 5)], np.ones(5), probability=True)
        back = GridDensity.from_json(g.to_json(), probability=True)
        assert back.axes == g.axes and np.array_equal(back.values, g.values)

    def test_grid_negative_rejected(self):
        with pytest.raises(MeasureError):
            GridDensity([(0.0, 1.0, 2)], [1.0, -1.0])


class TestMoments:
    def test_dirac_origin(self):
        assert moment(DiscreteMeasure.dirac([0.0]), 1, "abs") == 0.0

    def test_symmetric_radial(self):
        assert moment(two_point(), 2, "radial") == pytest.approx(1.0, abs=1e-15)

    def test_uniform_grid_component(self):
        g = GridDensity([(0.0, 1.0, 100)], np.ones(100), probability=True)
        h = 0.01
        assert abs(moment(g, 1, "component", 0) - 0.5) <= h * h

    def test_lyapunov_integral_examples(self):
        V = ExprFunction("(1 + x1^2)^(1/2)")
        assert lyapunov_integral(DiscreteMeasure.dirac([0.0]), V) == 1.0
        assert lyapunov_integral(two_point(), "x1^2/2") == pytest.approx(0.5, abs=1e-15)

    def test_gaussian_grid_second_moment(self):
        g = GridDensity.from_pdf(lambda x: np.exp(-x[:, 0] ** 2 / 2), [(-8.0, 8.0, 400)])
        assert lyapunov_integral(g, "x1^2/2") == pytest.approx(0.5, abs=1e-4)

    def test_in_pr(self):
        assert in_PR(two_point(), "x1^2/2", 0.5)
        assert not in_PR(two_point(), "x1^2/2", 0.49)


class TestDistances:
    def test_examples(self):
        d0, d1 = DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([1.0])
        assert wasserstein_1d(d0, d1) == 1.0
        assert wasserstein_1d(two_point(), two_point(), p=2) == 0.0
        mixed = DiscreteMeasure(np.array([[0.0], [1.0]]), [0.5, 0.5])
        # only one coupling of two atoms against one: cost 0.5 * 0 + 0.5 * 1
        assert wasserstein_1d(mixed, d0) == pytest.approx(0.5, abs=1e-15)

    def test_w1_matches_cdf_formula(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=50), rng.normal(1.0, 2.0, size=70)
        mu, nu = DiscreteMeasure(x), DiscreteMeasure(y)
        grid = np.sort(np.concatenate([x, y]))
        F = np.searchsorted(np.sort(x), grid[:-1], side="right") / 50
        G = np.searchsorted(np.sort(y), grid[:-1], side="right") / 70
        assert wasserstein_1d(mu, nu) == pytest.approx(np.sum(np.abs(F - G) * np.diff(grid)), rel=1e-12)

    def test_marginal_distances(self):
        mu = DiscreteMeasure(np.array([[0.0, 0.0]]), [1.0])
        nu = DiscreteMeasure(np.array([[1.0, 3.0]]), [1.0])
        assert marginal_w1(mu, nu) == 3.0
        V = ExprFunction("x1^2 + x2^2", 2)
        assert marginal_distance(mu, nu, V) == pytest.approx(3.0 + 10.0)

    def test_v_weak_gap_examples(self):
        d0, d1 = DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([1.0])
        assert v_weak_gap(two_point(), two_point(), "1 + x1^2", ["x1"]) == 0.0
        assert v_weak_gap(d0, d1, "1 + x1^2", ["x1"]) == pytest.approx(1.0)

    def test_v_weak_gap_monte_carlo_rate(self):
        # sampling error of smooth functionals decays like n^{-1/2}
        g = GridDensity.from_pdf(lambda x: np.exp(-x[:, 0] ** 2 / 2), [(-10.0, 10.0, 4000)])
        fns = ["x1", "x1^2", "sin(x1)"]
        sizes = [100, 1000, 10000]
        gaps = [np.mean([v_weak_gap(DiscreteMeasure(np.random.default_rng(s).normal(size=n)), g,
                                    "1 + x1^2", fns) for s in range(20)]) for n in sizes]
        slope = np.polyfit(np.log(sizes), np.log(gaps), 1)[0]
        assert -0.7 < slope < -0.3


class TestMixtureTruncation:
    def test_mixture_mass_and_thinning(self):
        mu = mixture(DiscreteMeasure.dirac([0.0]), DiscreteMeasure(np.arange(10.0)), 0.3, max_atoms=5)
        assert mu.size == 5 and mu.mass == pytest.approx(1.0, abs=1e-14)

    def test_grid_mixture_blends_values(self):
        a = GridDensity([(0.0, 1.0, 2)], [2.0, 0.0])
        b = GridDensity([(0.0, 1.0, 2)], [0.0, 2.0])
        assert np.allclose(mixture(a, b, 0.25).values, [1.5, 0.5])

    def test_theta_range(self):
        with pytest.raises(MeasureError):
            mixture(two_point(), two_point(), 1.5)

    def test_inside_ball_unchanged(self):
        sch = TruncationScheme(2.0, 1.0, "x1^2")
        out = compensate_truncate(two_point(), sch)
        assert mass_defect(two_point(), sch) == 1.0
        assert np.allclose(out.weights[-1], 0.0)
        assert np.allclose(out.weights[:2], 0.5)

    def test_far_dirac_goes_to_origin(self):
        sch = TruncationScheme(2.0, 1.0, "x1^2")
        out = compensate_truncate(DiscreteMeasure.dirac([4.0]), sch)
        assert out.size == 1 and out.points[0, 0] == 0.0 and out.weights[0] == 1.0

    def test_half_far(self):
        sch = TruncationScheme(2.0, 1.0, "x1^2")
        out = compensate_truncate(two_point(0.0, 5.0), sch)
        pts, w = out.points[:, 0], out.weights
        assert np.all(pts == 0.0) and w.sum() == pytest.approx(1.0, abs=1e-15)

    def test_subprobability_variant(self):
        sch = TruncationScheme(2.0, 1.0, "x1^2")
        out = compensate_truncate(two_point(0.0, 5.0), sch, subprobability=True)
        assert out.mass == pytest.approx(0.5)

    def test_cutoff_shape(self):
        c = Cutoff(2.0)
        v = c.value(np.array([[0.0], [2.0], [2.5], [3.0], [7.0]]))
        assert v[0] == v[1] == 1.0 and 0 < v[2] < 1 and v[3] == v[4] == 0.0


class TestProjection:
    def test_product_with_dirac(self):
        mu = DiscreteMeasure(np.array([[0.3, -0.5], [0.3, 0.5]]), [0.5, 0.5])
        p = project_y(mu, ProjectionWindow(1, ([-1.0], [1.0])))
        assert np.all(p.points == 0.3) and p.mass == pytest.approx(1.0)

    def test_eta_misses_support(self):
        mu = DiscreteMeasure(np.array([[0.0, 10.0]]), [1.0])
        p = project_y(mu, ProjectionWindow(1, ([-1.0], [1.0]), eta=Cutoff(1.0)))
        assert p.is_empty

    def test_gaussian_projected_mass(self):
        from scipy import integrate, stats
        eta = Cutoff(1.0)
        expected = integrate.quad(lambda z: eta.value(np.array([[z]]))[0] * stats.norm.pdf(z), -3, 3)[0]
        mu = gaussian_cloud(100_000, 2, seed=4)
        p = project_y(mu, ProjectionWindow(1, ([-1.0], [1.0]), eta=eta))
        assert p.mass == pytest.approx(expected, abs=5e-3)

    def test_window_validation(self):
        with pytest.raises(MeasureError):
            ProjectionWindow(1, ([0.0], [0.0]))
        with pytest.raises(MeasureError):
            ProjectionWindow(1, ([-1.0], [1.0]), Q_y=([-0.5], [2.0]))


class TestKde:
    def test_far_atom(self):
        val = kde_lr_norm(DiscreteMeasure.dirac([50.0]), ([-1.0], [1.0]), 2, bandwidth=0.01)
        assert val < 1e-12

    def test_gaussian_l2(self):
        mu = gaussian_cloud(100_000, 1, seed=1)
        val = kde_lr_norm(mu, ([-1.0], [1.0]), 2)
        assert val == pytest.approx(NORMAL_L2_UNIT, rel=0.03)

    def test_uniform_l2(self):
        mu = DiscreteMeasure(np.random.default_rng(2).uniform(0, 1, 100_000))
        val = kde_lr_norm(mu, ([0.0], [1.0]), 2)
        assert val == pytest.approx(1.0, rel=0.05)

    def test_numba_and_numpy_agree(self):
        mu = gaussian_cloud(5000, 2, seed=1)
        a = kde_lr_norm(mu, ([-1, -1], [1, 1]), 2, 0.2, backend="numba")
        b = kde_lr_norm(mu, ([-1, -1], [1, 1]), 2, 0.2, backend="numpy")
        assert a == pytest.approx(b, rel=1e-12)
