import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from ebfield.dynamics import ConstantMean, Hyperparameters, NaturalSpline, Poisson1D
from ebfield.errors import InvalidInputError
from ebfield.model import RegressionGrid
from ebfield.scenario import HeatTruth

DOMAIN = (0.0, 2.0 * math.pi / 3.0)


def heat(n=10):
    return Poisson1D(np.linspace(*DOMAIN, n), boundary=(3.0, 0.0))


class TestHyperparameters:
    def test_bounds_checks(self):
        hp = Hyperparameters([1.0, 5.0], [0.0, 0.0], [2.0, 4.0])
        assert not hp.within_bounds()
        np.testing.assert_array_equal(hp.clip([3.0, -1.0]), [2.0, 0.0])

    def test_inverted_box(self):
        with pytest.raises(InvalidInputError):
            Hyperparameters([1.0], [2.0], [1.0])

    def test_wrong_length_rejected_by_model(self):
        with pytest.raises(InvalidInputError):
            heat().hyperparameters([6.0, 3.0])


class TestPoissonDiscretization:
    def test_residual_vanishes_at_solution(self):
        dyn = heat()
        gamma = [6.0, 3.0, 3.0]
        np.testing.assert_allclose(dyn.residual(dyn.solve_mean(gamma), gamma), 0.0, atol=1e-9)

    def test_boundary_values_exact(self):
        mu = heat().solve_mean([6.0, 3.0, 3.0])
        assert mu[0] == 3.0 and mu[-1] == 0.0

    def test_source(self):
        dyn = heat()
        s = np.array([0.1, 0.7])
        np.testing.assert_allclose(dyn.source(s, [2.0, 1.5, 0.3]),
                                   -2.0 * 1.5 ** 2 * np.sin(1.5 * s + 0.3))

    def test_zero_source_gives_linear_profile(self):
        dyn = heat()
        mu = dyn.solve_mean([0.0, 1.0, 0.0])
        np.testing.assert_allclose(mu, np.linspace(3.0, 0.0, 10), atol=1e-14)

    def test_exact_for_quadratic_fields(self):
        # central differences are exact for quadratics; a constant source
        # (omega -> small, phi = pi/2 gives w ~ -A w^2) checks the stencil
        dyn = Poisson1D(np.linspace(0.0, 1.0, 6), boundary=(0.0, 0.0), lower=(0, 1e-9, -4),
                        upper=(1e9, 10, 4))
        a, w = 1e6, 1e-3
        mu = dyn.solve_mean([a, w, math.pi / 2])
        c = -a * w * w  # constant curvature
        s = dyn.locations
        np.testing.assert_allclose(mu, 0.5 * c * s * (s - 1.0), rtol=1e-6)

    def test_second_order_at_sensors(self):
        truth = HeatTruth(6.0, 3.0, 3.0, *DOMAIN, 3.0, 0.0)
        errs = []
        for n in (11, 21, 41):
            dyn = heat(n)
            errs.append(np.max(np.abs(dyn.solve_mean(truth.gamma) - truth(dyn.locations))))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.9)

    def test_mean_neighbors(self):
        dyn = heat()
        assert dyn.mean_neighbors(0) == [0]
        assert dyn.mean_neighbors(4) == [3, 4, 5]
        assert dyn.mean_neighbors(9) == [9]

    @pytest.mark.parametrize("locs", [[0.0, 1.0], [0.0, 1.0, 3.0], [0.0, 0.0, 0.0]])
    def test_rejects_bad_locations(self, locs):
        with pytest.raises(InvalidInputError):
            Poisson1D(locs)

    def test_rejects_two_dimensional(self):
        with pytest.raises(InvalidInputError):
            Poisson1D(np.zeros((4, 2)))


class TestPoissonJacobian:
    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(0.5, 15.0), w=st.floats(0.3, 6.0), p=st.floats(-3.0, 3.0))
    def test_matches_central_differences(self, a, w, p):
        dyn = heat(12)
        gamma = np.array([a, w, p])
        jac = dyn.mean_jacobian(gamma)
        for k in range(3):
            h = 1e-6 * max(1.0, abs(gamma[k]))
            e = np.zeros(3)
            e[k] = h
            fd = (dyn.solve_mean(gamma + e) - dyn.solve_mean(gamma - e)) / (2 * h)
            np.testing.assert_allclose(jac[:, k], fd, rtol=1e-5, atol=1e-6 * (1 + np.abs(fd).max()))

    def test_boundary_rows_zero(self):
        jac = heat().mean_jacobian([6.0, 3.0, 3.0])
        assert np.all(jac[0] == 0.0) and np.all(jac[-1] == 0.0)


class TestPoissonRegressionMean:
    def test_pinned_at_sensors(self):
        dyn = heat()
        gamma = [6.0, 3.0, 3.0]
        np.testing.assert_array_equal(dyn.regression_mean(gamma, RegressionGrid(dyn.locations)),
                                      dyn.solve_mean(gamma))

    def test_single_interior_point_solves_local_stencil(self):
        dyn = heat()
        gamma = np.array([6.0, 3.0, 3.0])
        mu = dyn.solve_mean(gamma)
        i, t = 3, 0.3
        s = dyn.locations[i] + t * dyn.spacing
        hm, hp = t * dyn.spacing, (1 - t) * dyn.spacing
        val = dyn.regression_mean(gamma, RegressionGrid([s]))[0]
        lhs = 2.0 / (hm + hp) * ((mu[i + 1] - val) / hp - (val - mu[i]) / hm)
        assert lhs == pytest.approx(dyn.source(np.array([s]), gamma)[0], rel=1e-10)

    def test_order_of_grid_points_irrelevant(self, rng):
        dyn = heat()
        gamma = [6.0, 3.0, 3.0]
        pts = rng.uniform(*DOMAIN, size=50)
        perm = rng.permutation(50)
        a = dyn.regression_mean(gamma, RegressionGrid(pts))
        b = dyn.regression_mean(gamma, RegressionGrid(pts[perm]))
        np.testing.assert_allclose(a[perm], b, atol=1e-13)

    def test_outside_domain_rejected(self):
        with pytest.raises(InvalidInputError):
            heat().regression_mean([6.0, 3.0, 3.0], RegressionGrid([-0.5]))

    def test_split_grid(self):
        dyn = heat()
        s = dyn.locations
        coincident, groups = dyn.split_grid([s[0], 0.5 * (s[2] + s[3]), s[4]])
        assert coincident == {0: 0, 2: 4}
        assert groups == {2: [1]}


class TestDistributedForm:
    def test_symmetric_system_reproduces_solution(self):
        dyn = heat()
        gamma = [6.0, 3.0, 3.0]
        s_mat = dyn.symmetric_system().toarray()
        assert np.allclose(s_mat, s_mat.T)
        assert np.min(np.linalg.eigvalsh(s_mat)) > 0
        rhs = np.array([dyn.symmetric_rhs(i, gamma) for i in range(dyn.n)])
        np.testing.assert_allclose(np.linalg.solve(s_mat, rhs), dyn.solve_mean(gamma), atol=1e-12)

    def test_rhs_jacobian_matches_jacobian(self):
        dyn = heat()
        gamma = [5.0, 2.5, 2.5]
        drhs = np.array([dyn.symmetric_rhs_jacobian(i, gamma) for i in range(dyn.n)])
        np.testing.assert_allclose(np.linalg.solve(dyn.symmetric_system().toarray(), drhs),
                                   dyn.mean_jacobian(gamma), atol=1e-10)


class TestNaturalSpline:
    knots = np.array([-15.0, -8.0, -2.0, 4.0, 14.0])

    @settings(max_examples=30)
    @given(values=st.lists(st.floats(-50, 50), min_size=5, max_size=5))
    def test_matches_scipy_natural_cubic_spline(self, values):
        dyn = NaturalSpline(np.linspace(-15, 14, 12), self.knots)
        s = np.linspace(-20.0, 20.0, 257)  # includes extrapolation
        ref = CubicSpline(self.knots, values, bc_type="natural", extrapolate=True)(s)
        np.testing.assert_allclose(dyn.basis(s) @ np.asarray(values), ref,
                                   atol=1e-11 * (1 + np.max(np.abs(values))))

    def test_interpolates_knot_values(self):
        dyn = NaturalSpline(self.knots, self.knots)
        np.testing.assert_allclose(dyn.basis(self.knots), np.eye(5), atol=1e-15)

    def test_partition_of_unity(self):
        dyn = NaturalSpline(self.knots, self.knots)
        s = np.linspace(-30, 30, 601)
        np.testing.assert_allclose(dyn.basis(s).sum(axis=1), 1.0, atol=1e-12)

    def test_two_knots_is_linear(self):
        dyn = NaturalSpline([0.0, 1.0], [0.0, 2.0])
        np.testing.assert_allclose(dyn.basis([3.0]) @ [1.0, 5.0], [7.0])

    def test_from_indices_one_based(self):
        s = np.arange(12.0)
        dyn = NaturalSpline.from_indices(s, [1, 3, 5, 7, 12])
        np.testing.assert_array_equal(dyn.knots, [0.0, 2.0, 4.0, 6.0, 11.0])

    @pytest.mark.parametrize("idx", [[0, 3], [1, 13]])
    def test_from_indices_out_of_range(self, idx):
        with pytest.raises(InvalidInputError):
            NaturalSpline.from_indices(np.arange(12.0), idx)

    @pytest.mark.parametrize("knots", [[1.0], [2.0, 1.0], [1.0, 1.0]])
    def test_invalid_knots(self, knots):
        with pytest.raises(InvalidInputError):
            NaturalSpline([0.0, 1.0, 2.0], knots)

    def test_linear_model_api(self):
        s = np.linspace(0, 10, 6)
        dyn = NaturalSpline(s, [0.0, 5.0, 10.0])
        gamma = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(dyn.solve_mean(gamma), dyn.train_basis @ gamma)
        np.testing.assert_allclose(dyn.residual(dyn.solve_mean(gamma), gamma), 0.0)
        assert dyn.local_mean(2, gamma) == pytest.approx(dyn.solve_mean(gamma)[2])
        assert dyn.mean_neighbors(3) == [3]
        assert dyn.explicit and dyn.linear


class TestConstantMean:
    def test_constant(self):
        dyn = ConstantMean([0.0, 1.0, 2.0])
        np.testing.assert_array_equal(dyn.solve_mean([4.0]), [4.0, 4.0, 4.0])
        np.testing.assert_array_equal(dyn.regression_mean([4.0], RegressionGrid([7.0])), [4.0])
