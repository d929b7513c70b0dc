import numpy as np
import pytest

from optim.minimize import CONVERGED, LINE_SEARCH_FAILURE, BoxSpec, minimize_box, minimize_scalar_bounded


def shifted_quadratic(target):
    target = np.asarray(target, dtype=float)

    def objective(x):
        return float(np.sum((x - target) ** 2)), 2.0 * (x - target)

    return objective


class TestMinimizeBox:
    def test_unconstrained_minimum_inside_box(self):
        x, report = minimize_box(shifted_quadratic([1.0, 2.0, 3.0]), np.zeros(3), BoxSpec.floor(3, 0.0))
        np.testing.assert_allclose(x, [1.0, 2.0, 3.0], atol=1e-6)
        assert report.reason == CONVERGED

    def test_active_lower_bound(self):
        x, _ = minimize_box(shifted_quadratic([-1.0, 2.0]), np.ones(2), BoxSpec.floor(2, 1e-12))
        assert x[0] == pytest.approx(1e-12)
        assert x[1] == pytest.approx(2.0, abs=1e-6)

    def test_start_is_projected_and_never_beaten_by_worse_point(self):
        objective = shifted_quadratic([5.0])
        x0 = np.array([-3.0])
        x, report = minimize_box(objective, x0, BoxSpec.floor(1, 0.0))
        assert x[0] >= 0.0
        assert report.value <= objective(np.array([0.0]))[0]

    def test_non_finite_start(self):
        def objective(x):
            return float("nan"), np.zeros_like(x)

        with pytest.raises(ValueError, match="not finite"):
            minimize_box(objective, np.ones(2), BoxSpec.unbounded(2))

    def test_rosenbrock(self):
        def rosenbrock(x):
            a, b = x
            value = (1 - a) ** 2 + 100 * (b - a ** 2) ** 2
            grad = np.array([-2 * (1 - a) - 400 * a * (b - a ** 2), 200 * (b - a ** 2)])
            return value, grad

        x, _ = minimize_box(rosenbrock, np.array([-1.2, 1.0]), BoxSpec.unbounded(2), tol=1e-12, gtol=1e-9)
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-4)

    def test_large_constant_does_not_stop_the_search(self):
        quadratic = shifted_quadratic([3.0, -2.0])

        def offset(x):
            value, grad = quadratic(x)
            return 1e9 + value, grad

        x, report = minimize_box(offset, np.zeros(2), BoxSpec.unbounded(2))
        np.testing.assert_allclose(x, [3.0, -2.0], atol=1e-3)
        assert report.value == pytest.approx(1e9)

    def test_non_finite_region_ends_with_best_point(self):
        def objective(x):
            if x[0] > 2.0:
                return float("nan"), np.full_like(x, np.nan)
            return float((x[0] - 5.0) ** 2), 2.0 * (x - 5.0)

        x, report = minimize_box(objective, np.zeros(1), BoxSpec.unbounded(1))
        assert report.reason == LINE_SEARCH_FAILURE
        assert x[0] <= 2.0
        assert report.value == pytest.approx(objective(x)[0])
        assert report.value < 25.0

    def test_box_validation(self):
        with pytest.raises(ValueError):
            BoxSpec(np.ones(2), np.zeros(2))


class TestMinimizeScalarBounded:
    def test_interior_minimum(self):
        assert minimize_scalar_bounded(lambda x: (x - 2.0) ** 2, 0.0, 5.0) == pytest.approx(2.0, abs=1e-6)

    def test_minimum_on_bound_is_exact(self):
        assert minimize_scalar_bounded(lambda x: x, 1.0, 3.0) == 1.0
        assert minimize_scalar_bounded(lambda x: -x, 1.0, 3.0) == 3.0

    def test_boundary_minimum(self):
        assert minimize_scalar_bounded(lambda x: (x - 10.0) ** 2, 0.0, 5.0) == 5.0

    def test_cosine(self):
        assert minimize_scalar_bounded(np.cos, 0.0, 2 * np.pi) == pytest.approx(np.pi, abs=1e-6)

    def test_empty_interval(self):
        with pytest.raises(ValueError):
            minimize_scalar_bounded(lambda x: x, 1.0, 1.0)
