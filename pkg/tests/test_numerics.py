import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handbones.numerics import (
    ObjectiveEvaluation,
    OptimizerConfig,
    SingularSystemError,
    check_gradient,
    lbfgs_minimize,
    pca,
    ridge_least_squares,
)


def quadratic(center):
    center = np.asarray(center, dtype=float)

    def objective(x):
        r = x - center
        return ObjectiveEvaluation(float(r @ r), 2.0 * r)

    return objective


def rosenbrock(x):
    a, b = 1.0, 100.0
    f = (a - x[0]) ** 2 + b * (x[1] - x[0] ** 2) ** 2
    g = np.array(
        [
            -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] ** 2),
            2.0 * b * (x[1] - x[0] ** 2),
        ]
    )
    return f, g


class TestLbfgs:
    def test_quadratic_reaches_center(self):
        center = np.array([3.0, -2.0, 0.5, 7.0])
        res = lbfgs_minimize(quadratic(center), np.zeros(4))
        assert res.converged
        assert np.allclose(res.x, center, atol=1e-8)

    def test_rosenbrock_standard_start(self):
        # Long-run backtracking gradient-descent oracle: confirms the
        # minimizer location independently of the L-BFGS path.
        x = np.array([-1.2, 1.0])
        for _ in range(20000):
            f, g = rosenbrock(x)
            t = 1.0
            while True:
                f_new, _ = rosenbrock(x - t * g)
                if f_new <= f - 1e-4 * t * (g @ g) or t < 1e-16:
                    break
                t *= 0.5
            x = x - t * g
        assert np.allclose(x, [1.0, 1.0], atol=1e-6)

        res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-5)

    def test_already_at_minimum(self):
        center = np.array([1.0, 2.0])
        res = lbfgs_minimize(quadratic(center), center.copy())
        assert res.iterations <= 1
        assert np.allclose(res.x, center, atol=1e-9)

    def test_accepted_values_monotone(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(12, 6))

        def objective(x):
            r = a @ x - 1.0
            return float(r @ r), 2.0 * a.T @ r

        res = lbfgs_minimize(objective, rng.normal(size=6))
        assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))

    def test_nonfinite_start_rejected(self):
        def objective(x):
            return np.inf, np.zeros_like(x)

        with pytest.raises(ValueError):
            lbfgs_minimize(objective, np.zeros(2))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**31))
    def test_random_psd_quadratics(self, dim, seed):
        rng = np.random.default_rng(seed)
        root = rng.normal(size=(dim, dim))
        h = root @ root.T + np.eye(dim)
        target = rng.normal(size=dim)

        def objective(x):
            r = x - target
            return float(r @ h @ r), 2.0 * h @ r

        res = lbfgs_minimize(objective, rng.normal(size=dim), OptimizerConfig(
            gradient_tolerance=1e-10))
        assert np.allclose(res.x, target, atol=1e-6)


class TestPca:
    def test_identical_samples(self):
        sample = np.array([1.0, -2.0, 3.0])
        out = pca(np.tile(sample, (5, 1)))
        assert np.allclose(out.mean, sample)
        assert np.allclose(out.singular_values, 0.0)

    def test_rank_two_subspace(self):
        rng = np.random.default_rng(1)
        basis = np.linalg.qr(rng.normal(size=(10, 2)))[0]
        coeffs = rng.normal(size=(20, 2))
        samples = coeffs @ basis.T + rng.normal(size=10)
        out = pca(samples)
        essential = out.singular_values > 1e-9 * out.singular_values.max()
        assert essential.sum() == 2

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(2)
        samples = rng.normal(size=(6, 9))
        out = pca(samples)
        centered = samples - out.mean
        recon = (centered @ out.components) @ out.components.T
        assert np.allclose(recon, centered, atol=1e-9)

    def test_variance_partition(self):
        rng = np.random.default_rng(3)
        samples = rng.normal(size=(8, 5))
        out = pca(samples)
        total = np.sum((samples - out.mean) ** 2)
        assert np.isclose(np.sum(out.singular_values**2), total, rtol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=2, max_value=8), st.integers(min_value=0, max_value=2**31))
    def test_components_orthonormal(self, m, seed):
        rng = np.random.default_rng(seed)
        out = pca(rng.normal(size=(m, 7)))
        gram = out.components.T @ out.components
        assert np.allclose(gram, np.eye(out.components.shape[1]), atol=1e-10)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pca(np.zeros((0, 3)))


class TestRidgeLeastSquares:
    def test_square_invertible_matches_inverse(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 5)) + 5.0 * np.eye(5)
        b = rng.normal(size=(5, 2))
        x = ridge_least_squares(a, b, 0.0)
        assert np.allclose(x, np.linalg.inv(a) @ b, atol=1e-9)

    def test_planted_solution(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(20, 6))
        x_true = rng.normal(size=(6, 3))
        x = ridge_least_squares(a, a @ x_true, 0.0)
        assert np.allclose(x, x_true, atol=1e-8)

    def test_large_ridge_shrinks_to_zero(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(10, 4))
        b = rng.normal(size=(10, 2))
        x = ridge_least_squares(a, b, 1e12)
        assert np.max(np.abs(x)) < 1e-8

    def test_residual_not_worse_than_zero(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(15, 5))
        b = rng.normal(size=(15, 3))
        for lam in (0.0, 1e-3, 1.0, 100.0):
            x = ridge_least_squares(a, b, lam)
            assert np.linalg.norm(a @ x - b) <= np.linalg.norm(b) + 1e-12

    def test_singular_without_ridge_raises(self):
        a = np.zeros((4, 3))
        a[:, 0] = 1.0
        with pytest.raises(SingularSystemError):
            ridge_least_squares(a, np.ones((4, 1)), 0.0)
        # A tiny ridge makes the same system solvable.
        ridge_least_squares(a, np.ones((4, 1)), 1e-9)


class TestCheckGradient:
    def test_exact_quadratic(self):
        err = check_gradient(quadratic(np.array([1.0, -1.0, 2.0])), np.ones(3))
        assert err < 1e-8

    def test_detects_scaled_gradient(self):
        def wrong(x):
            r = x - 1.0
            return float(r @ r), 4.0 * r  # gradient doubled

        err = check_gradient(wrong, np.array([3.0, -2.0]))
        assert abs(err - 1.0) < 1e-5
