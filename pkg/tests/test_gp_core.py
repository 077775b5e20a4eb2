"""Kernel algebra, Gaussian conditionals, KL divergences, log-densities."""

import math

import numpy as np
import pytest

from hegp import (
    GaussianDist,
    Kernel,
    MeanFunction,
    MultiOutputCov,
    ParameterError,
    gaussian_condition,
    gaussian_kl,
    gaussian_logpdf,
    gram,
)


def random_psd(rng, k, jitter=0.1):
    a = rng.standard_normal((k, k))
    return a @ a.T + jitter * np.eye(k)


class TestKernels:
    def test_symmetry_and_positive_diagonal(self):
        rng = np.random.default_rng(0)
        for family in ("squared_exponential", "matern32"):
            kern = Kernel(family=family, log_signal=0.3, log_decay=-0.2)
            x = rng.standard_normal((7, 2))
            k = kern(x, x)
            np.testing.assert_allclose(k, k.T, atol=1e-15)
            assert np.all(np.diag(k) > 0)

    def test_matern32_hand_value(self):
        # sigma = 1, gamma = 1, r = 1: (1 + sqrt(3)) exp(-sqrt(3))
        kern = Kernel(family="matern32", log_signal=0.0, log_decay=0.0)
        got = kern(np.array([[0.0]]), np.array([[1.0]]))[0, 0]
        expected = (1.0 + math.sqrt(3.0)) * math.exp(-math.sqrt(3.0))
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.48335, abs=1e-5)

    def test_gram_psd_floor(self):
        rng = np.random.default_rng(1)
        for family in ("squared_exponential", "matern32"):
            kern = Kernel(family=family)
            x = rng.uniform(-2, 2, size=(12, 1))
            k = kern(x, x)
            w = np.linalg.eigvalsh(k)
            assert w.min() >= -1e-8 * np.trace(k)

    def test_kernel_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 2))
        h = 1e-6
        for family in ("squared_exponential", "matern32"):
            kern = Kernel(family=family, log_signal=0.2, log_decay=0.1)
            _, grads = kern.with_grads(x, x)
            for name in ("log_signal", "log_decay"):
                up = Kernel(family=family, **{**_params(kern), name: getattr(kern, name) + h})
                dn = Kernel(family=family, **{**_params(kern), name: getattr(kern, name) - h})
                fd = (up(x, x) - dn(x, x)) / (2 * h)
                np.testing.assert_allclose(grads[name], fd, rtol=1e-5, atol=1e-8)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ParameterError):
            Kernel(family="cubic")
        with pytest.raises(ParameterError):
            Kernel(log_signal=float("nan"))


def _params(kern):
    return {"log_signal": kern.log_signal, "log_decay": kern.log_decay}


class TestGram:
    def test_identity_output_cov_single_point(self):
        cov = MultiOutputCov(np.eye(2), Kernel())
        got = gram(cov, np.array([[0.0]]), np.array([[0.0]]))
        np.testing.assert_allclose(got, np.eye(2), atol=1e-15)

    def test_single_point_is_scaled_output_cov(self):
        sigma = np.array([[4.29, 6.09], [6.09, 8.63]])
        cov = MultiOutputCov(sigma, Kernel())
        x = np.array([[0.7]])
        got = gram(cov, x, x)
        np.testing.assert_allclose(got, sigma, atol=1e-12)

    def test_cross_gram_transpose_symmetry(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            q = rng.integers(1, 4)
            na, nb = rng.integers(1, 6, size=2)
            sigma = random_psd(rng, q)
            cov = MultiOutputCov(sigma, Kernel(family="matern32"))
            a = rng.standard_normal((na, 2))
            b = rng.standard_normal((nb, 2))
            np.testing.assert_allclose(
                gram(cov, a, b), gram(cov, b, a).T, atol=1e-12
            )

    def test_vec_quadratic_form_nonnegative(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            q = rng.integers(1, 4)
            n = rng.integers(2, 6)
            sigma = random_psd(rng, q)
            cov = MultiOutputCov(sigma, Kernel())
            x = rng.standard_normal((n, 1))
            v = gram(cov, x, x)
            w = rng.standard_normal((n, q))
            vec = w.ravel(order="F")
            assert vec @ v @ vec >= -1e-8 * (vec @ vec)

    def test_rejects_nonfinite_hyperparameters(self):
        with pytest.raises(ParameterError):
            Kernel(log_decay=float("inf"))


class TestMeanFunction:
    def test_forms(self):
        x = np.array([[1.0], [2.0]])
        zero = MeanFunction(form="zero", offset=np.zeros(2))
        np.testing.assert_array_equal(zero(x), np.zeros((2, 2)))
        const = MeanFunction(form="constant", offset=np.array([1.0, -1.0]))
        np.testing.assert_array_equal(const(x), [[1, -1], [1, -1]])
        lin = MeanFunction(
            form="linear", offset=np.array([0.5]), slope=np.array([[2.0]])
        )
        np.testing.assert_allclose(lin(x), [[2.5], [4.5]])

    def test_design_columns_match_parameter_perturbation(self):
        x = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
        mean = MeanFunction(
            form="linear", offset=np.array([0.1, 0.2]), slope=np.ones((2, 2))
        )
        cols = mean.design_columns(x, 2)
        theta = mean.get_params()
        h = 1e-6
        for j in range(len(theta)):
            up = theta.copy()
            up[j] += h
            dn = theta.copy()
            dn[j] -= h
            fd = (
                mean.set_params(up, 2, 2)(x) - mean.set_params(dn, 2, 2)(x)
            ) / (2 * h)
            np.testing.assert_allclose(cols[:, j], fd.ravel(order="F"), atol=1e-8)


class TestGaussianCondition:
    def test_condition_on_nothing_returns_input(self):
        d = GaussianDist(np.array([1.0, 2.0]), np.eye(2))
        out = gaussian_condition(d, [], [])
        np.testing.assert_array_equal(out.mean, d.mean)
        np.testing.assert_array_equal(out.cov, d.cov)

    def test_uncorrelated_marginal(self):
        d = GaussianDist(np.zeros(2), np.eye(2))
        out = gaussian_condition(d, [0], [0.0])
        assert out.mean == pytest.approx(0.0)
        assert out.cov[0, 0] == pytest.approx(1.0)

    def test_against_grid_normalization(self):
        # Condition a random 4-D Gaussian on three coordinates; the
        # remaining 1-D density must match the joint density normalized
        # numerically over a grid.
        rng = np.random.default_rng(5)
        cov = random_psd(rng, 4, jitter=0.5)
        mean = rng.standard_normal(4)
        d = GaussianDist(mean, cov)
        obs_idx = [0, 2, 3]
        obs_val = rng.standard_normal(3)
        cond = gaussian_condition(d, obs_idx, obs_val)
        lo = cond.mean[0] - 8 * math.sqrt(cond.cov[0, 0])
        hi = cond.mean[0] + 8 * math.sqrt(cond.cov[0, 0])
        grid = np.linspace(lo, hi, 4001)
        joint = np.empty_like(grid)
        for i, t in enumerate(grid):
            point = np.empty(4)
            point[obs_idx] = obs_val
            point[1] = t
            joint[i] = math.exp(gaussian_logpdf(point, mean, cov))
        z = np.trapezoid(joint, grid)
        for t in (cond.mean[0], cond.mean[0] + 0.7, cond.mean[0] - 1.3):
            point = np.empty(4)
            point[obs_idx] = obs_val
            point[1] = t
            brute = math.exp(gaussian_logpdf(point, mean, cov)) / z
            assert cond.logpdf([t]) == pytest.approx(math.log(brute), abs=1e-6)


class TestGaussianKL:
    def test_zero_at_equality(self):
        d = GaussianDist(np.array([0.3]), np.array([[1.7]]))
        assert gaussian_kl(d, d) == 0.0

    def test_scalar_mean_shift(self):
        p = GaussianDist(np.array([1.0]), np.array([[1.0]]))
        q = GaussianDist(np.array([0.0]), np.array([[1.0]]))
        assert gaussian_kl(p, q) == pytest.approx(0.5, rel=1e-12)

    def test_nonnegative_random_pairs(self):
        rng = np.random.default_rng(6)
        for trial in range(50):
            k = rng.integers(1, 5)
            p = GaussianDist(rng.standard_normal(k), random_psd(rng, k))
            q = GaussianDist(rng.standard_normal(k), random_psd(rng, k))
            assert gaussian_kl(p, q) >= 0.0

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(7)
        p = GaussianDist(rng.standard_normal(3), random_psd(rng, 3, 0.5))
        q = GaussianDist(rng.standard_normal(3), random_psd(rng, 3, 0.5))
        n = 100_000
        xs = p.sample(rng, size=n)
        diffs = np.array([p.logpdf(x) - q.logpdf(x) for x in xs[:n]])
        mc = diffs.mean()
        se = diffs.std(ddof=1) / math.sqrt(n)
        exact = gaussian_kl(p, q)
        assert abs(exact - mc) < 3 * se

    def test_dimension_mismatch(self):
        p = GaussianDist(np.zeros(2), np.eye(2))
        q = GaussianDist(np.zeros(3), np.eye(3))
        with pytest.raises(ParameterError):
            gaussian_kl(p, q)


class TestLogpdf:
    def test_standard_normal_at_zero(self):
        assert gaussian_logpdf([0.0], [0.0], [[1.0]]) == pytest.approx(
            -0.5 * math.log(2 * math.pi), rel=1e-14
        )

    def test_bivariate_identity(self):
        got = gaussian_logpdf([1.0, 1.0], [0.0, 0.0], np.eye(2))
        assert got == pytest.approx(-math.log(2 * math.pi) - 1.0, rel=1e-14)

    def test_matches_explicit_inverse(self):
        rng = np.random.default_rng(8)
        cov = random_psd(rng, 3, 0.4)
        mean = rng.standard_normal(3)
        x = rng.standard_normal(3)
        inv = np.linalg.inv(cov)
        dev = x - mean
        expected = -0.5 * (
            3 * math.log(2 * math.pi)
            + math.log(np.linalg.det(cov))
            + dev @ inv @ dev
        )
        assert gaussian_logpdf(x, mean, cov) == pytest.approx(expected, rel=1e-10)
