"""Posterior predictives, outlier machinery, goodness-of-fit scoring."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from hegp import (
    Dataset,
    FitConfig,
    FittedModel,
    chi_square_cdf,
    cvm_score_from_uniforms,
    fit,
    gram,
    outlier_weights,
    precision_rescale,
)
from hegp._linalg import blocks_to_blockdiag, vec_columns
from hegp.vem import initialize, replace_config


def toy_dataset(rng, n=15, q=1):
    x = np.sort(rng.uniform(-3, 3, n)).reshape(-1, 1)
    f = np.column_stack([np.sin(x.ravel() + j) for j in range(q)])
    sd = 0.2 + 0.3 * (x.ravel() > 0)
    y = f + sd[:, None] * rng.standard_normal((n, q))
    return Dataset(x, y)


def quick_fit(ds, **kw):
    base = dict(
        model_family="gaussian", d=3, r_grid=[50.0], outer_iters=5,
        estep_iters=40, seed=0,
    )
    base.update(kw)
    cfg = FitConfig(**base)
    return FittedModel(ds, fit(ds, cfg)), cfg


class TestSmoothPredictive:
    def test_far_query_reverts_to_prior(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng)
        fitted, _ = quick_fit(ds)
        far = np.array([[500.0]])
        means, covs = fitted.predict_smooth(far)
        mu = fitted.gp.mean_matrix(far)[0]
        prior_cov = fitted.gp.cov.at(far[0])
        np.testing.assert_allclose(means[0], mu, atol=1e-8)
        np.testing.assert_allclose(covs[0], prior_cov, atol=1e-8)

    def test_interpolation_limit_with_tiny_noise(self):
        rng = np.random.default_rng(1)
        n = 8
        x = np.sort(rng.uniform(-2, 2, n)).reshape(-1, 1)
        y = np.sin(x)
        ds = Dataset(x, y)
        cfg = FitConfig(model_family="gaussian", d=1, r_grid=[50.0], outer_iters=0)
        state = initialize(ds, cfg)
        state.mixture = state.mixture.with_bases(
            np.full((1, 1, 1), 1e-10)
        )
        from hegp.vem import VariationalState

        state.var_state = VariationalState(y.copy(), np.zeros((n, 1, 1)))
        fitted = FittedModel(ds, state)
        means, _ = fitted.predict_smooth(x)
        np.testing.assert_allclose(means, y, atol=1e-4)

    def test_matches_direct_dense_assembly(self):
        rng = np.random.default_rng(2)
        n, q = 6, 2
        ds = toy_dataset(rng, n=n, q=q)
        fitted, _ = quick_fit(ds, d=2)
        state = fitted.state
        xq = np.array([[0.3], [-1.2]])
        means, covs = fitted.predict_smooth(xq)
        v = gram(state.gp.cov, ds.x, ds.x)
        lam = state.mixture.noise_cov_all(ds.x)
        c = v + blocks_to_blockdiag(lam)
        mu_x = vec_columns(state.gp.mean_matrix(ds.x))
        delta = vec_columns(state.var_state.means) - mu_x
        psi_bd = blocks_to_blockdiag(state.var_state.covs)
        cinv = np.linalg.inv(c)
        for i in range(2):
            kx = gram(state.gp.cov, xq[i : i + 1], ds.x)
            mu_q = state.gp.mean_matrix(xq[i : i + 1])[0]
            ref_mean = mu_q + (kx @ cinv @ delta).reshape(q, 1)[:, 0]
            ref_cov = (
                state.gp.cov.at(xq[i])
                - kx @ cinv @ kx.T
                + kx @ cinv @ psi_bd @ cinv @ kx.T
            )
            np.testing.assert_allclose(means[i], ref_mean, atol=1e-8)
            np.testing.assert_allclose(covs[i], ref_cov, atol=1e-8)

    def test_target_minus_smooth_is_local_noise(self):
        rng = np.random.default_rng(3)
        ds = toy_dataset(rng)
        fitted, _ = quick_fit(ds)
        xq = np.linspace(-2, 2, 9).reshape(-1, 1)
        _, cov_g = fitted.predict_smooth(xq)
        _, cov_f = fitted.predict_target(xq)
        lam = fitted.noise_cov_at(xq)
        np.testing.assert_allclose(cov_f - cov_g, lam, atol=1e-12)


class TestClassificationPredictive:
    def make_fitted(self):
        rng = np.random.default_rng(4)
        n = 40
        x = rng.uniform(-2, 2, size=(n, 2))
        p = np.where(x[:, 0] > 0, 0.85, 0.2)
        y = (rng.uniform(size=n) < p).astype(float).reshape(-1, 1)
        ds = Dataset(x, y)
        fitted, _ = quick_fit(
            ds, model_family="probit", delta=0.1, d=6, outer_iters=3,
            mean="zero",
        )
        return fitted

    def test_symmetry_at_zero_mean(self):
        fitted = self.make_fitted()
        from hegp import ProbitClassifier

        assert fitted.obs_model.predictive_prob(0.0, 2.3) == pytest.approx(0.5)

    def test_saturation_bound(self):
        fitted = self.make_fitted()
        assert fitted.obs_model.predictive_prob(1e9, 1.0) == pytest.approx(0.9)
        assert fitted.obs_model.predictive_prob(-1e9, 1.0) == pytest.approx(0.1)

    def test_probabilities_within_mislabel_bounds(self):
        fitted = self.make_fitted()
        rng = np.random.default_rng(5)
        xq = rng.uniform(-3, 3, size=(50, 2))
        p = fitted.predict_class_prob(xq)
        assert np.all(p >= 0.1 - 1e-12)
        assert np.all(p <= 0.9 + 1e-12)

    def test_matches_two_layer_quadrature(self):
        # The closed form equals integrating the hard indicator model
        # over the Gaussian latent.
        fitted = self.make_fitted()
        xq = np.array([[0.4, -0.3]])
        means, covs = fitted.predict_target(xq)
        mu, var = means[0, 0], covs[0, 0, 0]
        delta = 0.1
        sd = math.sqrt(var)
        num, _ = quad(
            lambda f: ((1 - delta) * (f > 0) + delta * (f <= 0))
            * math.exp(-0.5 * (f - mu) ** 2 / var)
            / (sd * math.sqrt(2 * math.pi)),
            mu - 10 * sd,
            mu + 10 * sd,
            points=[0.0],
            limit=300,
        )
        got = fitted.predict_class_prob(xq)[0]
        assert got == pytest.approx(num, abs=1e-8)

    def test_non_classifier_rejects(self):
        rng = np.random.default_rng(6)
        ds = toy_dataset(rng)
        fitted, _ = quick_fit(ds)
        from hegp import ParameterError

        with pytest.raises(ParameterError):
            fitted.predict_class_prob(np.array([[0.0]]))


class TestChiSquareCdf:
    def _series_or_cf(self, a, x, tol=1e-14, itmax=500):
        # Independent evaluation of the regularized lower incomplete
        # gamma: power series for x < a + 1, continued fraction above.
        if x <= 0:
            return 0.0
        lg = math.lgamma(a)
        if x < a + 1.0:
            term = 1.0 / a
            total = term
            k = 1
            while k < itmax:
                term *= x / (a + k)
                total += term
                if abs(term) < abs(total) * tol:
                    break
                k += 1
            return total * math.exp(-x + a * math.log(x) - lg)
        # Lentz continued fraction for the upper function
        tiny = 1e-300
        b = x + 1.0 - a
        c = 1.0 / tiny
        d = 1.0 / b
        h = d
        for i in range(1, itmax):
            an = -i * (i - a)
            b += 2.0
            d = an * d + b
            if abs(d) < tiny:
                d = tiny
            c = b + an / c
            if abs(c) < tiny:
                c = tiny
            d = 1.0 / d
            delta = d * c
            h *= delta
            if abs(delta - 1.0) < tol:
                break
        upper = math.exp(-x + a * math.log(x) - lg) * h
        return 1.0 - upper

    def test_against_series_and_continued_fraction(self):
        rng = np.random.default_rng(7)
        for dof in (1, 2, 3, 6):
            xs = np.concatenate(
                [rng.uniform(0.01, dof + 1, 20), rng.uniform(dof + 1, 40, 20)]
            )
            got = chi_square_cdf(xs, dof)
            ref = [self._series_or_cf(dof / 2.0, x / 2.0) for x in xs]
            np.testing.assert_allclose(got, ref, atol=1e-10)


class TestCvmScore:
    def test_perfectly_calibrated_minimum(self):
        n = 10
        u = (2 * np.arange(1, n + 1) - 1) / (2 * n)
        assert cvm_score_from_uniforms(u) == pytest.approx(1.0 / (12 * n))

    def test_degenerate_all_zero(self):
        n = 5
        u = np.zeros(n)
        expected = 1.0 / (12 * n) + sum(
            ((2 * i - 1) / (2 * n)) ** 2 for i in range(1, n + 1)
        )
        assert cvm_score_from_uniforms(u) == pytest.approx(expected)

    def test_hand_arithmetic_three_points(self):
        u = np.array([0.1, 0.5, 0.9])
        expected = (
            1.0 / 36.0
            + (0.1 - 1.0 / 6.0) ** 2
            + (0.5 - 0.5) ** 2
            + (0.9 - 5.0 / 6.0) ** 2
        )
        assert cvm_score_from_uniforms(u) == pytest.approx(expected, rel=1e-12)

    def test_score_at_least_minimum(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            n = rng.integers(3, 40)
            u = rng.uniform(size=n)
            assert cvm_score_from_uniforms(u) >= 1.0 / (12 * n) - 1e-15


class TestPrecisionRescale:
    def test_zero_scale_gives_unity(self):
        assert precision_rescale(np.array([0.7, 1.3]), 0.0) == 1.0

    def test_unit_factors_and_unit_scale(self):
        assert precision_rescale(np.ones(5), 1.0) == pytest.approx(2.0)

    def test_grows_without_bound(self):
        xs = np.ones(4)
        values = [precision_rescale(xs, s) for s in (0.5, 2.0, 10.0, 100.0)]
        assert np.all(np.diff(values) > 0)
        assert values[-1] > 1e3

    def test_always_at_least_one(self):
        rng = np.random.default_rng(9)
        for trial in range(50):
            xi = rng.uniform(0.1, 3.0, size=10)
            s0 = rng.uniform(0.0, 0.5)
            assert precision_rescale(xi, s0) >= 1.0 - 1e-12


class TestOutlierWeights:
    def test_range_and_monotonicity_in_scale(self):
        rng = np.random.default_rng(10)
        xi = rng.uniform(0.2, 2.0, size=20)
        prev = None
        for s0 in (0.0, 0.1, 0.2, 0.4):
            w = outlier_weights(xi, s0)
            assert np.all(w >= 0.0) and np.all(w <= 1.0)
            if prev is not None:
                assert np.all(w >= prev - 1e-15)
            prev = w

    def test_shrinkage_pair_sums_to_one(self):
        from hegp.predictors import datum_shrinkage_pair

        xi = np.array([0.5, 1.0, 2.0])
        wy, wg = datum_shrinkage_pair(xi, 0.3)
        np.testing.assert_allclose(wy + wg, 1.0, atol=1e-15)


class TestCvmOnFits:
    def test_cvm_score_computes_on_outlier_fit(self):
        rng = np.random.default_rng(11)
        ds = toy_dataset(rng, n=25)
        fitted, _ = quick_fit(
            ds, model_family="outlier", sigma0=0.15, outer_iters=4
        )
        score, u = fitted.cvm_score()
        assert score >= 1.0 / (12 * ds.n) - 1e-12
        assert np.all((u >= 0) & (u <= 1))

    def test_rescaled_band_wider_than_plain(self):
        rng = np.random.default_rng(12)
        ds = toy_dataset(rng, n=25)
        fitted, _ = quick_fit(
            ds, model_family="outlier", sigma0=0.3, outer_iters=4
        )
        xq = np.linspace(-2, 2, 5).reshape(-1, 1)
        _, plain = fitted.predict_target(xq, rescale=False)
        _, rescaled = fitted.predict_target(xq, rescale=True)
        assert np.all(np.diag(rescaled[0]) >= np.diag(plain[0]) - 1e-12)
