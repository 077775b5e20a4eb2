"""Precision-mixture noise process: weights, mixing, prior, bandwidths."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize

from hegp import (
    ParameterError,
    PrecisionMixture,
    PrecisionPrior,
    bandwidths_from_percent,
    default_anchors,
)


def make_mixture(rng, d=3, q=2, p=1, diagonal=False, spread=2.0):
    anchors = spread * rng.standard_normal((d, p))
    if diagonal:
        bases = rng.uniform(0.5, 2.0, size=(d, q))
    else:
        bases = np.empty((d, q, q))
        for i in range(d):
            a = rng.standard_normal((q, q))
            bases[i] = a @ a.T + 0.5 * np.eye(q)
    bw = rng.uniform(0.5, 1.5, size=d)
    return PrecisionMixture(anchors, bases, bw, diagonal=diagonal)


class TestWeights:
    def test_single_component(self):
        pm = PrecisionMixture(
            np.array([[0.0]]), np.ones((1, 1, 1)), np.array([1.0])
        )
        np.testing.assert_array_equal(pm.weights([3.0]), [1.0])

    def test_equidistant_split(self):
        pm = PrecisionMixture(
            np.array([[-1.0], [1.0]]),
            np.ones((2, 1, 1)),
            np.array([0.7, 0.7]),
        )
        np.testing.assert_allclose(pm.weights([0.0]), [0.5, 0.5], atol=1e-15)

    def test_hand_evaluation(self):
        anchors = np.array([[0.0], [1.0], [3.0]])
        bw = np.array([0.5, 1.0, 2.0])
        pm = PrecisionMixture(anchors, np.ones((3, 1, 1)), bw)
        x = 0.8
        raw = np.exp(-0.5 * (x - anchors[:, 0]) ** 2 / bw**2)
        np.testing.assert_allclose(pm.weights([x]), raw / raw.sum(), rtol=1e-12)

    def test_simplex_property(self):
        rng = np.random.default_rng(0)
        pm = make_mixture(rng, d=5, q=1, p=2)
        x = rng.uniform(-30, 30, size=(1000, 2))
        w = pm.weights_matrix(x)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_underflow_collapses_to_nearest(self):
        pm = PrecisionMixture(
            np.array([[0.0], [1.0]]),
            np.ones((2, 1, 1)),
            np.array([0.01, 0.01]),
        )
        w = pm.weights([1e6])
        np.testing.assert_array_equal(w, [0.0, 1.0])
        assert pm.noise_cov([1e6])[0, 0] == pytest.approx(1.0)


class TestNoiseCov:
    def test_identical_bases_are_fixed_point(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 2))
        lam0 = a @ a.T + np.eye(2)
        pm = PrecisionMixture(
            rng.standard_normal((4, 1)),
            np.tile(lam0, (4, 1, 1)),
            np.ones(4),
        )
        for x in rng.uniform(-3, 3, size=5):
            np.testing.assert_allclose(pm.noise_cov([x]), lam0, rtol=1e-10)

    def test_scalar_harmonic_mixture(self):
        pm = PrecisionMixture(
            np.array([[-1.0], [1.0]]),
            np.array([[[1.0]], [[4.0]]]),
            np.array([1.0, 1.0]),
        )
        got = pm.noise_cov([0.0])  # weights are (1/2, 1/2)
        assert got[0, 0] == pytest.approx(1.6, rel=1e-12)

    def test_diagonal_bases_mix_coordinatewise(self):
        rng = np.random.default_rng(2)
        d, q = 3, 2
        diags = rng.uniform(0.5, 3.0, size=(d, q))
        bases = np.stack([np.diag(v) for v in diags])
        anchors = rng.standard_normal((d, 1))
        bw = np.ones(d)
        pm = PrecisionMixture(anchors, bases, bw)
        x = [0.3]
        w = pm.weights(x)
        expected = 1.0 / (w @ (1.0 / diags))
        np.testing.assert_allclose(np.diag(pm.noise_cov(x)), expected, rtol=1e-10)

    def test_symmetry_and_positive_definiteness(self):
        rng = np.random.default_rng(3)
        pm = make_mixture(rng, d=4, q=3)
        for x in rng.uniform(-3, 3, size=(20, 1)):
            lam = pm.noise_cov(x)
            np.testing.assert_allclose(lam, lam.T, atol=1e-12)
            np.linalg.cholesky(lam)

    def test_diagonal_mode_matches_full_for_single_output(self):
        rng = np.random.default_rng(4)
        anchors = rng.standard_normal((3, 1))
        vals = rng.uniform(0.5, 2.0, size=3)
        bw = rng.uniform(0.5, 1.5, size=3)
        full = PrecisionMixture(anchors, vals.reshape(3, 1, 1), bw)
        diag = PrecisionMixture(anchors, vals.reshape(3, 1), bw, diagonal=True)
        for x in rng.uniform(-2, 2, size=(10, 1)):
            np.testing.assert_allclose(
                full.noise_cov(x), diag.noise_cov(x), rtol=1e-14
            )


class TestBasePrior:
    def test_identical_bases_give_zero(self):
        rng = np.random.default_rng(5)
        lam0 = np.eye(2) * 1.7
        pm = PrecisionMixture(
            rng.standard_normal((3, 1)), np.tile(lam0, (3, 1, 1)), np.ones(3)
        )
        x = rng.uniform(-2, 2, size=(10, 1))
        assert pm.log_prior(x) == pytest.approx(0.0, abs=1e-12)

    def test_distinct_bases_give_negative(self):
        rng = np.random.default_rng(6)
        pm = make_mixture(rng, d=3, q=2)
        x = rng.uniform(-2, 2, size=(15, 1))
        assert pm.log_prior(x) < 0.0

    def test_jensen_gap_nonpositive_many_draws(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            pm = make_mixture(rng, d=3, q=2)
            x = rng.uniform(-3, 3, size=(8, 1))
            w = pm.weights_matrix(x)
            assert pm.jensen_gap(w) <= 1e-10

    def test_prior_maximum_satisfies_weighted_average_identity(self):
        # The maximizer of the conditional prior makes every base matrix
        # the weighted average of the mixed covariances.
        rng = np.random.default_rng(8)
        d, q, n = 2, 2, 6
        anchors = rng.standard_normal((d, 1))
        bw = np.ones(d)
        x = rng.uniform(-2, 2, size=(n, 1))
        tmpl = PrecisionMixture(anchors, np.tile(np.eye(q), (d, 1, 1)), bw)
        w = tmpl.weights_matrix(x)
        tril = np.tril_indices(q)

        def unpack(theta):
            bases = np.empty((d, q, q))
            k = len(tril[0])
            for di in range(d):
                t = np.zeros((q, q))
                vals = theta[di * k : (di + 1) * k].copy()
                t[tril] = vals
                t[np.arange(q), np.arange(q)] = np.exp(np.diag(t))
                bases[di] = t @ t.T
            return bases

        def neg(theta):
            pm = tmpl.with_bases(unpack(theta))
            return -pm.log_prior(weights=w)

        theta0 = np.concatenate(
            [np.array([0.1, 0.05, -0.1]) + 0.2 * rng.standard_normal(3) for _ in range(d)]
        )
        res = minimize(neg, theta0, method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-12})
        bases = unpack(res.x)
        pm = tmpl.with_bases(bases)
        lam_all = pm.noise_cov_all(x, weights=w)
        for di in range(d):
            avg = np.einsum("n,npq->pq", w[:, di], lam_all) / w[:, di].sum()
            resid = np.linalg.norm(bases[di] - avg) / np.linalg.norm(avg)
            assert resid < 1e-4

    def test_inverse_wishart_prior_validates(self):
        with pytest.raises(ParameterError):
            PrecisionPrior(kind="inverse_wishart", scale=np.eye(2), dof=0.5)
        PrecisionPrior(kind="inverse_wishart", scale=np.eye(2), dof=4.0)


class TestBandwidths:
    def test_hand_sorted_example(self):
        x = np.arange(5.0).reshape(-1, 1)
        h = bandwidths_from_percent(np.array([[0.0]]), x, 40.0)
        # k = 2 neighbors: midpoint of the 2nd and 3rd distances (1 and 2)
        assert h[0] == pytest.approx(1.5)

    def test_full_coverage(self):
        x = np.arange(5.0).reshape(-1, 1)
        h = bandwidths_from_percent(np.array([[0.0]]), x, 100.0)
        # k = N: upper radius doubles the largest distance
        assert h[0] == pytest.approx(0.5 * (4.0 + 8.0))

    def test_single_point_degenerate(self):
        h = bandwidths_from_percent(np.array([[0.0]]), np.array([[2.0]]), 50.0)
        assert h[0] == pytest.approx(1.5 * 2.0)

    def test_monotone_in_percentage(self):
        rng = np.random.default_rng(9)
        anchors = rng.standard_normal((4, 2))
        x = rng.standard_normal((30, 2))
        prev = None
        for r in (5.0, 20.0, 50.0, 80.0, 100.0):
            h = bandwidths_from_percent(anchors, x, r)
            if prev is not None:
                assert np.all(h >= prev - 1e-12)
            prev = h

    def test_percentage_domain(self):
        with pytest.raises(ParameterError):
            bandwidths_from_percent(np.zeros((1, 1)), np.zeros((3, 1)), 0.0)
        with pytest.raises(ParameterError):
            bandwidths_from_percent(np.zeros((1, 1)), np.zeros((3, 1)), 101.0)


class TestDefaultAnchors:
    def test_one_dimensional_evenly_spaced(self):
        x = np.array([[0.0], [10.0], [4.0]])
        a = default_anchors(x, 5)
        np.testing.assert_allclose(a.ravel(), np.linspace(0, 10, 5))

    def test_multidimensional_subsample(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((50, 3))
        a = default_anchors(x, 10, rng)
        assert a.shape == (10, 3)
        # every anchor is one of the data points
        for row in a:
            assert np.any(np.all(np.isclose(x, row), axis=1))
