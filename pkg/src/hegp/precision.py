"""Covariate-indexed noise covariance built from a mixture of precisions.

A small set of anchor covariates carries base covariance matrices and
per-anchor bandwidths.  At any covariate x the noise covariance is the
inverse of the kernel-weighted mixture of base precisions,

    noise_cov(x) = ( sum_d w_d(x) * base_d^{-1} )^{-1},

with Gaussian-kernel weights w_d(x) normalized over anchors.  Bandwidths
come from an r%-nearest-neighbor rule over the training covariates.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from ._linalg import inv_psd, jittered_cholesky, symmetrize
from .exceptions import ParameterError

logger = logging.getLogger("hegp")

# Raw kernel values below this are treated as total underflow and the
# weight simplex collapses onto the nearest anchor.
UNDERFLOW_LOG = math.log(1e-300)


@dataclass(frozen=True)
class PrecisionPrior:
    """Base density over the anchor matrices: flat or inverse-Wishart."""

    kind: str = "flat"
    scale: np.ndarray | None = None  # inverse-Wishart scale matrix, Q x Q PD
    dof: float | None = None  # degrees of freedom, > Q - 1

    def __post_init__(self):
        if self.kind not in ("flat", "inverse_wishart"):
            raise ParameterError(f"unknown prior kind: {self.kind!r}")
        if self.kind == "inverse_wishart":
            if self.scale is None or self.dof is None:
                raise ParameterError("inverse-Wishart prior needs scale and dof")
            s = np.asarray(self.scale, dtype=float)
            if self.dof <= s.shape[0] - 1:
                raise ParameterError("inverse-Wishart dof must exceed Q - 1")


@dataclass(frozen=True)
class PrecisionMixture:
    """Anchored precision mixture defining the heteroscedastic noise.

    Parameters
    ----------
    anchors : (D, P) array
        Anchor covariates carrying the base matrices.
    bases : array
        Full mode: (D, Q, Q) symmetric positive definite matrices.
        Diagonal mode: (D, Q) positive variances, one per output.
    bandwidths : (D,) array of positive reals.
    diagonal : bool
        Component-wise variances instead of full matrices.
    """

    anchors: np.ndarray
    bases: np.ndarray
    bandwidths: np.ndarray
    diagonal: bool = False

    def __post_init__(self):
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        bases = np.asarray(self.bases, dtype=float)
        bw = np.atleast_1d(np.asarray(self.bandwidths, dtype=float))
        if anchors.shape[0] < 1:
            raise ParameterError("at least one anchor is required")
        if bw.shape[0] != anchors.shape[0]:
            raise ParameterError("one bandwidth per anchor is required")
        if np.any(bw <= 0) or not np.all(np.isfinite(bw)):
            raise ParameterError("bandwidths must be positive and finite")
        if self.diagonal:
            if bases.ndim != 2 or bases.shape[0] != anchors.shape[0]:
                raise ParameterError("diagonal mode expects (D, Q) base variances")
            if np.any(bases <= 0):
                raise ParameterError("base variances must be positive")
        else:
            if bases.ndim != 3 or bases.shape[0] != anchors.shape[0]:
                raise ParameterError("full mode expects (D, Q, Q) base matrices")
            bases = np.stack([symmetrize(b) for b in bases])
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "bandwidths", bw)

    @property
    def n_components(self):
        return self.anchors.shape[0]

    @property
    def n_outputs(self):
        return self.bases.shape[1]

    def with_bases(self, bases):
        return replace(self, bases=np.asarray(bases, dtype=float))

    def with_bandwidths(self, bandwidths):
        return replace(self, bandwidths=np.asarray(bandwidths, dtype=float))

    # -- weights ---------------------------------------------------------

    def log_kernel(self, x):
        """Unnormalized log kernel values at ``x``, shape (N, D)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d2 = np.sum(
            (x[:, None, :] - self.anchors[None, :, :]) ** 2, axis=2
        )
        return -0.5 * d2 / (self.bandwidths[None, :] ** 2)

    def weights(self, x):
        """Normalized mixture weights at one covariate, shape (D,)."""
        return self.weights_matrix(np.atleast_2d(x))[0]

    def weights_matrix(self, x):
        """Normalized mixture weights for each row of ``x``, shape (N, D)."""
        logk = self.log_kernel(x)
        out = np.zeros_like(logk)
        top = logk.max(axis=1)
        collapsed = top < UNDERFLOW_LOG
        ok = ~collapsed
        if np.any(ok):
            w = np.exp(logk[ok] - top[ok, None])
            out[ok] = w / w.sum(axis=1, keepdims=True)
        if np.any(collapsed):
            nearest = np.argmax(logk[collapsed], axis=1)
            out[np.nonzero(collapsed)[0], nearest] = 1.0
        return out

    # -- noise covariance -------------------------------------------------

    def base_precisions(self):
        if self.diagonal:
            return 1.0 / self.bases
        return np.stack([inv_psd(b, name="base matrix") for b in self.bases])

    def noise_cov(self, x, weights=None):
        """Q x Q noise covariance at a single covariate."""
        if weights is None:
            weights = self.weights(x)
        if self.diagonal:
            return np.diag(1.0 / (weights @ (1.0 / self.bases)))
        prec = np.einsum("d,dpq->pq", weights, self.base_precisions())
        return inv_psd(prec, name="mixed precision")

    def noise_cov_all(self, x, weights=None, precisions=None):
        """Per-covariate noise covariances, shape (N, Q, Q)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if weights is None:
            weights = self.weights_matrix(x)
        if self.diagonal:
            ivar = weights @ (1.0 / self.bases)  # (N, Q)
            n, q = ivar.shape
            out = np.zeros((n, q, q))
            out[:, np.arange(q), np.arange(q)] = 1.0 / ivar
            return out
        if precisions is None:
            precisions = self.base_precisions()
        mixed = np.einsum("nd,dpq->npq", weights, precisions)
        return np.stack([inv_psd(m, name="mixed precision") for m in mixed])

    # -- conditional prior on the base matrices ---------------------------

    def log_prior(self, x=None, prior=None, weights=None):
        """Log conditional prior of the base matrices given covariates.

        Up to a constant: half the weighted sum of base log-precisions
        minus half the log-determinants of the mixed precisions, plus
        the log base density.  The first two terms are <= 0 by Jensen,
        with equality when all base matrices coincide.
        """
        if weights is None:
            weights = self.weights_matrix(x)
        value = self.jensen_gap(weights)
        if prior is not None and prior.kind == "inverse_wishart":
            value += _inverse_wishart_logpdf_sum(
                self.bases, prior.scale, prior.dof, self.diagonal
            )
        return value

    def jensen_gap(self, weights):
        """The data-dependent (<= 0) part of the conditional log prior."""
        if self.diagonal:
            log_prec = -np.log(self.bases)  # (D, Q)
            term1 = 0.5 * float(np.sum(weights @ log_prec))
            mixed = weights @ (1.0 / self.bases)
            term2 = 0.5 * float(np.sum(np.log(mixed)))
            return term1 - term2
        precisions = self.base_precisions()
        sign, logdets = np.linalg.slogdet(precisions)
        if np.any(sign <= 0):
            raise ParameterError("base matrices must be positive definite")
        term1 = 0.5 * float(weights.sum(axis=0) @ logdets)
        mixed = np.einsum("nd,dpq->npq", weights, precisions)
        sign2, logdets2 = np.linalg.slogdet(mixed)
        if np.any(sign2 <= 0):
            raise ParameterError("mixed precision not positive definite")
        term2 = 0.5 * float(np.sum(logdets2))
        return term1 - term2


def _inverse_wishart_logpdf_sum(bases, scale, dof, diagonal):
    """Sum of inverse-Wishart log densities over components (up to const)."""
    scale = np.asarray(scale, dtype=float)
    q = scale.shape[0]
    total = 0.0
    for b in bases:
        mat = np.diag(b) if diagonal else b
        chol, _ = jittered_cholesky(mat, name="base matrix")
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        inv_b = inv_psd(mat, name="base matrix")
        total += -0.5 * (dof + q + 1.0) * logdet - 0.5 * float(
            np.sum(scale * inv_b)
        )
    return total


# -- bandwidths ------------------------------------------------------------


def bandwidths_from_percent(anchors, x, r):
    """Per-anchor bandwidths from the r%-nearest-neighbor rule.

    Each bandwidth is the midpoint between the k-th and (k+1)-th nearest
    training-covariate distances from the anchor, k = ceil(r N / 100);
    when k = N the upper radius is taken as twice the largest distance.
    """
    if not (0.0 < r <= 100.0):
        raise ParameterError(f"percentage r must be in (0, 100], got {r}")
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n < 1:
        raise ParameterError("need at least one training covariate")
    k = min(int(math.ceil(r * n / 100.0)), n)
    dists = np.sqrt(
        np.maximum(
            np.sum((anchors[:, None, :] - x[None, :, :]) ** 2, axis=2), 0.0
        )
    )
    dists.sort(axis=1)
    lower = dists[:, k - 1]
    upper = 2.0 * dists[:, n - 1] if k == n else dists[:, k]
    h = 0.5 * (lower + upper)
    # Guard against coincident anchors and data producing a zero radius.
    floor = 1e-12 * max(float(dists.max()), 1.0)
    return np.maximum(h, floor)


def default_anchors(x, d, rng=None):
    """Anchor placement: evenly spaced for 1-D covariates, else a subsample."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    if d < 1:
        raise ParameterError("need at least one anchor")
    if p == 1:
        lo, hi = float(x.min()), float(x.max())
        if lo == hi:
            hi = lo + 1.0
        return np.linspace(lo, hi, d).reshape(-1, 1)
    if d >= n:
        return x.copy()
    if rng is None:
        rng = np.random.default_rng(0)
    idx = rng.choice(n, size=d, replace=False)
    return x[np.sort(idx)]
