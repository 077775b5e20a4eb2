"""Dense Gaussian and kernel algebra.

Covariance matrices over multi-output function values follow an
output-major layout: for covariate sets A (size m) and B (size n), the
joint matrix has entry [(p-1)m + i, (q-1)n + j] equal to the (p, q)
entry of the matrix-valued kernel at (a_i, b_j).  Vectorization of an
N x Q value matrix stacks its columns, so quadratic forms against these
matrices line up with rows holding per-covariate Q-vectors.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve

from ._linalg import (
    chol_logdet,
    chol_solve,
    jittered_cholesky,
    symmetrize,
    vec_columns,
)
from .exceptions import LinearAlgebraError, ParameterError

SQRT3 = math.sqrt(3.0)

KERNEL_FAMILIES = ("squared_exponential", "matern32")


def _pairwise_dist(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ParameterError(
            f"covariate dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2), d2


@dataclass(frozen=True)
class Kernel:
    """Stationary scalar kernel with positivity enforced in log-space.

    Parameters
    ----------
    family : str
        "squared_exponential": s^2 * exp(-g^2 r^2), or
        "matern32": s^2 * (1 + sqrt(3) g^2 r) * exp(-sqrt(3) g^2 r),
        with r the Euclidean distance.
    log_signal : float
        log(s); the signal standard deviation is exp(log_signal).
    log_decay : float
        log(g); the inverse-lengthscale parameter is exp(log_decay).
    """

    family: str = "squared_exponential"
    log_signal: float = 0.0
    log_decay: float = 0.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ParameterError(f"unknown kernel family: {self.family!r}")
        if not (np.isfinite(self.log_signal) and np.isfinite(self.log_decay)):
            raise ParameterError("kernel hyperparameters must be finite")

    @property
    def signal_var(self):
        return math.exp(2.0 * self.log_signal)

    @property
    def decay_sq(self):
        return math.exp(2.0 * self.log_decay)

    def __call__(self, a, b):
        """Gram matrix of the scalar kernel over rows of ``a`` and ``b``."""
        r, r2 = _pairwise_dist(a, b)
        s2 = self.signal_var
        g2 = self.decay_sq
        if self.family == "squared_exponential":
            return s2 * np.exp(-g2 * r2)
        u = SQRT3 * g2 * r
        return s2 * (1.0 + u) * np.exp(-u)

    def with_grads(self, a, b):
        """Gram matrix plus its derivatives w.r.t. (log_signal, log_decay)."""
        r, r2 = _pairwise_dist(a, b)
        s2 = self.signal_var
        g2 = self.decay_sq
        if self.family == "squared_exponential":
            k = s2 * np.exp(-g2 * r2)
            dk_dlog_decay = -2.0 * g2 * r2 * k
        else:
            u = SQRT3 * g2 * r
            e = np.exp(-u)
            k = s2 * (1.0 + u) * e
            dk_dlog_decay = -2.0 * s2 * u * u * e
        return k, {"log_signal": 2.0 * k, "log_decay": dk_dlog_decay}


@dataclass(frozen=True)
class MeanFunction:
    """Deterministic Q-output mean: zero, constant, or linear in x.

    ``offset`` is a Q-vector; ``slope`` is Q x P (used only by the
    linear form).  Evaluation over N covariates returns an N x Q matrix
    whose n-th row is the mean at x_n.
    """

    form: str = "zero"
    offset: np.ndarray | None = None
    slope: np.ndarray | None = None

    def __post_init__(self):
        if self.form not in ("zero", "constant", "linear"):
            raise ParameterError(f"unknown mean form: {self.form!r}")

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if self.form == "zero":
            q = 1 if self.offset is None else len(self.offset)
            return np.zeros((n, q))
        out = np.tile(np.asarray(self.offset, dtype=float), (n, 1))
        if self.form == "linear":
            out = out + x @ np.asarray(self.slope, dtype=float).T
        return out

    def n_params(self, q, p):
        if self.form == "zero":
            return 0
        if self.form == "constant":
            return q
        return q + q * p

    def get_params(self):
        if self.form == "zero":
            return np.zeros(0)
        if self.form == "constant":
            return np.asarray(self.offset, dtype=float).copy()
        return np.concatenate(
            [np.ravel(self.offset), np.ravel(self.slope)]
        )

    def set_params(self, theta, q, p):
        if self.form == "zero":
            return self
        if self.form == "constant":
            return replace(self, offset=np.asarray(theta, dtype=float).copy())
        return replace(
            self,
            offset=np.asarray(theta[:q], dtype=float).copy(),
            slope=np.asarray(theta[q:], dtype=float).reshape(q, p).copy(),
        )

    def design_columns(self, x, q):
        """Columns of d vec(mu_X) / d theta, shape (NQ, n_params)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, p = x.shape
        if self.form == "zero":
            return np.zeros((n * q, 0))
        cols = []
        for j in range(q):
            col = np.zeros((n, q))
            col[:, j] = 1.0
            cols.append(vec_columns(col))
        if self.form == "linear":
            for j in range(q):
                for d in range(p):
                    col = np.zeros((n, q))
                    col[:, j] = x[:, d]
                    cols.append(vec_columns(col))
        return np.column_stack(cols)


@dataclass(frozen=True)
class MultiOutputCov:
    """Separable multi-output covariance: output matrix kron kernel Gram."""

    output_cov: np.ndarray
    kernel: Kernel

    def __post_init__(self):
        s = symmetrize(np.asarray(self.output_cov, dtype=float))
        object.__setattr__(self, "output_cov", s)

    @property
    def n_outputs(self):
        return self.output_cov.shape[0]

    def gram(self, a, b):
        return gram(self, a, b)

    def at(self, x):
        """Q x Q covariance of the outputs at a single covariate pair (x, x)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.kernel(x, x)[0, 0]
        return k * self.output_cov


def gram(cov, a, b):
    """Joint covariance matrix over covariate sets ``a`` (rows) and ``b``.

    Returns the (|a| Q) x (|b| Q) matrix in the output-major layout; for
    a separable covariance this is kron(output_cov, K_ab).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ParameterError("covariate sets must be non-empty")
    k = cov.kernel(a, b)
    return np.kron(cov.output_cov, k)


@dataclass
class GaussianDist:
    """Multivariate normal with a jitter-tolerant Cholesky factorization."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(symmetrize(np.asarray(self.cov, dtype=float)))
        if self.cov.shape[0] != self.mean.shape[0]:
            raise ParameterError(
                f"mean/cov dimension mismatch: {self.mean.shape[0]} vs "
                f"{self.cov.shape[0]}"
            )

    @property
    def dim(self):
        return self.mean.shape[0]

    def chol(self):
        if self._chol is None:
            self._chol, _ = jittered_cholesky(self.cov, name="covariance")
        return self._chol

    def logpdf(self, x):
        return gaussian_logpdf(x, self.mean, self.cov, chol=self.chol())

    def sample(self, rng, size=None):
        c = self.chol()
        if size is None:
            return self.mean + c @ rng.standard_normal(self.dim)
        eps = rng.standard_normal((size, self.dim))
        return self.mean[None, :] + eps @ c.T


def gaussian_logpdf(x, mean, cov, chol=None):
    """Exact Gaussian log-density via Cholesky factorization."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if x.shape != mean.shape:
        raise ParameterError("point/mean dimension mismatch")
    if chol is None:
        chol, _ = jittered_cholesky(np.atleast_2d(cov), name="covariance")
    dev = x - mean
    alpha = chol_solve(chol, dev)
    k = x.shape[0]
    return -0.5 * (k * math.log(2.0 * math.pi) + chol_logdet(chol) + dev @ alpha)


def gaussian_condition(dist, observed_idx, observed_values):
    """Condition a joint Gaussian on a subset of its coordinates.

    Parameters
    ----------
    dist : GaussianDist
        The joint distribution.
    observed_idx : sequence of int
        Indices of conditioned coordinates; may be empty.
    observed_values : sequence of float
        Values at those coordinates.

    Returns
    -------
    GaussianDist over the remaining coordinates, in their original order.
    """
    observed_idx = np.asarray(observed_idx, dtype=int)
    observed_values = np.atleast_1d(np.asarray(observed_values, dtype=float))
    if observed_idx.size == 0:
        return GaussianDist(dist.mean.copy(), dist.cov.copy())
    if observed_idx.size != observed_values.size:
        raise ParameterError("observed indices/values length mismatch")
    k = dist.dim
    free = np.setdiff1d(np.arange(k), observed_idx, assume_unique=False)
    c_oo = dist.cov[np.ix_(observed_idx, observed_idx)]
    c_fo = dist.cov[np.ix_(free, observed_idx)]
    c_ff = dist.cov[np.ix_(free, free)]
    chol, _ = jittered_cholesky(c_oo, name="observed block")
    dev = observed_values - dist.mean[observed_idx]
    gain = chol_solve(chol, c_fo.T).T
    mean = dist.mean[free] + gain @ dev
    cov = symmetrize(c_ff - gain @ c_fo.T)
    return GaussianDist(mean, cov)


def gaussian_kl(p, q):
    """KL(p || q) between Gaussians of the same dimension; exactly 0 at p = q."""
    if p.dim != q.dim:
        raise ParameterError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    cq = q.chol()
    cp = p.chol()
    k = p.dim
    dev = q.mean - p.mean
    alpha = chol_solve(cq, dev)
    tr = float(np.trace(chol_solve(cq, p.cov)))
    return 0.5 * (tr + dev @ alpha - k + chol_logdet(cq) - chol_logdet(cp))


def marginal_loglik(y_vec, mean_vec, cov):
    """Gaussian marginal log-likelihood; raises on non-PSD covariance."""
    try:
        return gaussian_logpdf(y_vec, mean_vec, cov)
    except LinearAlgebraError:
        raise
