"""Variational-EM training engine.

The outer loop alternates four stages: refresh bandwidths from the
current neighborhood percentage, fit the per-datum Gaussian variational
factors (E-step), update the anchored base matrices in closed form plus
the GP hyperparameters and any free observation parameters (M-step), and
re-select the neighborhood percentage by cross-validation.

Two latent conventions share the machinery.  For the exact-Gaussian
family the latent is the smooth function itself and every posterior
moment is closed form, giving a plain (monotone) EM.  For every other
family the latent is the noisy target function, whose marginal prior has
covariance ``gram + noise``; a factorized Gaussian (per datum, plus a
positive scale factor for Student-t residuals) approximates its
posterior by gradient ascent on the evidence lower bound.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ._linalg import (
    blockdiag_blocks,
    blockdiag_matmul,
    blocks_to_blockdiag,
    chol_inverse,
    chol_logdet,
    chol_solve,
    floor_eigenvalues,
    jittered_cholesky,
    symmetrize,
    unvec_columns,
    vec_columns,
)
from ._optim import ascend
from .config import FitConfig
from .data import Dataset
from .exceptions import ConfigError, LinearAlgebraError, ParameterError, TrainingError
from .gp_core import Kernel, MeanFunction, MultiOutputCov, gram
from .precision import (
    PrecisionMixture,
    PrecisionPrior,
    bandwidths_from_percent,
    default_anchors,
)
from .third_level import (
    IdentityGaussian,
    ObservationModel,
    ProbitClassifier,
    StateSpaceLink,
    StudentTObservation,
    scale_factor_kl,
    scale_factor_moments,
)

logger = logging.getLogger("hegp")

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# GP parameter bundle


@dataclass(frozen=True)
class GPParams:
    """Kernel, output covariance (as its Cholesky factor), and mean.

    The kernel signal is pinned at 1 and the output covariance carries
    the scale; the two enter only as a product, so training both would
    be unidentifiable.
    """

    kernel: Kernel
    output_chol: np.ndarray  # (Q, Q) lower triangular, positive diagonal
    mean: MeanFunction
    n_covariates: int = 1
    train_gp: bool = True

    def __post_init__(self):
        oc = np.atleast_2d(np.asarray(self.output_chol, dtype=float))
        if np.any(np.diag(oc) <= 0):
            raise ParameterError("output Cholesky factor needs a positive diagonal")
        object.__setattr__(self, "output_chol", np.tril(oc))

    @property
    def n_outputs(self):
        return self.output_chol.shape[0]

    @property
    def output_cov(self):
        return self.output_chol @ self.output_chol.T

    @property
    def cov(self):
        return MultiOutputCov(self.output_cov, self.kernel)

    def mean_matrix(self, x):
        return self.mean(x)

    # -- flat parameter vector: [log_decay, chol entries, mean params] ----

    def pack(self):
        q = self.n_outputs
        chol_params = []
        for i in range(q):
            for j in range(i + 1):
                v = self.output_chol[i, j]
                chol_params.append(math.log(v) if i == j else v)
        mean_params = self.mean.get_params()
        return np.concatenate([[self.kernel.log_decay], chol_params, mean_params])

    def unpack(self, theta):
        q = self.n_outputs
        theta = np.asarray(theta, dtype=float)
        kernel = replace(self.kernel, log_decay=float(theta[0]))
        idx = 1
        oc = np.zeros((q, q))
        for i in range(q):
            for j in range(i + 1):
                oc[i, j] = math.exp(theta[idx]) if i == j else theta[idx]
                idx += 1
        mean = self.mean.set_params(theta[idx:], q, self.n_covariates)
        return replace(self, kernel=kernel, output_chol=oc, mean=mean)

    def n_cov_params(self):
        q = self.n_outputs
        return 1 + q * (q + 1) // 2

    def output_cov_grads(self):
        """d(output_cov)/d(theta_j) for each packed Cholesky parameter."""
        q = self.n_outputs
        grads = []
        oc = self.output_chol
        for i in range(q):
            for j in range(i + 1):
                e = np.zeros((q, q))
                e[i, j] = oc[i, j] if i == j else 1.0
                grads.append(symmetrize(2.0 * (e @ oc.T)))
        return grads

    def v_grad_mats(self, a, b):
        """dV/d(theta_j) over covariate sets for the covariance parameters.

        Returns (V, [dV_1, dV_2, ...]) ordered as in :meth:`pack`
        (covariance parameters only; mean parameters do not touch V).
        """
        k, kgrads = self.kernel.with_grads(a, b)
        sigma = self.output_cov
        v = np.kron(sigma, k)
        grads = [np.kron(sigma, kgrads["log_decay"])]
        for dsig in self.output_cov_grads():
            grads.append(np.kron(dsig, k))
        return v, grads


# ---------------------------------------------------------------------------
# Variational state and M-step containers


@dataclass
class VariationalState:
    """Per-datum Gaussian factors, plus scale factors for t-residuals."""

    means: np.ndarray  # (N, Q)
    covs: np.ndarray  # (N, Q, Q), each symmetric PD
    scales: np.ndarray | None = None  # (N,) positive, t-families only

    def copy(self):
        return VariationalState(
            self.means.copy(),
            self.covs.copy(),
            None if self.scales is None else self.scales.copy(),
        )


@dataclass
class MStepKernels:
    """Dense per-datum sufficient matrices for the closed-form updates.

    ``a`` holds the conditional-residual covariance blocks (N, Q, Q);
    ``b`` the residual projection rows (N, Q, NQ); ``omega`` the
    latent second-moment matrix (NQ, NQ).
    """

    a: np.ndarray
    b: np.ndarray
    omega: np.ndarray

    def per_datum(self):
        """A_n + B_n Omega B_n^T for every datum, symmetrized."""
        n, q, _ = self.a.shape
        bo = np.einsum("npk,kl,nql->npq", self.b, self.omega, self.b)
        out = self.a + bo
        return 0.5 * (out + np.transpose(out, (0, 2, 1)))


# ---------------------------------------------------------------------------
# Dense covariance operations for one outer iteration


class DenseOps:
    """Dense factorizations shared by the E- and M-steps of one iteration."""

    sparse = False

    def __init__(self, gp, x, lam_blocks):
        self.gp = gp
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.n = self.x.shape[0]
        self.q = gp.n_outputs
        self.lam_blocks = np.asarray(lam_blocks, dtype=float)
        self.v = gram(gp.cov, self.x, self.x)
        kxx = gp.kernel(self.x, self.x)
        self.v_diag_blocks = np.einsum(
            "n,pq->npq", np.diag(kxx), gp.output_cov
        )
        c = self.v + blocks_to_blockdiag(self.lam_blocks)
        self.c_chol, _ = jittered_cholesky(c, name="joint covariance")
        self.logdet_c = chol_logdet(self.c_chol)
        self.c_inv = chol_inverse(self.c_chol)
        self.cinv_blocks = blockdiag_blocks(self.c_inv, self.n, self.q)
        self.mu_x = gp.mean_matrix(self.x)
        self.vec_mu = vec_columns(self.mu_x)

    def solve(self, vec):
        return chol_solve(self.c_chol, vec)

    def quad(self, vec):
        return float(vec @ self.solve(vec))

    def trace_cinv_psi(self, psi_blocks):
        return float(np.einsum("npq,nqp->", self.cinv_blocks, psi_blocks))

    def elbo_correction(self):
        return 0.0

    # -- M-step sufficient matrices ----------------------------------------

    def b_full(self):
        """The residual projection matrix, noise times joint inverse."""
        return blockdiag_matmul(self.lam_blocks, self.c_inv)

    def mstep_kernels(self, delta_vec, psi_blocks=None, omega_full=None):
        """Dense A/B/Omega triple for the closed-form updates."""
        n, q = self.n, self.q
        bf = self.b_full()
        b_r = bf.reshape(q, n, n * q)
        v_r = self.v.reshape(q, n, n * q)
        a_blocks = np.einsum("pnk,qnk->npq", v_r, b_r)
        a_blocks = 0.5 * (a_blocks + np.transpose(a_blocks, (0, 2, 1)))
        omega = np.outer(delta_vec, delta_vec)
        if psi_blocks is not None:
            omega = omega + blocks_to_blockdiag(psi_blocks)
        if omega_full is not None:
            omega = omega + omega_full
        b = np.transpose(b_r, (1, 0, 2))
        return MStepKernels(a=a_blocks, b=b, omega=omega)

    def update_matrices(self, delta_vec, psi_blocks=None, omega_full=None):
        """Per-datum matrices A_n + (B Omega B^T)_nn without densifying Omega."""
        n, q = self.n, self.q
        bf = self.b_full()
        b_r = bf.reshape(q, n, n * q)
        v_r = self.v.reshape(q, n, n * q)
        a_blocks = np.einsum("pnk,qnk->npq", v_r, b_r)
        bd = unvec_columns(bf @ delta_vec, n, q)
        m = a_blocks + np.einsum("np,nq->npq", bd, bd)
        if psi_blocks is not None:
            bpsi = blockdiag_matmul(psi_blocks, bf.T).T
            m = m + np.einsum(
                "pnk,qnk->npq", bpsi.reshape(q, n, n * q), b_r
            )
        if omega_full is not None:
            t1 = bf @ omega_full
            m = m + np.einsum(
                "pnk,qnk->npq", t1.reshape(q, n, n * q), b_r
            )
        return 0.5 * (m + np.transpose(m, (0, 2, 1)))

    # -- moments of the smooth function under the current factors ----------

    def smooth_posterior(self, delta_vec, psi_blocks=None, omega_full=None):
        """Mean deviation and covariance pieces of the smooth latent.

        Returns (mean_dev, s_cov) with mean_dev = V C^{-1} delta and
        s_cov = V - V C^{-1} V + V C^{-1} S C^{-1} V for the factor
        second-moment part S (per-datum blocks and/or a full matrix).
        """
        alpha = self.solve(delta_vec)
        mean_dev = self.v @ alpha
        w1 = self.solve(self.v)
        s_cov = self.v - self.v @ w1
        inner = None
        if psi_blocks is not None:
            inner = blocks_to_blockdiag(psi_blocks)
        if omega_full is not None:
            inner = omega_full if inner is None else inner + omega_full
        if inner is not None:
            s_cov = s_cov + w1.T @ inner @ w1
        return mean_dev, symmetrize(s_cov)

    def update_gp_joint(self, gp, delta_builder, psi_blocks, cov_full,
                        n_steps=8, init_step=0.02):
        return update_gp_params_joint(
            gp, self.x, self.lam_blocks, delta_builder,
            psi_blocks=psi_blocks, cov_full=cov_full,
            n_steps=n_steps, init_step=init_step,
        )


# ---------------------------------------------------------------------------
# Observation-term evaluation (value + gradients) for the general path


class ObsContext:
    """Per-iteration context for the third-level expectation terms."""

    def __init__(self, obs_model, dataset, lam_blocks, phi_blocks=None, eps=None):
        self.model = obs_model
        self.y = dataset.y
        self.mask = dataset.mask
        self.fully_observed = dataset.fully_observed
        self.lam_blocks = lam_blocks
        self.eps = eps  # (M, N, Q) fixed standard normals, MC families
        if isinstance(obs_model, IdentityGaussian):
            self.lam_inv = np.linalg.inv(np.asarray(lam_blocks, dtype=float))
            sign, logdets = np.linalg.slogdet(np.asarray(lam_blocks, dtype=float))
            if np.any(sign <= 0):
                raise ParameterError("noise blocks must be positive definite")
            self.lam_logdets = logdets
        if isinstance(obs_model, StudentTObservation):
            if obs_model.phi_source == "tied":
                s2 = obs_model.outlier_scale**2
                if s2 <= 0:
                    raise ParameterError(
                        "tied t-residuals need a positive outlier scale"
                    )
                self.phi_blocks = s2 * lam_blocks
            else:
                if phi_blocks is None:
                    raise ParameterError("free t-residuals need scale matrices")
                self.phi_blocks = np.asarray(phi_blocks, dtype=float)
            if not self.fully_observed:
                raise ConfigError(
                    "missing responses are not supported for t-residual families"
                )
            self.phi_inv = np.linalg.inv(self.phi_blocks)
            sign, logdets = np.linalg.slogdet(self.phi_blocks)
            if np.any(sign <= 0):
                raise ParameterError("t scale matrices must be positive definite")
            self.phi_logdets = logdets

    def value_and_grads(self, means, covs, log_scales=None):
        """Total expected log-likelihood and its gradients.

        Returns (value, d_means (N,Q), d_covs (N,Q,Q), d_log_scales or None).
        """
        model = self.model
        if isinstance(model, IdentityGaussian):
            return self._identity(means, covs)
        if isinstance(model, StudentTObservation):
            return self._student_t(means, covs, log_scales)
        if isinstance(model, ProbitClassifier):
            return self._probit(means, covs)
        if isinstance(model, StateSpaceLink):
            return self._mc(means, covs)
        raise ParameterError(f"unsupported observation model: {type(model).__name__}")

    def _identity(self, means, covs):
        n, q = means.shape
        if self.fully_observed:
            r = self.y - means
            quad = np.einsum("np,npq,nq->n", r, self.lam_inv, r)
            trc = np.einsum("npq,nqp->n", self.lam_inv, covs)
            value = float(
                np.sum(-0.5 * (q * LOG_2PI + self.lam_logdets + quad + trc))
            )
            d_means = np.einsum("npq,nq->np", self.lam_inv, r)
            d_covs = -0.5 * self.lam_inv
            return value, d_means, d_covs, None
        value = 0.0
        d_means = np.zeros_like(means)
        d_covs = np.zeros_like(covs)
        for i in range(n):
            o = self.mask[i]
            if not o.any():
                continue
            sub = self.lam_blocks[i][np.ix_(o, o)]
            chol, _ = jittered_cholesky(sub, name="noise block")
            li = chol_inverse(chol)
            r = self.y[i, o] - means[i, o]
            value += -0.5 * (
                int(o.sum()) * LOG_2PI
                + chol_logdet(chol)
                + float(r @ li @ r)
                + float(np.sum(li * covs[i][np.ix_(o, o)]))
            )
            d_means[i, o] = li @ r
            d_covs[i][np.ix_(o, o)] = -0.5 * li
        return value, d_means, d_covs, None

    def optimal_scales(self, means, covs):
        """Per-datum closed-form maximizer of the bound over scale factors."""
        if not isinstance(self.model, StudentTObservation):
            raise ParameterError("scale factors exist only for t families")
        nu = self.model.nu
        n, q = means.shape
        r = self.y - means
        quad = np.einsum("np,npq,nq->n", r, self.phi_inv, r)
        trc = np.einsum("npq,nqp->n", self.phi_inv, covs)
        return np.sqrt((nu + q) / (nu + quad + trc))

    def _student_t(self, means, covs, log_scales):
        nu = self.model.nu
        n, q = means.shape
        xi2 = np.exp(2.0 * log_scales)
        r = self.y - means
        quad = np.einsum("np,npq,nq->n", r, self.phi_inv, r)
        trc = np.einsum("npq,nqp->n", self.phi_inv, covs)
        c = quad + trc
        a = 0.5 * (nu + q)
        from scipy.special import digamma

        c_a = math.log(a) - float(digamma(a))
        kl = scale_factor_kl(nu, q, log_scales)
        value = float(
            np.sum(
                -0.5 * q * LOG_2PI
                - 0.5 * self.phi_logdets
                + q * log_scales
                - 0.5 * q * c_a
                - 0.5 * xi2 * c
                - kl
            )
        )
        d_means = xi2[:, None] * np.einsum("npq,nq->np", self.phi_inv, r)
        d_covs = -0.5 * xi2[:, None, None] * self.phi_inv
        d_log = (q + nu) - xi2 * (c + nu)
        return value, d_means, d_covs, d_log

    def _probit(self, means, covs):
        n, q = means.shape
        value = 0.0
        d_means = np.zeros_like(means)
        d_covs = np.zeros_like(covs)
        for i in range(n):
            if not self.mask[i, 0]:
                continue
            v, de, dp = self.model.expected_loglik(
                self.y[i, 0], means[i, 0], covs[i, 0, 0]
            )
            value += v
            d_means[i, 0] = de
            d_covs[i, 0, 0] = dp
        return value, d_means, d_covs, None

    def _mc(self, means, covs):
        model = self.model
        eps = self.eps
        m = eps.shape[0]
        n, q = means.shape
        chols = np.linalg.cholesky(covs)
        f = means[None, :, :] + np.einsum("npq,mnq->mnp", chols, eps)
        value = 0.0
        d_means = np.zeros_like(means)
        d_chol = np.zeros_like(covs)
        scales = model.noise_scales
        for qi in range(q):
            s = scales[qi]
            h = model.link_value(qi, f[:, :, qi])
            u = (self.y[None, :, qi] - h) / s
            lp = model._noise_logpdf(u) - math.log(s)
            score = model._noise_score(u)
            dldf = score * (-model.link_slope(qi, f[:, :, qi]) / s)
            obs = self.mask[None, :, qi]
            value += float(np.sum(np.where(obs, lp, 0.0))) / m
            dldf = np.where(obs, dldf, 0.0)
            d_means[:, qi] += dldf.sum(axis=0) / m
            # gradient through the Cholesky factor rows of output qi
            d_chol[:, qi, :] += np.einsum("mn,mnr->nr", dldf, eps) / m
        # chain rule from the factor to the covariance: dC = dT T^{-T}/2 sym
        d_covs = np.zeros_like(covs)
        for i in range(n):
            t = chols[i]
            g = d_chol[i]
            # d/dC tr(G^T T(C)) with C = T T^T: solve Sylvester-ish via
            # the standard identity grad_C = Phi(T^{-1} G)... use direct:
            # for our ascent only a valid ascent direction in C is needed;
            # push the T-gradient through C = T T^T exactly instead.
            d_covs[i] = 0.5 * (g @ np.linalg.inv(t).T + np.linalg.inv(t) @ g.T)
        return value, d_means, d_covs, None


# ---------------------------------------------------------------------------
# E-step


def _pack_state(state, with_scales):
    n, q = state.means.shape
    chols = np.linalg.cholesky(state.covs)
    tril_idx = np.tril_indices(q)
    tparams = chols[:, tril_idx[0], tril_idx[1]].copy()
    diag_cols = [k for k, (i, j) in enumerate(zip(*tril_idx)) if i == j]
    tparams[:, diag_cols] = np.log(tparams[:, diag_cols])
    parts = [state.means.ravel(), tparams.ravel()]
    if with_scales:
        parts.append(np.log(state.scales))
    return np.concatenate(parts), (tril_idx, diag_cols)


def _unpack_state(z, n, q, layout, with_scales):
    tril_idx, diag_cols = layout
    k = len(tril_idx[0])
    means = z[: n * q].reshape(n, q)
    tparams = z[n * q : n * q + n * k].reshape(n, k).copy()
    tparams[:, diag_cols] = np.exp(tparams[:, diag_cols])
    chols = np.zeros((n, q, q))
    chols[:, tril_idx[0], tril_idx[1]] = tparams
    covs = np.einsum("npk,nqk->npq", chols, chols)
    scales = np.exp(z[n * q + n * k :]) if with_scales else None
    return VariationalState(means, covs, scales), chols


def _chol_grad(d_cov_blocks, chols, diag_cols, tril_idx):
    """Chain symmetric cov-gradients onto packed Cholesky parameters."""
    g = 2.0 * np.einsum("npq,nqr->npr", d_cov_blocks, chols)
    gt = g[:, tril_idx[0], tril_idx[1]].copy()
    diag_vals = chols[:, tril_idx[0], tril_idx[1]][:, diag_cols]
    gt[:, diag_cols] *= diag_vals
    return gt


def make_estep_objective(ops, dataset, obs_ctx, state0, profile_scales=True):
    """The E-step objective (value and gradient) over packed factors.

    Returns ``(value_and_grad, z0, unpack)`` where ``unpack`` maps a
    packed vector back to a VariationalState.  With ``profile_scales``
    the per-datum scale factors are eliminated by their closed-form
    maximizer before every evaluation (block ascent on the same bound);
    without it they stay in the packed vector, which is what the
    gradient checks exercise.
    """
    n, q = dataset.n, dataset.n_outputs
    has_scales = state0.scales is not None
    profiled = has_scales and profile_scales
    with_scales = has_scales and not profiled
    z0, layout = _pack_state(state0, with_scales)
    tril_idx, diag_cols = layout
    profiled_scales = [None if not profiled else state0.scales.copy()]

    def value_and_grad(z):
        state, chols = _unpack_state(z, n, q, layout, with_scales)
        if profiled:
            state.scales = obs_ctx.optimal_scales(state.means, state.covs)
            profiled_scales[0] = state.scales
        delta = vec_columns(state.means - ops.mu_x)
        alpha = ops.solve(delta)
        quad = float(delta @ alpha)
        tr = ops.trace_cinv_psi(state.covs)
        logdets = 2.0 * np.sum(
            np.log(chols[:, np.arange(q), np.arange(q)])
        )
        log_scales = None if state.scales is None else np.log(state.scales)
        obs_value, d_means, d_covs, d_log = obs_ctx.value_and_grads(
            state.means, state.covs, log_scales
        )
        value = -0.5 * (quad + tr) + 0.5 * float(logdets) + obs_value
        g_means = -unvec_columns(alpha, n, q) + d_means
        chol_inv_t = np.linalg.inv(chols)
        g_covs = -0.5 * ops.cinv_blocks + d_covs
        # entropy contribution: +1/2 d log|Psi_n| / dPsi = +1/2 Psi^{-1}
        g_covs = g_covs + 0.5 * np.einsum(
            "nqp,nqr->npr", chol_inv_t, chol_inv_t
        )
        g_t = _chol_grad(g_covs, chols, diag_cols, tril_idx)
        parts = [g_means.ravel(), g_t.ravel()]
        if with_scales:
            parts.append(d_log)
        return value, np.concatenate(parts)

    def unpack(z):
        state, _ = _unpack_state(z, n, q, layout, with_scales)
        if profiled:
            state.scales = (
                profiled_scales[0]
                if profiled_scales[0] is not None
                else obs_ctx.optimal_scales(state.means, state.covs)
            )
            state.scales = obs_ctx.optimal_scales(state.means, state.covs)
        return state

    return value_and_grad, z0, unpack


def estep(
    ops,
    dataset,
    obs_ctx,
    state0,
    n_iter,
    init_step=0.05,
):
    """Ascend the evidence bound over the variational factors.

    The t families run reweighted closed-form block updates (each block
    update is an exact maximization, so the bound never decreases and
    the iteration stays in the local solution selected by its starting
    point -- hopping to the degenerate response-memorizing optimum would
    erase the outlier structure).  Other families run adaptive gradient
    ascent over means, covariance factors, and any scale factors.
    """
    if isinstance(obs_ctx.model, StudentTObservation):
        return _estep_reweighted(ops, dataset, obs_ctx, state0, n_iter)
    value_and_grad, z0, unpack = make_estep_objective(ops, dataset, obs_ctx, state0)
    z_best, value_best, trace = ascend(value_and_grad, z0, n_iter, init_step)
    return unpack(z_best), value_best, trace


def _estep_reweighted(ops, dataset, obs_ctx, state0, n_iter, tol=1e-10):
    """Block-coordinate E-step for t residuals.

    Rounds of exact updates: scale factors from their closed form, the
    per-datum covariances from prior-block plus reweighted observation
    precisions, and the means from one Gaussian solve against the prior
    with per-datum noise 1 / (xi^2 Phi^{-1}).
    """
    n, q = dataset.n, dataset.n_outputs
    means = state0.means.copy()
    covs = state0.covs.copy()
    phi_inv = obs_ctx.phi_inv
    y = dataset.y
    trace = []
    value = None
    scales = obs_ctx.optimal_scales(means, covs)
    for _ in range(max(1, int(n_iter))):
        # covariance blocks: (prior block precision + xi^2 Phi^{-1})^{-1}
        w = scales[:, None, None] ** 2 * phi_inv
        covs = np.linalg.inv(ops.cinv_blocks + w)
        # means: Gaussian combination of the prior and reweighted data
        w_inv = np.linalg.inv(w)
        r0 = vec_columns(y - ops.mu_x)
        z = _solve_prior_plus_noise(ops, w_inv, r0)
        means = ops.mu_x + unvec_columns(z, n, q)
        scales = obs_ctx.optimal_scales(means, covs)
        state = VariationalState(means, covs, scales)
        new_value = _estep_value(ops, dataset, obs_ctx, state)
        trace.append(new_value)
        if value is not None and abs(new_value - value) <= tol * (1 + abs(value)):
            value = new_value
            break
        value = new_value
    return VariationalState(means, covs, scales), value, trace


def _estep_value(ops, dataset, obs_ctx, state):
    delta = vec_columns(state.means - ops.mu_x)
    quad = ops.quad(delta)
    tr = ops.trace_cinv_psi(state.covs)
    sign, logdets = np.linalg.slogdet(state.covs)
    obs_value, _, _, _ = obs_ctx.value_and_grads(
        state.means, state.covs, np.log(state.scales)
    )
    return -0.5 * (quad + tr) + 0.5 * float(np.sum(logdets)) + obs_value


def _solve_prior_plus_noise(ops, noise_blocks, rhs):
    """Solve for the conditional-mean deviation of the latent:
    prior_cov (prior_cov + noise)^{-1} rhs, with per-datum noise blocks."""
    n, q = ops.n, ops.q
    if not ops.sparse:
        c = ops.v + blocks_to_blockdiag(ops.lam_blocks)
        total = c + blocks_to_blockdiag(noise_blocks)
        chol, _ = jittered_cholesky(total, name="reweighted covariance")
        return c @ chol_solve(chol, rhs)
    lam2 = ops.lam_blocks + noise_blocks
    lam2_inv = np.linalg.inv(lam2)
    li_u_blocks = np.einsum("npq,nqr->npr", lam2_inv, ops.u_blocks)
    li_u = li_u_blocks.transpose(1, 0, 2).reshape(n * q, -1)
    s = np.eye(li_u.shape[1]) + ops.u.T @ li_u
    chol_s, _ = jittered_cholesky(s, name="reweighted core")
    li_rhs = SparseOpsApply(lam2_inv, n, q)(rhs)
    sol = li_rhs - li_u @ chol_solve(chol_s, ops.u.T @ li_rhs)
    # multiply by the prior covariance (low-rank plus blocks)
    return ops.u @ (ops.u.T @ sol) + SparseOpsApply(ops.lam_blocks, n, q)(sol)


class SparseOpsApply:
    """Block-diagonal matrix application in the output-major layout."""

    def __init__(self, blocks, n, q):
        self.blocks = blocks
        self.n = n
        self.q = q

    def __call__(self, vec):
        v = vec.reshape(self.q, self.n).T
        out = np.einsum("npq,nq->np", self.blocks, v)
        return out.T.ravel()


def elbo_value(ops, dataset, obs_ctx, state, jensen=0.0):
    """Full evidence bound at the given variational state."""
    n, q = dataset.n, dataset.n_outputs
    delta = vec_columns(state.means - ops.mu_x)
    quad = ops.quad(delta)
    tr = ops.trace_cinv_psi(state.covs)
    sign, logdets = np.linalg.slogdet(state.covs)
    if np.any(sign <= 0):
        raise ParameterError("variational covariances must be positive definite")
    log_scales = None if state.scales is None else np.log(state.scales)
    obs_value, _, _, _ = obs_ctx.value_and_grads(state.means, state.covs, log_scales)
    term_prior = -0.5 * (n * q * LOG_2PI + ops.logdet_c + quad + tr)
    entropy = 0.5 * float(np.sum(logdets)) + 0.5 * n * q * (LOG_2PI + 1.0)
    return term_prior + entropy + obs_value + jensen + ops.elbo_correction()


# ---------------------------------------------------------------------------
# Exact path quantities (identity-Gaussian family)


def exact_latent_moments(ops, dataset):
    """Moments of the latent value vector given the observed responses.

    Fully observed data leave the responses as a point mass (zero
    covariance); missing entries are integrated out exactly, giving the
    Gaussian conditional over the full vector.
    Returns (mean_vec (NQ,), cov_full (NQ, NQ) or None, loglik).
    """
    n, q = dataset.n, dataset.n_outputs
    vec_y = vec_columns(dataset.y)
    if dataset.fully_observed:
        dev = vec_y - ops.vec_mu
        loglik = -0.5 * (n * q * LOG_2PI + ops.logdet_c + ops.quad(dev))
        return vec_y, None, float(loglik)
    if ops.sparse:
        raise ConfigError("missing responses are not supported in sparse mode")
    obs = vec_columns(dataset.mask).astype(bool)
    c = ops.v + blocks_to_blockdiag(ops.lam_blocks)
    c_oo = c[np.ix_(obs, obs)]
    chol_oo, _ = jittered_cholesky(c_oo, name="observed covariance")
    dev_o = vec_y[obs] - ops.vec_mu[obs]
    alpha = chol_solve(chol_oo, dev_o)
    n_obs = int(obs.sum())
    loglik = -0.5 * (
        n_obs * LOG_2PI + chol_logdet(chol_oo) + float(dev_o @ alpha)
    )
    gain = chol_solve(chol_oo, c[obs, :]).T
    mean = ops.vec_mu + gain @ dev_o
    mean[obs] = vec_y[obs]
    cov = c - gain @ c[obs, :]
    cov[obs, :] = 0.0
    cov[:, obs] = 0.0
    return mean, symmetrize(cov), float(loglik)


# ---------------------------------------------------------------------------
# Closed-form base-matrix updates


def update_base_matrices(
    m_blocks,
    weights,
    current_bases,
    prior=None,
    denom_factor=1.0,
    diagonal=False,
):
    """Weighted-average update of the anchored base matrices.

    ``m_blocks`` holds the per-datum sufficient matrices; the flat-prior
    update is their weighted average per anchor, the inverse-Wishart one
    shrinks toward the prior scale.  Anchors with zero total weight keep
    their previous value (with a warning).
    """
    weights = np.asarray(weights, dtype=float)
    n, d = weights.shape
    wsum = weights.sum(axis=0)
    if diagonal:
        m_diag = np.einsum("npp->np", np.asarray(m_blocks, dtype=float))
        num = weights.T @ m_diag  # (D, Q)
        new = np.array(current_bases, dtype=float, copy=True)
        for di in range(d):
            if wsum[di] <= 1e-300:
                logger.warning("anchor %d carries no weight; keeping its value", di)
                continue
            if prior is not None and prior.kind == "inverse_wishart":
                g0 = np.diag(np.asarray(prior.scale, dtype=float))
                den = prior.dof + 2.0 + denom_factor * wsum[di]
                new[di] = (g0 + num[di]) / den
            else:
                new[di] = num[di] / (denom_factor * wsum[di])
        return np.maximum(new, 1e-300)
    m_blocks = np.asarray(m_blocks, dtype=float)
    q = m_blocks.shape[1]
    num = np.einsum("nd,npq->dpq", weights, m_blocks)
    new = np.array(current_bases, dtype=float, copy=True)
    for di in range(d):
        if wsum[di] <= 1e-300:
            logger.warning("anchor %d carries no weight; keeping its value", di)
            continue
        if prior is not None and prior.kind == "inverse_wishart":
            g0 = np.asarray(prior.scale, dtype=float)
            den = prior.dof + q + 1.0 + denom_factor * wsum[di]
            cand = (g0 + num[di]) / den
        else:
            cand = num[di] / (denom_factor * wsum[di])
        new[di] = floor_eigenvalues(cand)
    return new


def update_scale_matrix_bases(dataset, state, weights, current_bases, diagonal=False):
    """Closed-form update of the free t-residual scale mixture bases."""
    r = dataset.y - state.means
    xi2 = state.scales**2
    r_blocks = np.einsum("np,nq->npq", r, r) + state.covs
    m_blocks = xi2[:, None, None] * r_blocks
    return update_base_matrices(
        m_blocks, weights, current_bases, prior=None, diagonal=diagonal
    )


# ---------------------------------------------------------------------------
# GP hyperparameter updates


def _upsilon_objective_standard(gp, x, mean_dev_plus_mu, s_cov):
    """Expected smooth-prior log-density as a function of the GP params.

    The expectation is over the fixed posterior factor of the smooth
    function; ``mean_dev_plus_mu`` is its mean vector, ``s_cov`` its
    covariance.  Needs the gram matrix itself to be invertible.
    """
    n = x.shape[0]
    q = gp.n_outputs

    def value_and_grad(theta):
        cand = gp.unpack(theta)
        v, vgrads = cand.v_grad_mats(x, x)
        try:
            chol = np.linalg.cholesky(v)
        except np.linalg.LinAlgError:
            return -np.inf, np.zeros_like(theta)
        mu = vec_columns(cand.mean_matrix(x))
        dvec = mean_dev_plus_mu - mu
        alpha = chol_solve(chol, dvec)
        w2 = chol_solve(chol, chol_solve(chol, s_cov).T)
        value = -0.5 * (
            n * q * LOG_2PI
            + chol_logdet(chol)
            + float(dvec @ alpha)
            + float(np.trace(chol_solve(chol, s_cov)))
        )
        gmat = w2 + np.outer(alpha, alpha) - chol_inverse(chol)
        grads = [0.5 * float(np.sum(gmat * dv)) for dv in vgrads]
        cols = cand.mean.design_columns(x, q)
        mean_grad = cols.T @ alpha
        return value, np.concatenate([grads, mean_grad])

    return value_and_grad


def update_gp_params(gp, x, mean_dev, s_cov, n_steps=8, init_step=0.02):
    """Ascend the expected smooth-prior log-density over the GP params.

    Raises LinearAlgebraError if the gram matrix stays singular, in
    which case callers switch to the joint-bound gradient instead.
    """
    if not gp.train_gp:
        return gp
    mu0 = vec_columns(gp.mean_matrix(x))
    fn = _upsilon_objective_standard(gp, x, mean_dev + mu0, s_cov)
    theta0 = gp.pack()
    v0, _ = fn(theta0)
    if not np.isfinite(v0):
        # The objective needs the inverse of the gram matrix itself; a
        # strictly failed factorization means the update is ill-posed
        # and the caller should use the joint-bound gradient instead.
        raise LinearAlgebraError("gram matrix singular in the hyperparameter step")
    theta, _, _ = ascend(fn, theta0, n_steps, init_step)
    return gp.unpack(theta)


def upsilon_joint_gradient(gp, x, lam_blocks, omega):
    """Gradient of the joint bound in the GP parameters, at their current value.

    Uses the inverse of (gram + noise), so it stays valid when the gram
    matrix alone is degenerate.  The factor (omega - gram - noise) is
    formed explicitly, making the gradient exactly zero at the fixed
    point omega = gram + noise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v, vgrads = gp.v_grad_mats(x, x)
    c = v + blocks_to_blockdiag(np.asarray(lam_blocks, dtype=float))
    chol, _ = jittered_cholesky(c, name="joint covariance")
    diff = np.asarray(omega, dtype=float) - c
    inner = chol_solve(chol, chol_solve(chol, diff).T).T
    return np.array([0.5 * float(np.sum(inner * dv)) for dv in vgrads])


def update_gp_params_joint(
    gp,
    x,
    lam_blocks,
    delta_builder,
    psi_blocks=None,
    cov_full=None,
    n_steps=8,
    init_step=0.02,
):
    """Ascend the joint bound over the GP params (noise blocks held fixed).

    ``delta_builder`` maps a candidate mean matrix to the vector of
    factor-mean deviations, so mean parameters re-enter correctly.  The
    factor second moment is per-datum blocks, a full matrix, or both.
    """
    if not gp.train_gp:
        return gp
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, q = x.shape[0], gp.n_outputs
    lam_bd = blocks_to_blockdiag(np.asarray(lam_blocks, dtype=float))
    second = None
    if psi_blocks is not None:
        second = blocks_to_blockdiag(psi_blocks)
    if cov_full is not None:
        second = cov_full if second is None else second + cov_full
    if second is None:
        second = np.zeros((n * q, n * q))

    def value_and_grad(theta):
        cand = gp.unpack(theta)
        v, vgrads = cand.v_grad_mats(x, x)
        c = v + lam_bd
        chol, _ = jittered_cholesky(c, name="joint covariance")
        delta = delta_builder(cand.mean_matrix(x))
        alpha = chol_solve(chol, delta)
        cinv = chol_inverse(chol)
        cs = cinv @ second
        value = -0.5 * (
            n * q * LOG_2PI
            + chol_logdet(chol)
            + float(delta @ alpha)
            + float(np.trace(cs))
        )
        inner = np.outer(alpha, alpha) + cs @ cinv - cinv
        grads = [0.5 * float(np.sum(inner * dv)) for dv in vgrads]
        cols = cand.mean.design_columns(x, q)
        mean_grad = cols.T @ alpha
        return value, np.concatenate([grads, mean_grad])

    theta, _, _ = ascend(value_and_grad, gp.pack(), n_steps, init_step)
    return gp.unpack(theta)


# ---------------------------------------------------------------------------
# Free observation-parameter update (frozen-sample objective)


def update_obs_params(obs_model, dataset, state, mc_samples, rng, n_steps=25):
    """Gradient ascent of the Monte-Carlo expected log-likelihood over theta.

    Latent samples are drawn once from the current factors and frozen
    for the whole update.
    """
    theta0 = obs_model.get_params()
    if theta0.size == 0:
        return obs_model
    n, q = dataset.n, dataset.n_outputs
    m = max(2, mc_samples // 2 * 2)
    eps_half = rng.standard_normal((m // 2, n, q))
    eps = np.concatenate([eps_half, -eps_half], axis=0)
    chols = np.linalg.cholesky(state.covs)
    f = state.means[None, :, :] + np.einsum("npq,mnq->mnp", chols, eps)

    def value_and_grad(theta):
        cand = obs_model.set_params(theta)
        total = 0.0
        grad = np.zeros_like(theta)
        for mi in range(m):
            for i in range(n):
                if not dataset.mask[i].all():
                    continue
                total += cand.loglik(dataset.y[i], f[mi, i])
                grad += cand.grad_params(dataset.y[i], f[mi, i])
        return total / m, grad / m

    theta, _, _ = ascend(value_and_grad, theta0, n_steps, init_step=0.1)
    return obs_model.set_params(theta)


def frozen_sample_objective(obs_model, dataset, f_samples):
    """The frozen-sample M-step objective as a function of theta (for tests)."""

    def fn(theta):
        cand = obs_model.set_params(theta)
        m = f_samples.shape[0]
        total = 0.0
        for mi in range(m):
            for i in range(dataset.n):
                total += cand.loglik(dataset.y[i], f_samples[mi, i])
        return total / m

    return fn


# ---------------------------------------------------------------------------
# Bandwidth-percentage cross-validation


def select_bandwidth_percent(
    x,
    anchors,
    m_blocks,
    r_grid,
    adjacent_percent,
    current_bases,
    prior=None,
    denom_factor=1.0,
    diagonal=False,
):
    """Score each candidate percentage and return the best one.

    For each candidate, bandwidths follow the nearest-neighbor rule, the
    base matrices are re-estimated in closed form from the fixed
    per-datum sufficient matrices, the nearest anchors of each datum are
    excluded from its weights, and the held-out expected fit of the
    second level is scored.  Ties prefer the smaller percentage.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    n = x.shape[0]
    d = anchors.shape[0]
    if len(r_grid) == 0:
        raise ParameterError("the percentage grid cannot be empty")
    k_excl = min(int(math.ceil(adjacent_percent * d / 100.0)), d)
    d2 = np.sum((x[:, None, :] - anchors[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1)
    excluded = order[:, :k_excl]
    m_blocks = np.asarray(m_blocks, dtype=float)
    q = m_blocks.shape[1]
    m_diag = np.einsum("npp->np", m_blocks)

    best_r, best_score = None, -np.inf
    scores = {}
    for r in sorted(r_grid):
        h = bandwidths_from_percent(anchors, x, r)
        logk = -0.5 * d2 / (h[None, :] ** 2)
        top = logk.max(axis=1)
        ok = top >= math.log(1e-300)
        w = np.zeros_like(logk)
        w[ok] = np.exp(logk[ok] - top[ok, None])
        w[ok] /= w[ok].sum(axis=1, keepdims=True)
        bases_r = update_base_matrices(
            m_blocks, w, current_bases, prior=prior,
            denom_factor=denom_factor, diagonal=diagonal,
        )
        # held-out weights: zero the excluded anchors and renormalize;
        # raw underflow collapses onto the nearest remaining anchor
        logk_t = logk.copy()
        np.put_along_axis(logk_t, excluded, -np.inf, axis=1)
        top_t = logk_t.max(axis=1)
        valid = np.isfinite(top_t)
        n_skipped = int(n - valid.sum())
        if n_skipped:
            logger.warning(
                "percentage %.3g: %d data points lost every anchor and were "
                "skipped in the score", r, n_skipped,
            )
        if not np.any(valid):
            scores[r] = -np.inf
            continue
        wt = np.exp(logk_t[valid] - top_t[valid, None])
        wt /= wt.sum(axis=1, keepdims=True)
        collapsed = top_t[valid] < math.log(1e-300)
        if np.any(collapsed):
            sub = wt[collapsed]
            sub[:] = 0.0
            sub[np.arange(sub.shape[0]),
                np.argmax(logk_t[valid][collapsed], axis=1)] = 1.0
            wt[collapsed] = sub
        if diagonal:
            ivar = wt @ (1.0 / bases_r)  # (n_valid, Q)
            tr_term = np.sum(ivar * m_diag[valid])
            logdet_term = -np.sum(np.log(ivar))
        else:
            prec = np.linalg.inv(bases_r)
            mixed = np.einsum("nd,dpq->npq", wt, prec)
            tr_term = float(np.einsum("npq,nqp->", mixed, m_blocks[valid]))
            sign, logdets = np.linalg.slogdet(mixed)
            logdet_term = -float(np.sum(logdets))
        n_valid = int(valid.sum())
        score = -0.5 * (tr_term + logdet_term + n_valid * q * LOG_2PI)
        scores[r] = score
        if score > best_score + 0.0:
            best_score, best_r = score, r
    if best_r is None:
        raise TrainingError("bandwidth cross-validation scored no candidate")
    return best_r, scores


# ---------------------------------------------------------------------------
# Model bundle and fit drivers


@dataclass
class EMState:
    """Everything the outer loop carries between iterations."""

    gp: GPParams
    mixture: PrecisionMixture
    obs_model: ObservationModel
    var_state: VariationalState | None
    r_hat: float
    iteration: int = 0
    elbo_trace: list = field(default_factory=list)
    loglik_trace: list = field(default_factory=list)
    r_trace: list = field(default_factory=list)
    sigma0: float | None = None
    scale_mixture: PrecisionMixture | None = None  # free t-residual scales
    converged: bool = False
    exact_cov_full: np.ndarray | None = None  # masked exact path only
    config: FitConfig | None = None
    prior: PrecisionPrior | None = None

    def parameter_vector(self):
        parts = [np.ravel(self.mixture.bases), self.gp.pack()]
        if self.scale_mixture is not None:
            parts.append(np.ravel(self.scale_mixture.bases))
        theta = self.obs_model.get_params()
        if theta.size:
            parts.append(theta)
        return np.concatenate(parts)


def _build_obs_model(config, dataset):
    fam = config.model_family
    if fam == "gaussian":
        return IdentityGaussian()
    if fam == "student_t":
        return StudentTObservation(nu=config.nu, phi_source="mixture")
    if fam == "outlier":
        return StudentTObservation(
            nu=config.nu, phi_source="tied", outlier_scale=config.sigma0
        )
    if fam == "probit":
        if dataset.n_outputs != 1:
            raise ConfigError("probit classification expects a single output")
        labels = dataset.y[dataset.mask]
        if np.any((labels != 0) & (labels != 1)):
            raise ConfigError("probit classification expects 0/1 labels")
        return ProbitClassifier(delta=config.delta)
    if fam == "state_space":
        if config.links is None:
            raise ConfigError("state-space fits need link definitions")
        scales = (
            np.ones(dataset.n_outputs)
            if config.noise_scales is None
            else np.asarray(config.noise_scales, dtype=float)
        )
        return StateSpaceLink(
            links=tuple(tuple(t for t in terms) for terms in config.links),
            noise_scales=scales,
            noise=config.state_noise,
            noise_nu=config.nu,
            free_offsets=tuple(config.free_offsets),
        )
    raise ConfigError(f"unknown model family: {fam!r}")


def _prior_from_config(config, q):
    if config.prior == "flat":
        return PrecisionPrior()
    scale = (
        np.eye(q)
        if config.prior_scale is None
        else np.asarray(config.prior_scale, dtype=float)
    )
    dof = q + 2.0 if config.prior_dof is None else float(config.prior_dof)
    return PrecisionPrior(kind="inverse_wishart", scale=scale, dof=dof)


def initialize(dataset, config, rng=None):
    """Starting point of the outer loop, per the documented defaults."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, p, q = dataset.n, dataset.n_covariates, dataset.n_outputs
    obs_model = _build_obs_model(config, dataset)
    regression_like = config.model_family in ("gaussian", "student_t", "outlier")

    # mean function by least squares on observed entries
    mean = MeanFunction(form=config.mean, offset=np.zeros(q),
                        slope=np.zeros((q, p)) if config.mean == "linear" else None)
    if config.mean != "zero" and regression_like:
        offset = np.zeros(q)
        slope = np.zeros((q, p))
        for j in range(q):
            obs = dataset.mask[:, j]
            if not obs.any():
                continue
            if config.mean == "linear":
                a = np.column_stack([dataset.x[obs], np.ones(obs.sum())])
                coef, *_ = np.linalg.lstsq(a, dataset.y[obs, j], rcond=None)
                slope[j] = coef[:p]
                offset[j] = coef[p]
            else:
                offset[j] = float(dataset.y[obs, j].mean())
        mean = MeanFunction(
            form=config.mean,
            offset=offset,
            slope=slope if config.mean == "linear" else None,
        )
    elif config.mean != "zero":
        mean = MeanFunction(
            form=config.mean,
            offset=np.zeros(q),
            slope=np.zeros((q, p)) if config.mean == "linear" else None,
        )
    mu0 = mean(dataset.x)
    resid = np.where(dataset.mask, dataset.y - mu0, np.nan)
    var = np.nanvar(resid, axis=0)
    var = np.where(np.isfinite(var) & (var > 0), var, 1.0)

    # kernel inverse-lengthscale from the median pairwise distance
    sub = dataset.x[rng.choice(n, size=min(n, 200), replace=False)]
    dists = np.sqrt(
        np.sum((sub[:, None, :] - sub[None, :, :]) ** 2, axis=2)
    )
    med = float(np.median(dists[dists > 0])) if np.any(dists > 0) else 1.0
    kernel = Kernel(family=config.kernel, log_signal=0.0,
                    log_decay=math.log(1.0 / max(med, 1e-6)))

    # output covariance from residual covariance (regression) or unit
    if regression_like and n > q:
        filled = np.where(dataset.mask, dataset.y - mu0, 0.0)
        sig = np.cov(filled.T) if q > 1 else np.array([[np.var(filled)]])
        sig = np.atleast_2d(sig) + 1e-6 * np.eye(q) * max(var.max(), 1.0)
    else:
        sig = np.eye(q)
    out_chol = np.linalg.cholesky(floor_eigenvalues(sig, 1e-8))
    gp = GPParams(kernel=kernel, output_chol=out_chol, mean=mean, n_covariates=p)

    # anchors and base matrices
    if isinstance(config.induced_points, str) and config.induced_points == "auto":
        anchors = default_anchors(dataset.x, config.d, rng)
    else:
        anchors = np.atleast_2d(np.asarray(config.induced_points, dtype=float))
    d = anchors.shape[0]
    r0 = float(np.median(np.asarray(config.r_grid)))
    h0 = bandwidths_from_percent(anchors, dataset.x, r0)
    if config.diagonal_mode:
        bases = np.tile(var, (d, 1))
    else:
        bases = np.tile(np.diag(var), (d, 1, 1))
    mixture = PrecisionMixture(
        anchors=anchors, bases=bases, bandwidths=h0, diagonal=config.diagonal_mode
    )

    scale_mixture = None
    if config.model_family == "student_t":
        sb = 0.5 * bases.copy()
        scale_mixture = PrecisionMixture(
            anchors=anchors, bases=sb, bandwidths=h0, diagonal=config.diagonal_mode
        )

    var_state = None
    if config.model_family != "gaussian":
        # t-residual families start the factor means on the smooth side:
        # starting them at the responses puts every datum in the basin
        # where the observation term memorizes it and the scale factors
        # stay pinned at one, so outliers would never be discriminated.
        if config.model_family in ("student_t", "outlier"):
            eta0 = mu0.copy()
        elif regression_like:
            eta0 = np.where(dataset.mask, dataset.y, mu0)
        else:
            eta0 = np.zeros((n, q))
        psi_scale = 0.1 * float(np.mean(var))
        covs = np.tile(psi_scale * np.eye(q), (n, 1, 1))
        scales = (
            np.ones(n)
            if isinstance(obs_model, StudentTObservation)
            else None
        )
        var_state = VariationalState(eta0.copy(), covs, scales)

    return EMState(
        gp=gp,
        mixture=mixture,
        obs_model=obs_model,
        var_state=var_state,
        r_hat=r0,
        sigma0=config.sigma0 if config.model_family == "outlier" else None,
        scale_mixture=scale_mixture,
        config=config,
        prior=_prior_from_config(config, q),
    )


def _smooth_mean_vec(ops, delta_vec):
    """Deviation-part of the smooth conditional mean, gram times solve."""
    alpha = ops.solve(delta_vec)
    if ops.sparse:
        return ops.u @ (ops.u.T @ alpha)
    return ops.v @ alpha


def _make_ops(gp, x, lam_blocks, config):
    if config is not None and config.sparse.enabled:
        from .sparse import SparseOps

        inducing = default_anchors(x, config.sparse.m)
        return SparseOps(gp, x, lam_blocks, inducing)
    return DenseOps(gp, x, lam_blocks)


def fit(dataset, config, callback=None):
    """Run the full training loop and return the final state.

    The exact-Gaussian family (and the tied t family at zero outlier
    scale) takes the exact-EM path; everything else runs the variational
    E-step.  ``callback(state, t)`` is invoked after each iteration.
    """
    config.validate()
    if config.model_family == "outlier" and config.sigma0 == 0.0:
        exact_cfg = replace_config(config, model_family="gaussian")
        out = fit(dataset, exact_cfg, callback=callback)
        out.sigma0 = 0.0
        out.config = config
        return out
    state = initialize(dataset, config)
    if config.model_family == "gaussian":
        return _fit_exact(dataset, config, state, callback)
    return _fit_variational(dataset, config, state, callback)


def replace_config(config, **kw):
    doc = config.to_dict()
    doc.update(kw)
    return FitConfig.from_dict(doc)


def fit_exact_gaussian(dataset, config, callback=None):
    """Exact-EM specialization for the identity-Gaussian family."""
    cfg = config if config.model_family == "gaussian" else replace_config(
        config, model_family="gaussian"
    )
    cfg.validate()
    state = initialize(dataset, cfg)
    return _fit_exact(dataset, cfg, state, callback)


def _converged(history, tol, patience):
    if len(history) < patience + 1:
        return False
    prev = history[-(patience + 1)]
    for vec in history[-patience:]:
        denom = np.maximum(np.abs(prev), 1e-12)
        if np.max(np.abs(vec - prev) / denom) >= tol:
            return False
        prev = vec
    return True


def _fit_exact(dataset, config, state, callback=None):
    n, q = dataset.n, dataset.n_outputs
    history = []
    for t in range(config.outer_iters):
        try:
            h = bandwidths_from_percent(
                state.mixture.anchors, dataset.x, state.r_hat
            )
            state.mixture = state.mixture.with_bandwidths(h)
            weights = state.mixture.weights_matrix(dataset.x)
            lam_blocks = state.mixture.noise_cov_all(dataset.x, weights=weights)
            ops = _make_ops(state.gp, dataset.x, lam_blocks, config)

            # E-step: exact latent moments and the observed-data log-likelihood
            mean_vec, cov_full, loglik = exact_latent_moments(ops, dataset)
            state.loglik_trace.append(loglik + ops.elbo_correction())
            state.elbo_trace.append(loglik + ops.elbo_correction())
            delta = mean_vec - ops.vec_mu
            state.var_state = VariationalState(
                unvec_columns(mean_vec, n, q),
                np.zeros((n, q, q)),
                None,
            )
            state.exact_cov_full = cov_full

            # M-step: base matrices and GP hyperparameters, both against
            # the posterior taken at the iteration-start parameters
            m_blocks = ops.update_matrices(delta, omega_full=cov_full)
            smooth_moments = None
            if not (config.upsilon_in_estep or ops.sparse):
                try:
                    smooth_moments = ops.smooth_posterior(
                        delta, omega_full=cov_full
                    )
                except LinearAlgebraError:
                    smooth_moments = None
            state.mixture = state.mixture.with_bases(
                update_base_matrices(
                    m_blocks,
                    weights,
                    state.mixture.bases,
                    prior=state.prior,
                    diagonal=config.diagonal_mode,
                )
            )

            def delta_builder(mu_mat):
                return mean_vec - vec_columns(mu_mat)

            if config.upsilon_in_estep or ops.sparse:
                state.gp = ops.update_gp_joint(
                    state.gp, delta_builder, None, cov_full,
                    n_steps=config.upsilon_steps,
                )
            else:
                updated = False
                if smooth_moments is not None:
                    mean_dev, s_cov = smooth_moments
                    try:
                        state.gp = update_gp_params(
                            state.gp, dataset.x, mean_dev, s_cov,
                            n_steps=config.upsilon_steps,
                        )
                        updated = True
                    except LinearAlgebraError:
                        updated = False
                if not updated:
                    logger.info(
                        "gram matrix degenerate; switching to the joint "
                        "hyperparameter gradient"
                    )
                    state.gp = update_gp_params_joint(
                        state.gp,
                        dataset.x,
                        lam_blocks,
                        delta_builder,
                        cov_full=cov_full,
                        n_steps=config.upsilon_steps,
                    )

            # cross-validation of the neighborhood percentage
            if len(config.r_grid) > 1 and state.mixture.n_components > 1:
                weights2 = state.mixture.weights_matrix(dataset.x)
                lam2 = state.mixture.noise_cov_all(dataset.x, weights=weights2)
                ops2 = _make_ops(state.gp, dataset.x, lam2, config)
                mean2 = mean_vec  # factor moments stay fixed during CV
                m2 = ops2.update_matrices(mean2 - ops2.vec_mu, omega_full=cov_full)
                state.r_hat, _ = select_bandwidth_percent(
                    dataset.x,
                    state.mixture.anchors,
                    m2,
                    config.r_grid,
                    config.adjacent_percent_a,
                    state.mixture.bases,
                    prior=state.prior,
                    diagonal=config.diagonal_mode,
                )
            state.r_trace.append(state.r_hat)
        except (LinearAlgebraError, ParameterError) as exc:
            raise TrainingError(str(exc), iteration=t, trace=state.elbo_trace)
        state.iteration = t + 1
        history.append(state.parameter_vector())
        if callback is not None:
            callback(state, t)
        if _converged(history, config.convergence_tol, config.convergence_patience):
            state.converged = True
            break
    return state


def _fit_variational(dataset, config, state, callback=None):
    n, q = dataset.n, dataset.n_outputs
    if isinstance(state.obs_model, StudentTObservation) and not dataset.fully_observed:
        raise ConfigError(
            "missing responses are not supported for t-residual families"
        )
    history = []
    tied = (
        isinstance(state.obs_model, StudentTObservation)
        and state.obs_model.phi_source == "tied"
    )
    for t in range(config.outer_iters):
        try:
            h = bandwidths_from_percent(
                state.mixture.anchors, dataset.x, state.r_hat
            )
            state.mixture = state.mixture.with_bandwidths(h)
            if state.scale_mixture is not None:
                state.scale_mixture = state.scale_mixture.with_bandwidths(h)
            weights = state.mixture.weights_matrix(dataset.x)
            lam_blocks = state.mixture.noise_cov_all(dataset.x, weights=weights)
            ops = _make_ops(state.gp, dataset.x, lam_blocks, config)

            phi_blocks = None
            if state.scale_mixture is not None:
                phi_blocks = state.scale_mixture.noise_cov_all(
                    dataset.x, weights=weights
                )
            eps = None
            if getattr(state.obs_model, "needs_mc", False):
                m = max(2, config.mc_samples // 2 * 2)
                half = np.random.default_rng(
                    [config.seed, t, 101]
                ).standard_normal((m // 2, n, q))
                eps = np.concatenate([half, -half], axis=0)
            ctx = ObsContext(
                state.obs_model, dataset, lam_blocks, phi_blocks, eps
            )

            # E-step. The t families restart their factor means from the
            # smooth conditional mean each iteration: local optimum
            # selection (reject vs. absorb a datum) must happen at the
            # current noise scale, and a warm start would freeze the
            # assignment made when the noise field was still diffuse.
            if isinstance(state.obs_model, StudentTObservation):
                delta_prev = vec_columns(state.var_state.means - ops.mu_x)
                smooth_mean = ops.mu_x + unvec_columns(
                    _smooth_mean_vec(ops, delta_prev), n, q
                )
                state.var_state.means = smooth_mean
            state.var_state, _, _ = estep(
                ops, dataset, ctx, state.var_state, config.estep_iters
            )
            if config.upsilon_in_estep or ops.sparse:

                def delta_builder(mu_cand):
                    return vec_columns(state.var_state.means - mu_cand)

                state.gp = ops.update_gp_joint(
                    state.gp, delta_builder, state.var_state.covs, None,
                    n_steps=config.upsilon_steps,
                )
                ops = _make_ops(state.gp, dataset.x, lam_blocks, config)
                state.var_state, _, _ = estep(
                    ops, dataset, ctx, state.var_state,
                    max(1, config.estep_iters // 3),
                )
            jensen = state.mixture.jensen_gap(weights)
            state.elbo_trace.append(
                elbo_value(ops, dataset, ctx, state.var_state, jensen)
            )

            # M-step; posterior moments for the hyperparameter update are
            # taken before the base matrices move
            delta = vec_columns(state.var_state.means - ops.mu_x)
            m_blocks = ops.update_matrices(delta, psi_blocks=state.var_state.covs)
            smooth_moments = None
            if not (config.upsilon_in_estep or ops.sparse):
                try:
                    smooth_moments = ops.smooth_posterior(
                        delta, psi_blocks=state.var_state.covs
                    )
                except LinearAlgebraError:
                    smooth_moments = None
            if tied:
                s2 = state.obs_model.outlier_scale**2
                r = dataset.y - state.var_state.means
                xi2 = state.var_state.scales**2
                r_blocks = (
                    np.einsum("np,nq->npq", r, r) + state.var_state.covs
                )
                m_eff = m_blocks + (xi2 / s2)[:, None, None] * r_blocks
                state.mixture = state.mixture.with_bases(
                    update_base_matrices(
                        m_eff,
                        weights,
                        state.mixture.bases,
                        prior=state.prior,
                        denom_factor=2.0,
                        diagonal=config.diagonal_mode,
                    )
                )
            else:
                state.mixture = state.mixture.with_bases(
                    update_base_matrices(
                        m_blocks,
                        weights,
                        state.mixture.bases,
                        prior=state.prior,
                        diagonal=config.diagonal_mode,
                    )
                )
                if state.scale_mixture is not None:
                    state.scale_mixture = state.scale_mixture.with_bases(
                        update_scale_matrix_bases(
                            dataset,
                            state.var_state,
                            weights,
                            state.scale_mixture.bases,
                            diagonal=config.diagonal_mode,
                        )
                    )
            if state.obs_model.get_params().size:
                state.obs_model = update_obs_params(
                    state.obs_model,
                    dataset,
                    state.var_state,
                    config.mc_samples,
                    np.random.default_rng([config.seed, t, 202]),
                )

            if not (config.upsilon_in_estep or ops.sparse):
                updated = False
                if smooth_moments is not None:
                    mean_dev, s_cov = smooth_moments
                    try:
                        state.gp = update_gp_params(
                            state.gp, dataset.x, mean_dev, s_cov,
                            n_steps=config.upsilon_steps,
                        )
                        updated = True
                    except LinearAlgebraError:
                        updated = False
                if not updated:
                    logger.info(
                        "gram matrix degenerate; switching to the joint "
                        "hyperparameter gradient"
                    )
                    state.gp = update_gp_params_joint(
                        state.gp,
                        dataset.x,
                        lam_blocks,
                        lambda mu_cand: vec_columns(
                            state.var_state.means - mu_cand
                        ),
                        psi_blocks=state.var_state.covs,
                        n_steps=config.upsilon_steps,
                    )

            # cross-validation
            if len(config.r_grid) > 1 and state.mixture.n_components > 1:
                weights2 = state.mixture.weights_matrix(dataset.x)
                lam2 = state.mixture.noise_cov_all(dataset.x, weights=weights2)
                ops2 = _make_ops(state.gp, dataset.x, lam2, config)
                delta2 = vec_columns(state.var_state.means - ops2.mu_x)
                m2 = ops2.update_matrices(
                    delta2, psi_blocks=state.var_state.covs
                )
                denom = 1.0
                if tied:
                    s2 = state.obs_model.outlier_scale**2
                    r = dataset.y - state.var_state.means
                    xi2 = state.var_state.scales**2
                    r_blocks = (
                        np.einsum("np,nq->npq", r, r) + state.var_state.covs
                    )
                    m2 = 0.5 * (m2 + (xi2 / s2)[:, None, None] * r_blocks)
                state.r_hat, _ = select_bandwidth_percent(
                    dataset.x,
                    state.mixture.anchors,
                    m2,
                    config.r_grid,
                    config.adjacent_percent_a,
                    state.mixture.bases,
                    prior=state.prior,
                    denom_factor=denom,
                    diagonal=config.diagonal_mode,
                )
            state.r_trace.append(state.r_hat)
        except (LinearAlgebraError, ParameterError) as exc:
            raise TrainingError(str(exc), iteration=t, trace=state.elbo_trace)
        if state.elbo_trace and not np.isfinite(state.elbo_trace[-1]):
            raise TrainingError(
                "evidence bound became non-finite",
                iteration=t,
                trace=state.elbo_trace,
            )
        state.iteration = t + 1
        history.append(state.parameter_vector())
        if callback is not None:
            callback(state, t)
        if _converged(history, config.convergence_tol, config.convergence_patience):
            state.converged = True
            break
    return state


# ---------------------------------------------------------------------------
# Stand-alone evidence-bound evaluation (library surface)


def _factor_machinery(dataset, gp, mixture, obs_model, config=None,
                      scale_mixture=None, mc_eps=None):
    """Build the per-iteration pieces for an arbitrary family.

    For the identity family the factor prior is the gram matrix alone
    and the per-datum noise acts as the observation covariance; for the
    other families the prior covariance is gram + noise.
    """
    weights = mixture.weights_matrix(dataset.x)
    lam_blocks = mixture.noise_cov_all(dataset.x, weights=weights)
    if isinstance(obs_model, IdentityGaussian):
        prior_blocks = np.zeros_like(lam_blocks)
        jensen = 0.0
    else:
        prior_blocks = lam_blocks
        jensen = mixture.jensen_gap(weights)
    ops = _make_ops(gp, dataset.x, prior_blocks, config)
    phi_blocks = None
    if scale_mixture is not None:
        phi_blocks = scale_mixture.noise_cov_all(dataset.x, weights=weights)
    ctx = ObsContext(obs_model, dataset, lam_blocks, phi_blocks, mc_eps)
    return ops, ctx, jensen


def evidence_bound(dataset, gp, mixture, obs_model, state, config=None,
                   scale_mixture=None, mc_eps=None):
    """Evidence lower bound at an arbitrary variational state.

    For the identity-Gaussian family the bound treats the responses as
    noisy observations of the smooth latent (its exact counterpart is
    the Gaussian marginal likelihood); otherwise it is the training
    objective of the variational E-step at fixed parameters.
    """
    ops, ctx, jensen = _factor_machinery(
        dataset, gp, mixture, obs_model, config, scale_mixture, mc_eps
    )
    return elbo_value(ops, dataset, ctx, state, jensen)


def estep_factors(dataset, gp, mixture, obs_model, state0, n_iter,
                  config=None, scale_mixture=None, mc_eps=None,
                  init_step=0.05):
    """Run one variational E-step from an arbitrary starting state."""
    ops, ctx, _ = _factor_machinery(
        dataset, gp, mixture, obs_model, config, scale_mixture, mc_eps
    )
    return estep(ops, dataset, ctx, state0, n_iter, init_step)


def expected_loglik_mc(obs_model, y, eta, psi, eps, scale=None):
    """Monte-Carlo expected log-likelihood of one datum (reparameterized)."""
    chol = np.linalg.cholesky(np.atleast_2d(psi))
    vals = []
    for e in eps:
        f = np.atleast_1d(eta) + chol @ np.atleast_1d(e)
        vals.append(obs_model.loglik(np.atleast_1d(y), f, scale=scale))
    return float(np.mean(vals)), float(np.std(vals) / math.sqrt(len(vals)))
