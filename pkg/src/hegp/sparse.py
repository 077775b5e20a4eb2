"""Variational-free-energy sparse approximation for large datasets.

The gram matrix over the training covariates is replaced by its Nystrom
surrogate through a small inducing set, the evidence bound picks up a
nonpositive trace correction, and every solve against
``surrogate + noise`` goes through the Woodbury identity with the
block-diagonal noise inverted per datum.  Cost is linear in the number
of data points at a fixed inducing-set size.
"""

import math

import numpy as np
from scipy.linalg import solve_triangular

from ._linalg import (
    chol_inverse,
    chol_logdet,
    chol_solve,
    jittered_cholesky,
    unvec_columns,
    vec_columns,
)
from .exceptions import ConfigError, ParameterError
from .gp_core import gram
from ._optim import ascend

LOG_2PI = math.log(2.0 * math.pi)


def nystrom_cov(cov, x, inducing):
    """Low-rank factor of the Nystrom surrogate of the joint gram matrix.

    Returns ``u`` with ``u @ u.T`` equal to
    ``gram(x, inducing) @ gram(inducing, inducing)^-1 @ gram(inducing, x)``;
    the surrogate itself is never densified here.
    """
    w = gram(cov, x, inducing)
    g = gram(cov, inducing, inducing)
    chol_g, _ = jittered_cholesky(g, name="inducing gram")
    return solve_triangular(chol_g, w.T, lower=True).T


def vfe_elbo_correction(cov, lam_blocks, x, inducing):
    """Trace penalty of the sparse bound: always <= 0.

    -1/2 * trace(noise^{-1} (gram - surrogate)), evaluated block by
    block with the per-datum noise inverses.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    q = cov.n_outputs
    u = nystrom_cov(cov, x, inducing)
    u_blocks = u.reshape(q, n, -1).transpose(1, 0, 2)
    uu = np.einsum("npr,nqr->npq", u_blocks, u_blocks)
    kdiag = np.array([cov.kernel(x[i : i + 1], x[i : i + 1])[0, 0] for i in range(n)])
    v_diag = np.einsum("n,pq->npq", kdiag, cov.output_cov)
    lam_inv = np.linalg.inv(np.asarray(lam_blocks, dtype=float))
    return -0.5 * float(np.einsum("npq,nqp->", lam_inv, v_diag - uu))


class SparseOps:
    """Woodbury-form covariance operations for one outer iteration."""

    sparse = True

    def __init__(self, gp, x, lam_blocks, inducing):
        self.gp = gp
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.inducing = np.atleast_2d(np.asarray(inducing, dtype=float))
        self.n = self.x.shape[0]
        self.q = gp.n_outputs
        self.lam_blocks = np.asarray(lam_blocks, dtype=float)
        self.lam_inv = np.linalg.inv(self.lam_blocks)
        sign, lam_logdets = np.linalg.slogdet(self.lam_blocks)
        if np.any(sign <= 0):
            raise ParameterError("noise blocks must be positive definite")
        self._assemble(gp)
        self.mu_x = gp.mean_matrix(self.x)
        self.vec_mu = vec_columns(self.mu_x)
        self.logdet_c = float(np.sum(lam_logdets)) + chol_logdet(self.chol_s)

    def _assemble(self, gp):
        n, q = self.n, self.q
        self.u = nystrom_cov(gp.cov, self.x, self.inducing)
        r = self.u.shape[1]
        self.r = r
        self.u_blocks = self.u.reshape(q, n, r).transpose(1, 0, 2)
        li_u_blocks = np.einsum("npq,nqr->npr", self.lam_inv, self.u_blocks)
        self.li_u = li_u_blocks.transpose(1, 0, 2).reshape(n * q, r)
        s = np.eye(r) + self.u.T @ self.li_u
        self.chol_s, _ = jittered_cholesky(s, name="Woodbury core")
        self.s_inv = chol_inverse(self.chol_s)
        kdiag = np.array(
            [gp.kernel(self.x[i : i + 1], self.x[i : i + 1])[0, 0] for i in range(n)]
        )
        self.v_diag_blocks = np.einsum("n,pq->npq", kdiag, gp.output_cov)
        self.cinv_blocks = self.lam_inv - np.einsum(
            "npr,rs,nqs->npq", li_u_blocks, self.s_inv, li_u_blocks
        )
        self._li_u_blocks = li_u_blocks

    # -- solves ------------------------------------------------------------

    def _lam_apply(self, vec):
        n, q = self.n, self.q
        if vec.ndim == 1:
            v = vec.reshape(q, n).T  # (N, Q)
            out = np.einsum("npq,nq->np", self.lam_inv, v)
            return out.T.ravel()
        v = vec.reshape(q, n, -1)
        out = np.einsum("npq,qnk->pnk", self.lam_inv, v)
        return out.reshape(n * q, -1)

    def solve(self, vec):
        li_v = self._lam_apply(vec)
        core = chol_solve(self.chol_s, self.li_u.T @ vec)
        return li_v - self.li_u @ core

    def quad(self, vec):
        return float(vec @ self.solve(vec))

    def trace_cinv_psi(self, psi_blocks):
        return float(np.einsum("npq,nqp->", self.cinv_blocks, psi_blocks))

    def elbo_correction(self):
        uu = np.einsum("npr,nqr->npq", self.u_blocks, self.u_blocks)
        return -0.5 * float(
            np.einsum("npq,nqp->", self.lam_inv, self.v_diag_blocks - uu)
        )

    # -- M-step sufficient matrices ------------------------------------------

    def update_matrices(self, delta_vec, psi_blocks=None, omega_full=None):
        if omega_full is not None:
            raise ConfigError(
                "missing responses are not supported in sparse mode"
            )
        n, q, r = self.n, self.q, self.r
        uu = np.einsum("npr,nqr->npq", self.u_blocks, self.u_blocks)
        usu = np.einsum("npr,rs,nqs->npq", self.u_blocks, self.s_inv, self.u_blocks)
        a_blocks = self.v_diag_blocks - uu + usu
        bd_vec = delta_vec - self.u @ chol_solve(
            self.chol_s, self.li_u.T @ delta_vec
        )
        bd = unvec_columns(bd_vec, n, q)
        m = a_blocks + np.einsum("np,nq->npq", bd, bd)
        if psi_blocks is not None:
            psi = np.asarray(psi_blocks, dtype=float)
            # G = (noise^{-1} U)^T, block column n times psi_n
            t1 = np.einsum("nqr,rs->nqs", self.u_blocks, self.s_inv)  # U S^{-1}
            gpsi = np.einsum("nqr,nqp->nrp", self._li_u_blocks, psi)  # (N,R,Q)
            gpsig = np.einsum("nrp,nps->rs", gpsi, self._li_u_blocks)
            cross = np.einsum("nqs,nsp->nqp", t1, gpsi)
            m = m + psi - cross - np.transpose(cross, (0, 2, 1))
            m = m + np.einsum("nps,st,nqt->npq", t1, gpsig, t1)
        return 0.5 * (m + np.transpose(m, (0, 2, 1)))

    def b_apply(self, vec):
        """Apply the residual projection (noise times joint inverse)."""
        return vec - self.u @ chol_solve(self.chol_s, self.li_u.T @ vec)

    def dense_b(self):
        """Dense (N, Q, NQ) residual projection rows, for small instances."""
        n, q = self.n, self.q
        b = np.eye(n * q) - self.u @ self.s_inv @ self.li_u.T
        return b.reshape(q, n, n * q).transpose(1, 0, 2)

    # -- joint hyperparameter update ------------------------------------------

    def update_gp_joint(self, gp, delta_builder, psi_blocks, cov_full,
                        n_steps=8, init_step=0.02):
        if cov_full is not None:
            raise ConfigError("missing responses are not supported in sparse mode")
        if not gp.train_gp:
            return gp
        x, xs = self.x, self.inducing
        n, q = self.n, self.q
        lam_inv = self.lam_inv
        psi = None if psi_blocks is None else np.asarray(psi_blocks, dtype=float)

        def value_and_grad(theta):
            cand = gp.unpack(theta)
            k_w, kg_w = cand.kernel.with_grads(x, xs)
            k_g, kg_g = cand.kernel.with_grads(xs, xs)
            sigma = cand.output_cov
            w = np.kron(sigma, k_w)
            g = np.kron(sigma, k_g)
            chol_g, _ = jittered_cholesky(g, name="inducing gram")
            u = solve_triangular(chol_g, w.T, lower=True).T
            r = u.shape[1]
            u_blocks = u.reshape(q, n, r).transpose(1, 0, 2)
            li_u_blocks = np.einsum("npq,nqr->npr", lam_inv, u_blocks)
            li_u = li_u_blocks.transpose(1, 0, 2).reshape(n * q, r)
            s = np.eye(r) + u.T @ li_u
            chol_s, _ = jittered_cholesky(s, name="Woodbury core")
            sign, lam_logdets = np.linalg.slogdet(self.lam_blocks)
            logdet_c = float(np.sum(lam_logdets)) + chol_logdet(chol_s)

            def t_apply(mat):
                li_m = self._lam_apply_with(lam_inv, mat)
                core = chol_solve(chol_s, li_u.T @ mat)
                return li_m - li_u @ core

            delta = delta_builder(cand.mean_matrix(x))
            a_vec = t_apply(delta)
            quad = float(delta @ a_vec)
            cinv_blocks = lam_inv - np.einsum(
                "npr,rs,nqs->npq", li_u_blocks, chol_inverse(chol_s), li_u_blocks
            )
            tr_psi = 0.0 if psi is None else float(
                np.einsum("npq,nqp->", cinv_blocks, psi)
            )
            kdiag_val = cand.kernel.signal_var
            v_diag = kdiag_val * np.broadcast_to(sigma, (n, q, q))
            uu = np.einsum("npr,nqr->npq", u_blocks, u_blocks)
            corr = -0.5 * float(np.einsum("npq,nqp->", lam_inv, v_diag - uu))
            value = (
                -0.5 * (n * q * LOG_2PI + logdet_c + quad + tr_psi) + corr
            )

            # gradients over the covariance parameters
            e = chol_solve(chol_g, w.T).T  # W G^{-1}, (NQ, R_g)
            z = t_apply(e)
            dz = delta @ z  # (R,)
            psi_z = 0.0
            if psi is not None:
                zb = z.reshape(q, n, -1)
                psi_z = np.einsum("npq,qnr->pnr", psi, zb).reshape(n * q, -1)
                t_psi_z = t_apply(psi_z)
            e_blocks = e.reshape(q, n, -1).transpose(1, 0, 2)
            li_e = np.einsum("npq,nqr->npr", lam_inv, e_blocks)
            f_mat = np.einsum("npr,nps->rs", e_blocks, li_e)
            ez = e.T @ z

            grads = []
            sig_grads = cand.output_cov_grads()
            n_kernel = 1
            for j in range(n_kernel + len(sig_grads)):
                if j < n_kernel:
                    dw = np.kron(sigma, kg_w["log_decay"])
                    dg = np.kron(sigma, kg_g["log_decay"])
                    dv_diag = np.zeros((n, q, q))
                else:
                    ds = sig_grads[j - n_kernel]
                    dw = np.kron(ds, k_w)
                    dg = np.kron(ds, k_g)
                    dv_diag = kdiag_val * np.broadcast_to(ds, (n, q, q))
                # tr(T dSigma_sp) with dSigma_sp = dW E^T + E dW^T - E dG E^T
                tr_t = 2.0 * float(np.sum(z * dw)) - float(np.sum(ez * dg))
                # tr(T Omega T dSigma_sp), Omega = delta delta^T + Psi
                ke = np.outer(a_vec, dz)
                if psi is not None:
                    ke = ke + t_psi_z
                tr_ko = 2.0 * float(np.sum(ke * dw)) - float(
                    np.sum((e.T @ ke) * dg)
                )
                # correction derivative
                dw_blocks = dw.reshape(q, n, -1).transpose(1, 0, 2)
                t_le = 2.0 * float(np.einsum("npr,npr->", li_e, dw_blocks))
                t_le -= float(np.sum(f_mat * dg))
                dcorr = -0.5 * (
                    float(np.einsum("npq,nqp->", lam_inv, dv_diag)) - t_le
                )
                grads.append(0.5 * (tr_ko - tr_t) + dcorr)
            cols = cand.mean.design_columns(x, q)
            mean_grad = cols.T @ a_vec
            return value, np.concatenate([grads, mean_grad])

        theta, _, _ = ascend(value_and_grad, gp.pack(), n_steps, init_step)
        return gp.unpack(theta)

    @staticmethod
    def _lam_apply_with(lam_inv, mat):
        n, q = lam_inv.shape[0], lam_inv.shape[1]
        if mat.ndim == 1:
            v = mat.reshape(q, n).T
            return np.einsum("npq,nq->np", lam_inv, v).T.ravel()
        v = mat.reshape(q, n, -1)
        return np.einsum("npq,qnk->pnk", lam_inv, v).reshape(n * q, -1)
