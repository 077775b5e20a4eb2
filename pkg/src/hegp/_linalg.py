"""Dense linear-algebra helpers shared by the whole package.

All positive-definite factorizations go through :func:`jittered_cholesky`,
which escalates a diagonal jitter from 1e-10 to 1e-6 times the mean
diagonal before giving up.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .exceptions import LinearAlgebraError

JITTER_START = 1e-10
JITTER_MAX = 1e-6


def jittered_cholesky(a, name="matrix"):
    """Lower Cholesky factor of ``a``, adding jitter if needed.

    Returns ``(chol, jitter_used)``. Raises LinearAlgebraError once the
    jitter ladder is exhausted.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinearAlgebraError(f"{name} is not square: shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinearAlgebraError(f"{name} contains non-finite entries")
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    eps = JITTER_START
    eye = np.eye(a.shape[0])
    while eps <= JITTER_MAX:
        try:
            return np.linalg.cholesky(a + eps * scale * eye), eps * scale
        except np.linalg.LinAlgError:
            eps *= 2.0
    raise LinearAlgebraError(
        f"{name} not positive definite within jitter budget ({JITTER_MAX:g})"
    )


def chol_solve(chol, b):
    """Solve ``A x = b`` given the lower Cholesky factor of ``A``."""
    return cho_solve((chol, True), b, check_finite=False)


def chol_logdet(chol):
    """log|A| from the lower Cholesky factor of ``A``."""
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def chol_inverse(chol):
    """Full inverse of ``A`` from its lower Cholesky factor."""
    n = chol.shape[0]
    return cho_solve((chol, True), np.eye(n), check_finite=False)


def solve_psd(a, b, name="matrix"):
    """Solve ``A x = b`` for symmetric positive (semi-)definite ``A``."""
    chol, _ = jittered_cholesky(a, name=name)
    return chol_solve(chol, b)


def inv_psd(a, name="matrix"):
    chol, _ = jittered_cholesky(a, name=name)
    return chol_inverse(chol)


def tri_solve(chol, b, trans=False):
    """Triangular solve with the lower factor (or its transpose)."""
    return solve_triangular(
        chol, b, lower=True, trans=1 if trans else 0, check_finite=False
    )


def symmetrize(a):
    return 0.5 * (a + a.T)


def logdet_psd(a, name="matrix"):
    chol, _ = jittered_cholesky(a, name=name)
    return chol_logdet(chol)


def floor_eigenvalues(a, rel_floor=1e-10):
    """Clamp eigenvalues of a symmetric matrix at ``rel_floor * trace / q``.

    Numerical backstop for M-step outputs that may come out singular.
    """
    a = np.asarray(a, dtype=float)
    if a.shape == (1, 1):
        v = float(a[0, 0])
        floor = rel_floor * max(v, 0.0)
        if floor <= 0.0:
            floor = rel_floor
        return np.array([[max(v, floor)]])
    a = symmetrize(a)
    q = a.shape[0]
    tr = float(np.trace(a))
    floor = rel_floor * max(tr, 0.0) / q
    if floor <= 0.0:
        floor = rel_floor
    w, v = np.linalg.eigh(a)
    if w[0] >= floor:
        return a
    w = np.maximum(w, floor)
    return symmetrize((v * w) @ v.T)


def blocks_to_blockdiag(blocks):
    """(N, Q, Q) per-datum blocks -> (NQ, NQ) matrix in output-major layout.

    Entry [(p N + n), (q N + n)] = blocks[n, p, q]; zeros elsewhere.
    """
    blocks = np.asarray(blocks, dtype=float)
    n, q, _ = blocks.shape
    out = np.zeros((n * q, n * q))
    idx = np.arange(n)
    for p in range(q):
        for r in range(q):
            out[p * n + idx, r * n + idx] = blocks[:, p, r]
    return out


def blockdiag_blocks(mat, n, q):
    """Extract the (N, Q, Q) per-datum diagonal blocks of an (NQ, NQ) matrix."""
    out = np.empty((n, q, q))
    idx = np.arange(n)
    for p in range(q):
        for r in range(q):
            out[:, p, r] = mat[p * n + idx, r * n + idx]
    return out


def vec_columns(mat):
    """Column-stacking vectorization of an (N, Q) matrix -> (NQ,) vector."""
    return np.asarray(mat, dtype=float).ravel(order="F")


def unvec_columns(v, n, q):
    """Inverse of :func:`vec_columns`."""
    return np.asarray(v, dtype=float).reshape((n, q), order="F")


def blockdiag_matmul(blocks, mat):
    """Multiply the block-diagonal operator of ``blocks`` with ``mat``.

    ``blocks`` is (N, Q, Q) in the output-major layout; ``mat`` is
    (NQ, K). Row block (p, n) of the product is
    sum_r blocks[n, p, r] * mat[(r N + n), :].
    """
    n, q, _ = blocks.shape
    k = mat.shape[1]
    m = mat.reshape(q, n, k)
    out = np.einsum("npr,rnk->pnk", blocks, m)
    return out.reshape(n * q, k)
