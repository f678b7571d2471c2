"""Cholesky-backed helpers for the small dense SPD matrices used everywhere.

Every matrix inversion in the library goes through a Cholesky factorization.
On failure, a jitter of 1e-8 * trace/d is added to the diagonal and the
factorization retried once; a second failure raises NumericalError.
"""

import numpy as np

from .model import NumericalError

JITTER_SCALE = 1e-8


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def chol(a):
    """Lower Cholesky factor of a single SPD matrix, with one jitter retry."""
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    d = a.shape[-1]
    jitter = JITTER_SCALE * np.trace(a) / d
    try:
        return np.linalg.cholesky(a + jitter * np.eye(d))
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"Cholesky failed for {d}x{d} matrix even after jitter {jitter:.3e}"
        ) from None


def chol_batch(a):
    """Lower Cholesky factors of a stack (m, d, d), jittering rows that fail."""
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        # At least one row is bad; factor rows individually so only those get jitter.
        return np.stack([chol(a[m]) for m in range(a.shape[0])])


def inv_from_chol(ell):
    """Inverse of L L^T given its lower factor L."""
    linv = np.linalg.inv(ell)
    return linv.T @ linv


def inv_from_chol_batch(ell):
    linv = np.linalg.inv(ell)
    return np.einsum("mki,mkj->mij", linv, linv)


def logdet_from_chol(ell):
    return 2.0 * np.sum(np.log(np.diagonal(ell, axis1=-2, axis2=-1)), axis=-1)


def spd_inverse(a):
    """Invert a single SPD matrix via Cholesky; output exactly symmetric."""
    return inv_from_chol(chol(a))


def spd_inverse_batch(a):
    """Invert a stack (m, d, d) of SPD matrices via Cholesky."""
    return inv_from_chol_batch(chol_batch(a))
