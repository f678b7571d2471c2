"""Covariance reconstruction, RV accuracy, Bartlett prediction, and shrinkage
diagnostics.

Point estimates follow the reporting convention used throughout: variational
means for loadings, the inverse-gamma mean rate/(shape-1) for the noise
variances (falling back to the mode-style rate/(shape+1) with a warning when
the shape does not exceed 1).
"""

from __future__ import annotations

import warnings

import numpy as np

from .linalg import chol
from .model import (
    DimensionError,
    FaState,
    MsfaState,
    NumericalError,
)


def psi_squared_point(shape: np.ndarray, rate: np.ndarray) -> np.ndarray:
    """Inverse-gamma mean when it exists, else the mode-based fallback."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    ok = shape > 1.0
    if not np.all(ok):
        warnings.warn("psi shape <= 1: using rate/(shape+1) for the affected entries",
                      RuntimeWarning, stacklevel=2)
    return np.where(ok, rate / np.maximum(shape - 1.0, np.finfo(float).tiny),
                    rate / (shape + 1.0))


def reconstruct_sigma_fa(state: FaState) -> np.ndarray:
    """Point-estimate covariance: M M^T + diag(E[psi^2])."""
    m = state.load_mean
    return m @ m.T + np.diag(psi_squared_point(state.psi_shape, state.psi_rate))


def reconstruct_sigma_msfa(state: MsfaState, s: int) -> np.ndarray:
    """Point-estimate study covariance: Phi Phi^T + Lambda_s Lambda_s^T + Psi_s."""
    if not 0 <= s < state.n_studies:
        raise DimensionError(f"study index {s} outside 0..{state.n_studies - 1}")
    phi, lam = state.phi_mean, state.lam_mean[s]
    psi2 = psi_squared_point(state.psi_shape[s], state.psi_rate[s])
    return phi @ phi.T + lam @ lam.T + np.diag(psi2)


def rv_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """Matrix similarity in [0, 1]:
    Tr(A B^T B A^T) / sqrt(Tr((A A^T)^2) Tr((B B^T)^2))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"need two equal-shape matrices, got {a.shape} vs {b.shape}")
    aat = a @ a.T
    bbt = b @ b.T
    den = np.sqrt(np.sum(aat * aat) * np.sum(bbt * bbt))
    if den == 0.0:
        raise ValueError("RV coefficient undefined for a zero matrix")
    num = np.sum((b @ a.T) ** 2)
    return float(num / den)


def _gls_scores(a: np.ndarray, psi_sq: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(A^T Psi^-1 A)^-1 A^T Psi^-1 x for x a vector or stacked rows."""
    w = 1.0 / np.asarray(psi_sq, dtype=float)
    aw = a * w[:, None]
    gram = a.T @ aw
    rhs = aw.T @ (x.T if x.ndim == 2 else x)
    rank = np.linalg.matrix_rank(a)
    if rank < a.shape[1]:
        warnings.warn("stacked loading matrix is rank-deficient; using a pseudo-inverse",
                      RuntimeWarning, stacklevel=3)
        sol = np.linalg.pinv(gram) @ rhs
    else:
        ell = chol(gram)
        sol = np.linalg.solve(ell.T, np.linalg.solve(ell, rhs))
    return sol.T if x.ndim == 2 else sol


def bartlett_scores(phi: np.ndarray, lambda_s: np.ndarray, psi_s: np.ndarray,
                    x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint generalized-least-squares score estimates for a new observation.

    Solves on the stacked matrix A = (phi, lambda_s); the first K coordinates
    are the shared scores, the rest the study-specific ones. lambda_s may
    have zero columns, which gives the classical single-block estimator.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    lambda_s = np.asarray(lambda_s, dtype=float)
    if lambda_s.size == 0:
        lambda_s = np.zeros((phi.shape[0], 0))
    lambda_s = np.atleast_2d(lambda_s)
    if phi.shape[0] != lambda_s.shape[0]:
        raise DimensionError("phi and lambda_s must have the same number of rows")
    a = np.hstack([phi, lambda_s])
    if a.shape[1] > a.shape[0]:
        raise DimensionError(f"K+J = {a.shape[1]} score dimensions exceed P = {a.shape[0]}")
    sol = _gls_scores(a, psi_s, np.asarray(x, dtype=float))
    k = phi.shape[1]
    return sol[..., :k], sol[..., k:]


PREDICT_MODES = ("msfa", "stacked", "independent")


def predict(mode: str, state, x_new: np.ndarray, study: int | None = None) -> np.ndarray:
    """Reconstruct observations from Bartlett scores.

    mode "msfa" takes an MsfaState plus a study index and uses both loading
    blocks; "stacked" and "independent" take an FaState (fit on pooled or
    per-study data) and use its single block.
    """
    if mode not in PREDICT_MODES:
        raise ValueError(f"mode must be one of {PREDICT_MODES}, got {mode!r}")
    x_new = np.asarray(x_new, dtype=float)
    if mode == "msfa":
        if not isinstance(state, MsfaState):
            raise TypeError("msfa prediction needs an MsfaState")
        if study is None:
            raise ValueError("msfa prediction needs a study index")
        phi, lam = state.phi_mean, state.lam_mean[study]
        psi2 = psi_squared_point(state.psi_shape[study], state.psi_rate[study])
        f_hat, l_hat = bartlett_scores(phi, lam, psi2, x_new)
        return f_hat @ phi.T + l_hat @ lam.T
    if not isinstance(state, FaState):
        raise TypeError(f"{mode} prediction needs an FaState")
    loadings = state.load_mean
    psi2 = psi_squared_point(state.psi_shape, state.psi_rate)
    scores = _gls_scores(loadings, psi2, x_new)
    return scores @ loadings.T


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean per-observation sum of squared errors (row-sum convention)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean(np.sum((x - x_hat) ** 2, axis=1)))


def near_zero_proportion(loadings_mean: np.ndarray, threshold: float = 0.01) -> np.ndarray:
    """Per-column fraction of loadings with |value| < threshold; the columns
    beyond the effective number of factors should approach 1."""
    m = np.atleast_2d(np.asarray(loadings_mean, dtype=float))
    return np.mean(np.abs(m) < threshold, axis=0)


def export_edges(shared_cov: np.ndarray, threshold: float = 0.5,
                 names=None) -> list[tuple]:
    """Undirected edges (i, j, weight) for |entry| >= threshold, i < j.

    Nodes appear only through their edges, so isolated nodes are omitted by
    construction.
    """
    c = np.asarray(shared_cov, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"need a square matrix, got {c.shape}")
    p = c.shape[0]
    if names is not None and len(names) != p:
        raise DimensionError(f"{len(names)} labels for {p} nodes")
    rows, cols = np.triu_indices(p, k=1)
    keep = np.abs(c[rows, cols]) >= threshold
    edges = []
    for i, j in zip(rows[keep], cols[keep]):
        source = names[i] if names is not None else int(i)
        target = names[j] if names is not None else int(j)
        edges.append((source, target, float(c[i, j])))
    return edges


def node_degrees(edges) -> dict:
    degrees: dict = {}
    for source, target, _ in edges:
        degrees[source] = degrees.get(source, 0) + 1
        degrees[target] = degrees.get(target, 0) + 1
    return degrees
