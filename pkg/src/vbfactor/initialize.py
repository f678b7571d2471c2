"""Informative initial states from sparse principal components analysis.

The SPCA here is a truncated SVD followed by alternating soft-thresholding of
the loadings and symmetric re-orthonormalization of the scores, so the
returned score matrix always satisfies (1/N) S^T S = I exactly. Any SPCA
meeting that contract would do; the default sparsity target is 0, which is
the plain truncated-SVD path.

All fixed gamma shapes depend only on (P, N_s, truncations, hyperparameters).
The covariance initializations are evaluated at the prior moments of the
omega/delta families (E[omega]=1 and E[delta_l]=a_l), i.e. before the shapes
are pinned to their iteration-independent optima.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import spd_inverse
from .model import (
    Dataset,
    DimensionError,
    FaHyperParams,
    FaState,
    MsfaHyperParams,
    MsfaState,
    MultiStudyDataset,
    PreconditionError,
    ShrinkagePrior,
)

PSI_FLOOR = 1e-6          # residual variances can go negative in finite samples
PSI_FLOOR_FRACTION = 0.05  # and are also floored at this share of the marginal variance
PINV_RCOND = 1e-10        # singular values below 1e-10 * sigma_max treated as zero
MAX_REFINE_ITERS = 100
# The printed initializations disagree about the delta factors: prior shapes
# with unit rates imply initial shrinkage weights near the prior means, while
# pinned optimal shapes with unit rates imply weights two orders of magnitude
# larger. The first leaves spurious trailing columns alive, the second can
# crush true factors before their first refresh. Starting the means at a
# small multiple of the prior means sits in the wide stable band between the
# two regimes.
DELTA_INIT_MULTIPLIER = 5.0


@dataclass
class SparsePcaResult:
    """Approximate factorization x ~= scores @ loadings.T with whitened scores."""

    loadings: np.ndarray   # (P, d)
    scores: np.ndarray     # (N, d)


def _soft_threshold_to_target(loadings, sparsity):
    th = np.quantile(np.abs(loadings), sparsity, method="higher")
    return np.sign(loadings) * np.maximum(np.abs(loadings) - th, 0.0)


def _orthonormalize(t):
    # Symmetric (polar) orthonormalization; keeps columns aligned with t's.
    u, _, vt = np.linalg.svd(t, full_matrices=False)
    return u @ vt


def _top_left_vectors(x, d):
    """Leading d left singular vectors via the smaller-side Gram matrix,
    falling back to a dense SVD when the spectrum is degenerate."""
    n, p = x.shape
    try:
        if p <= n:
            w, vv = np.linalg.eigh(x.T @ x)
            s2 = w[::-1][:d]
            if s2[0] <= 0.0 or s2[-1] <= 1e-10 * s2[0]:
                raise np.linalg.LinAlgError
            u = x @ (vv[:, ::-1][:, :d] / np.sqrt(s2))
        else:
            w, uu = np.linalg.eigh(x @ x.T)
            s2 = w[::-1][:d]
            if s2[0] <= 0.0 or s2[-1] <= 1e-10 * s2[0]:
                raise np.linalg.LinAlgError
            u = uu[:, ::-1][:, :d]
    except np.linalg.LinAlgError:
        u = np.linalg.svd(x, full_matrices=False)[0][:, :d]
    return _orthonormalize(u)


def sparse_pca(x, d: int, sparsity: float = 0.0, seed=None) -> SparsePcaResult:
    """Rank-d sparse factorization with scores scaled to unit sample variance.

    The result is deterministic for fixed inputs; `seed` is accepted for
    interface stability but the algorithm draws no random numbers.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    if not 1 <= d <= min(n, p):
        raise DimensionError(f"rank d={d} must lie in 1..min(N,P)={min(n, p)}")
    if not np.all(np.isfinite(x)):
        raise PreconditionError("sparse_pca input contains NaN or Inf")
    if not 0.0 <= sparsity < 1.0:
        raise DimensionError(f"sparsity target must lie in [0, 1), got {sparsity}")

    scores = np.sqrt(n) * _top_left_vectors(x, d)
    loadings = x.T @ scores / n
    signs = np.sign(loadings[np.argmax(np.abs(loadings), axis=0), np.arange(d)])
    signs[signs == 0] = 1.0
    scores *= signs
    loadings *= signs

    if sparsity > 0.0:
        for _ in range(MAX_REFINE_ITERS):
            prev = loadings
            loadings = _soft_threshold_to_target(x.T @ scores / n, sparsity)
            t = x @ loadings
            if np.linalg.norm(t) > 1e-12:
                scores = np.sqrt(n) * _orthonormalize(t)
            if np.max(np.abs(loadings - prev)) < 1e-10:
                break
        loadings = _soft_threshold_to_target(x.T @ scores / n, sparsity)

    return SparsePcaResult(loadings=loadings, scores=scores)


def _prior_precision_diag(block: ShrinkagePrior) -> np.ndarray:
    # E[omega] = 1 under the prior, E[delta_l] = a_l, so the column precisions
    # are the cumulative products of the prior delta shapes.
    return np.cumprod(block.delta_prior_shapes())


def _residual_variances(x, *loading_blocks):
    """Per-variable residual variance diag((1/N) X^T X - sum_b B B^T).

    The subtraction can overshoot in finite samples (the loading blocks are
    fit on pooled/projected data), so the result is floored: an absolute
    floor keeps every gamma rate positive, and a relative floor (a small
    share of the marginal variance) keeps the implied noise precisions from
    degenerating, which would poison the first stochastic blends.
    """
    marginal = np.mean(x * x, axis=0)
    explained = sum(np.sum(b * b, axis=1) for b in loading_blocks)
    return np.maximum(marginal - explained,
                      np.maximum(PSI_FLOOR, PSI_FLOOR_FRACTION * marginal))


def _shared_score_cov(load_mean, load_cov, e_psi):
    prec = np.eye(load_mean.shape[1])
    prec = prec + (load_mean * e_psi[:, None]).T @ load_mean
    prec = prec + np.einsum("p,pij->ij", e_psi, load_cov)
    return spd_inverse(prec)


def init_fa(data: Dataset, hyper: FaHyperParams, seed=None,
            sparsity: float = 0.0) -> FaState:
    """Initial FA state: SPCA means, residual psi rates, prior-shaped shrinkage."""
    if not data.centered:
        raise PreconditionError("init_fa requires centered data")
    n, p, j = data.n, data.p, hyper.j_star

    spca = sparse_pca(data.x, j, sparsity=sparsity, seed=seed)
    load_mean = spca.loadings
    score_mean = spca.scores

    psi_shape = np.full(p, hyper.a_psi + 0.5 * n)
    psi_rate = psi_shape * _residual_variances(data.x, load_mean)

    omega_shape = np.full((p, j), 0.5 * (hyper.nu + 1.0))
    omega_rate = np.full((p, j), 0.5 * hyper.nu)
    # Shapes are pinned to their iteration-independent optima; rates are set
    # so the implied means start at DELTA_INIT_MULTIPLIER times the prior
    # means a_l (see the note above the constant).
    delta_shape = hyper.shrinkage().fixed_delta_shapes(p)
    delta_rate = delta_shape / (DELTA_INIT_MULTIPLIER
                                * hyper.shrinkage().delta_prior_shapes())

    prior_prec = _prior_precision_diag(hyper.shrinkage())
    load_cov = np.broadcast_to(np.diag(1.0 / prior_prec), (p, j, j)).copy()

    e_psi = psi_shape / psi_rate
    score_cov_shared = _shared_score_cov(load_mean, load_cov, e_psi)
    score_cov = np.broadcast_to(score_cov_shared, (n, j, j)).copy()

    return FaState(
        hyper=hyper,
        load_mean=load_mean, load_cov=load_cov,
        score_mean=score_mean, score_cov=score_cov,
        psi_shape=psi_shape, psi_rate=psi_rate,
        omega_shape=omega_shape, omega_rate=omega_rate,
        delta_shape=delta_shape, delta_rate=delta_rate,
    )


def shared_span_residual(x, phi) -> np.ndarray:
    """Project out the shared-loading column span: x (I - phi phi^+)."""
    gram_pinv = np.linalg.pinv(phi.T @ phi, rcond=PINV_RCOND)
    return x - (x @ phi) @ gram_pinv @ phi.T


def init_msfa(data: MultiStudyDataset, hyper: MsfaHyperParams, seed=None,
              sparsity: float = 0.0) -> MsfaState:
    """Initial MSFA state: SPCA on the stacked matrix for the shared block,
    then SPCA on per-study residuals for the specific blocks."""
    for s, d in enumerate(data.studies):
        if not d.centered:
            raise PreconditionError(f"init_msfa requires centered data (study {s})")
    if hyper.n_studies != data.n_studies:
        raise DimensionError(
            f"hyper lists {hyper.n_studies} studies, data has {data.n_studies}")
    p, k = data.p, hyper.k_star

    z = np.vstack([d.x for d in data.studies])
    shared = sparse_pca(z, k, sparsity=sparsity, seed=seed)
    phi_mean = shared.loadings
    offsets = np.cumsum([0, *data.n_per_study])
    f_mean = [shared.scores[offsets[s]:offsets[s + 1]] for s in range(data.n_studies)]

    lam_mean, l_mean, psi_rate_rows = [], [], []
    for s, d in enumerate(data.studies):
        resid = shared_span_residual(d.x, phi_mean)
        study = sparse_pca(resid, hyper.j_stars[s], sparsity=sparsity, seed=seed)
        lam_mean.append(study.loadings)
        l_mean.append(study.scores)
        psi_rate_rows.append(_residual_variances(d.x, phi_mean, study.loadings))

    psi_shape = np.stack([np.full(p, hyper.a_psi + 0.5 * n) for n in data.n_per_study])
    psi_rate = psi_shape * np.stack(psi_rate_rows)

    omega_shared_shape = np.full((p, k), 0.5 * (hyper.shared.nu + 1.0))
    omega_shared_rate = np.full((p, k), 0.5 * hyper.shared.nu)
    # Same convention as init_fa: pinned shapes, means at a small multiple
    # of the prior means.
    delta_shared_shape = hyper.shared.fixed_delta_shapes(p)
    delta_shared_rate = delta_shared_shape / (DELTA_INIT_MULTIPLIER
                                              * hyper.shared.delta_prior_shapes())

    omega_specific_shape = [np.full((p, b.truncation), 0.5 * (b.nu + 1.0))
                            for b in hyper.per_study]
    omega_specific_rate = [np.full((p, b.truncation), 0.5 * b.nu)
                           for b in hyper.per_study]
    delta_specific_shape = [b.fixed_delta_shapes(p) for b in hyper.per_study]
    delta_specific_rate = [b.fixed_delta_shapes(p)
                           / (DELTA_INIT_MULTIPLIER * b.delta_prior_shapes())
                           for b in hyper.per_study]

    phi_prior = _prior_precision_diag(hyper.shared)
    phi_cov = np.broadcast_to(np.diag(1.0 / phi_prior), (p, k, k)).copy()
    lam_cov = []
    for s, block in enumerate(hyper.per_study):
        js = block.truncation
        lam_cov.append(np.broadcast_to(
            np.diag(1.0 / _prior_precision_diag(block)), (p, js, js)).copy())

    f_cov, l_cov = [], []
    for s in range(data.n_studies):
        e_psi = psi_shape[s] / psi_rate[s]
        ns, js = data.n_per_study[s], hyper.j_stars[s]
        f_shared = _shared_score_cov(phi_mean, phi_cov, e_psi)
        l_shared = _shared_score_cov(lam_mean[s], lam_cov[s], e_psi)
        f_cov.append(np.broadcast_to(f_shared, (ns, k, k)).copy())
        l_cov.append(np.broadcast_to(l_shared, (ns, js, js)).copy())

    return MsfaState(
        hyper=hyper,
        phi_mean=phi_mean, phi_cov=phi_cov,
        lam_mean=lam_mean, lam_cov=lam_cov,
        f_mean=f_mean, f_cov=f_cov, l_mean=l_mean, l_cov=l_cov,
        psi_shape=psi_shape, psi_rate=psi_rate,
        omega_shared_shape=omega_shared_shape, omega_shared_rate=omega_shared_rate,
        delta_shared_shape=delta_shared_shape, delta_shared_rate=delta_shared_rate,
        omega_specific_shape=omega_specific_shape,
        omega_specific_rate=omega_specific_rate,
        delta_specific_shape=delta_specific_shape,
        delta_specific_rate=delta_specific_rate,
    )
