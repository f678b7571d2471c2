"""Coordinate-ascent variational inference for single-study factor analysis.

One sweep updates, in order: loading rows, noise precisions, scores, local
shrinkage, global shrinkage. The per-index operations are the unit of testing;
the fit driver applies the same closed forms vectorized over rows (the score
covariance has no dependence on i and is computed once per sweep).
"""

from __future__ import annotations

import time

import numpy as np
from scipy.special import digamma, gammaln

from .initialize import init_fa
from .linalg import chol_batch, inv_from_chol_batch, logdet_from_chol, spd_inverse
from .model import (
    Dataset,
    DimensionError,
    FaHyperParams,
    FaState,
    FitConfig,
    FitResult,
    GammaFactor,
    GaussianFactor,
    mean_squared_difference,
)

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Expected-moment helpers
# ---------------------------------------------------------------------------

def loading_prior_precisions(state: FaState) -> np.ndarray:
    """(P, J) diagonal prior precisions E[omega_pj] * E[tau_j]."""
    tau = state.expected_tau_vector()
    return (state.omega_shape / state.omega_rate) * tau[None, :]


def score_second_moment_sum(state: FaState) -> np.ndarray:
    """sum_i (mu_i mu_i^T + Sigma_i), a (J, J) matrix."""
    return state.score_mean.T @ state.score_mean + state.score_cov.sum(axis=0)


def loading_second_moments(state: FaState) -> np.ndarray:
    """(P, J) matrix of E[lambda_pj^2] = mu_pj^2 + Sigma_p[j, j]."""
    return state.load_mean ** 2 + np.diagonal(state.load_cov, axis1=1, axis2=2)


# ---------------------------------------------------------------------------
# Per-index update operations
# ---------------------------------------------------------------------------

def update_loadings_row(state: FaState, data: Dataset, p: int) -> GaussianFactor:
    """Closed-form optimal factor for loading row p given current moments."""
    if not 0 <= p < state.p:
        raise DimensionError(f"row index {p} outside 0..{state.p - 1}")
    e_psi = state.psi_shape[p] / state.psi_rate[p]
    prec = np.diag(loading_prior_precisions(state)[p]) + e_psi * score_second_moment_sum(state)
    cov = spd_inverse(prec)
    mean = cov @ (e_psi * (data.x[:, p] @ state.score_mean))
    return GaussianFactor(mean, cov)


def update_psi_rate(state: FaState, data: Dataset, p: int) -> float:
    """New rate of q(psi_p^-2): prior rate plus half the expected residual."""
    if not 0 <= p < state.p:
        raise DimensionError(f"row index {p} outside 0..{state.p - 1}")
    mu_p, cov_p = state.load_mean[p], state.load_cov[p]
    resid = data.x[:, p] - state.score_mean @ mu_p
    cov_sum = state.score_cov.sum(axis=0)
    second = state.score_mean.T @ state.score_mean + cov_sum
    rss = float(resid @ resid)
    trace = float(np.sum(second * cov_p))
    quad = float(mu_p @ cov_sum @ mu_p)
    return state.hyper.b_psi + 0.5 * (rss + trace + quad)


def update_scores(state: FaState, data: Dataset, i: int) -> GaussianFactor:
    """Closed-form score factor for observation i; covariance is i-free."""
    if not 0 <= i < state.n:
        raise DimensionError(f"observation index {i} outside 0..{state.n - 1}")
    cov = shared_score_covariance(state)
    e_psi = state.psi_shape / state.psi_rate
    mean = cov @ ((state.load_mean * e_psi[:, None]).T @ data.x[i])
    return GaussianFactor(mean, cov)


def shared_score_covariance(state: FaState) -> np.ndarray:
    """The common Sigma^l = (I + sum_p E[psi_p^-2] E[Lambda_p Lambda_p^T])^-1."""
    e_psi = state.psi_shape / state.psi_rate
    prec = np.eye(state.j_star)
    prec = prec + (state.load_mean * e_psi[:, None]).T @ state.load_mean
    prec = prec + np.einsum("p,pij->ij", e_psi, state.load_cov)
    return spd_inverse(prec)


def update_local_shrinkage(state: FaState, p: int, j: int) -> GammaFactor:
    """New q(omega_pj): fixed shape, rate (nu + E[tau_j] E[lambda_pj^2]) / 2."""
    if not (0 <= p < state.p and 0 <= j < state.j_star):
        raise DimensionError(f"index ({p}, {j}) outside the omega grid")
    nu = 2.0 * state.omega_shape[p, j] - 1.0  # shape is (nu+1)/2
    tau_j = state.expected_tau_vector()[j]
    m2 = state.load_mean[p, j] ** 2 + state.load_cov[p, j, j]
    return GammaFactor(state.omega_shape[p, j], 0.5 * (nu + tau_j * m2))


def update_global_shrinkage(state: FaState, l: int) -> GammaFactor:
    """New q(delta_l): fixed shape, rate with the leave-one-out tau products."""
    if not 0 <= l < state.j_star:
        raise DimensionError(f"column index {l} outside 0..{state.j_star - 1}")
    e_delta = state.delta_shape / state.delta_rate
    masked = e_delta.copy()
    masked[l] = 1.0
    leave_one_out = np.cumprod(masked)
    weights = np.sum((state.omega_shape / state.omega_rate) * loading_second_moments(state),
                     axis=0)
    rate = 1.0 + 0.5 * float(np.sum(leave_one_out[l:] * weights[l:]))
    return GammaFactor(state.delta_shape[l], rate)


# ---------------------------------------------------------------------------
# Vectorized sweep
# ---------------------------------------------------------------------------

def _sweep(state: FaState, data: Dataset) -> None:
    n, p, j = state.n, state.p, state.j_star
    x = data.x

    # Loading rows, all p at once.
    e_psi = state.psi_shape / state.psi_rate
    second = score_second_moment_sum(state)
    prec = e_psi[:, None, None] * second[None, :, :]
    prec[:, np.arange(j), np.arange(j)] += loading_prior_precisions(state)
    ell = chol_batch(prec)
    state.load_cov = inv_from_chol_batch(ell)
    proj = x.T @ state.score_mean               # (P, J)
    state.load_mean = np.einsum("pij,pj->pi", state.load_cov, e_psi[:, None] * proj)

    # Noise precisions (new loadings, pre-sweep scores).
    resid = x - state.score_mean @ state.load_mean.T
    rss = np.sum(resid * resid, axis=0)
    cov_sum = state.score_cov.sum(axis=0)
    traces = np.einsum("ij,pij->p", second, state.load_cov)
    quads = np.einsum("pi,ij,pj->p", state.load_mean, cov_sum, state.load_mean)
    state.psi_rate = state.hyper.b_psi + 0.5 * (rss + traces + quads)

    # Scores: one shared covariance, means by a single product chain.
    score_cov = shared_score_covariance(state)
    e_psi = state.psi_shape / state.psi_rate
    state.score_mean = x @ (state.load_mean * e_psi[:, None]) @ score_cov
    state.score_cov = np.broadcast_to(score_cov, (n, j, j)).copy()

    _update_shrinkage_families(state)


def _update_shrinkage_families(state: FaState) -> None:
    """CAVI updates for the omega and delta families given current loadings."""
    nu = state.hyper.nu
    m2 = loading_second_moments(state)
    tau = state.expected_tau_vector()
    state.omega_rate = 0.5 * (nu + tau[None, :] * m2)

    weights = np.sum((state.omega_shape / state.omega_rate) * m2, axis=0)
    e_delta = state.delta_shape / state.delta_rate
    for l in range(state.j_star):
        masked = e_delta.copy()
        masked[l] = 1.0
        loo = np.cumprod(masked)
        state.delta_rate[l] = 1.0 + 0.5 * float(np.sum(loo[l:] * weights[l:]))
        e_delta[l] = state.delta_shape[l] / state.delta_rate[l]


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def _gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def _gaussian_entropies(cov_stack):
    d = cov_stack.shape[-1]
    logdets = logdet_from_chol(chol_batch(cov_stack))
    return 0.5 * d * (1.0 + LOG_2PI) + 0.5 * logdets


def expected_residual_sums(state: FaState, data: Dataset) -> np.ndarray:
    """(P,) vector of sum_i E[(x_ip - Lambda_p^T l_i)^2]."""
    resid = data.x - state.score_mean @ state.load_mean.T
    rss = np.sum(resid * resid, axis=0)
    cov_sum = state.score_cov.sum(axis=0)
    second = state.score_mean.T @ state.score_mean + cov_sum
    traces = np.einsum("ij,pij->p", second, state.load_cov)
    quads = np.einsum("pi,ij,pj->p", state.load_mean, cov_sum, state.load_mean)
    return rss + traces + quads


def elbo_fa(state: FaState, data: Dataset) -> float:
    """Closed-form evidence lower bound E_q[log p(theta, X)] - E_q[log q]."""
    h = state.hyper
    n, p, j = state.n, state.p, state.j_star

    e_psi = state.psi_shape / state.psi_rate
    e_log_psi = digamma(state.psi_shape) - np.log(state.psi_rate)
    e_omega = state.omega_shape / state.omega_rate
    e_log_omega = digamma(state.omega_shape) - np.log(state.omega_rate)
    e_delta = state.delta_shape / state.delta_rate
    e_log_delta = digamma(state.delta_shape) - np.log(state.delta_rate)
    tau = np.cumprod(e_delta)
    cum_log_delta = np.cumsum(e_log_delta)
    m2 = loading_second_moments(state)

    lik = (-0.5 * n * p * LOG_2PI + 0.5 * n * np.sum(e_log_psi)
           - 0.5 * float(e_psi @ expected_residual_sums(state, data)))

    score_sq = np.sum(state.score_mean ** 2) + np.einsum("iaa->", state.score_cov)
    scores_prior = -0.5 * n * j * LOG_2PI - 0.5 * score_sq

    loadings_prior = float(np.sum(
        -0.5 * LOG_2PI + 0.5 * (e_log_omega + cum_log_delta[None, :])
        - 0.5 * e_omega * tau[None, :] * m2))

    half_nu = 0.5 * h.nu
    omega_prior = float(np.sum(half_nu * np.log(half_nu) - gammaln(half_nu)
                               + (half_nu - 1.0) * e_log_omega - half_nu * e_omega))

    a_l = h.shrinkage().delta_prior_shapes()
    delta_prior = float(np.sum(-gammaln(a_l) + (a_l - 1.0) * e_log_delta - e_delta))

    psi_prior = float(np.sum(h.a_psi * np.log(h.b_psi) - gammaln(h.a_psi)
                             + (h.a_psi - 1.0) * e_log_psi - h.b_psi * e_psi))

    entropy = (np.sum(_gaussian_entropies(state.load_cov))
               + np.sum(_gaussian_entropies(state.score_cov))
               + np.sum(_gamma_entropy(state.omega_shape, state.omega_rate))
               + np.sum(_gamma_entropy(state.delta_shape, state.delta_rate))
               + np.sum(_gamma_entropy(state.psi_shape, state.psi_rate)))

    value = lik + scores_prior + loadings_prior + omega_prior + delta_prior + psi_prior + entropy
    if not np.isfinite(value):
        raise FloatingPointError("ELBO evaluated to a non-finite value")
    return float(value)


# ---------------------------------------------------------------------------
# Fit driver
# ---------------------------------------------------------------------------

def fit_fa_cavi(data: Dataset, hyper: FaHyperParams,
                config: FitConfig | None = None) -> FitResult:
    """Run CAVI sweeps until the mean squared change of all Gaussian means
    falls below tol, or max_iter is hit (non-convergence is not an error)."""
    config = config or FitConfig()
    start = time.perf_counter()
    state = init_fa(data, hyper, seed=config.seed)
    state.validate(data)

    def monitored(st):
        return np.concatenate([st.load_mean.ravel(), st.score_mean.ravel()])

    trace, elbo_trace = [], [] if config.track_elbo else None
    previous = monitored(state)
    converged = False
    for _ in range(config.resolved_max_iter()):
        _sweep(state, data)
        current = monitored(state)
        trace.append(mean_squared_difference(current, previous))
        previous = current
        if config.track_elbo:
            elbo_trace.append(elbo_fa(state, data))
        if trace[-1] <= config.tol:
            converged = True
            break

    return FitResult(
        state=state,
        iterations=len(trace),
        converged=converged,
        trace=np.asarray(trace),
        elbo_trace=None if elbo_trace is None else np.asarray(elbo_trace),
        elapsed_seconds=time.perf_counter() - start,
    )
