"""Coordinate-ascent variational inference for multi-study factor analysis.

Sweep order: study-specific loading rows, shared loading rows, noise
precisions, scores (study-specific first, then shared using the refreshed
study-specific means), then the four shrinkage families. Score covariances
have no dependence on i and are computed once per study per sweep.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.special import digamma, gammaln

from .fa_cavi import LOG_2PI, _gamma_entropy, _gaussian_entropies
from .initialize import init_msfa
from .linalg import chol_batch, inv_from_chol_batch, spd_inverse
from .model import (
    Dataset,
    DimensionError,
    FitConfig,
    FitResult,
    GammaFactor,
    GaussianFactor,
    MsfaHyperParams,
    MsfaState,
    MultiStudyDataset,
    mean_squared_difference,
)


# ---------------------------------------------------------------------------
# Expected-moment helpers
# ---------------------------------------------------------------------------

def phi_prior_precisions(state: MsfaState) -> np.ndarray:
    tau = state.expected_tau_shared()
    return (state.omega_shared_shape / state.omega_shared_rate) * tau[None, :]


def lambda_prior_precisions(state: MsfaState, s: int) -> np.ndarray:
    tau = state.expected_tau_specific(s)
    return (state.omega_specific_shape[s] / state.omega_specific_rate[s]) * tau[None, :]


def f_second_moment_sum(state: MsfaState, s: int) -> np.ndarray:
    return state.f_mean[s].T @ state.f_mean[s] + state.f_cov[s].sum(axis=0)


def l_second_moment_sum(state: MsfaState, s: int) -> np.ndarray:
    return state.l_mean[s].T @ state.l_mean[s] + state.l_cov[s].sum(axis=0)


def _check_study(state: MsfaState, s: int) -> None:
    if not 0 <= s < state.n_studies:
        raise DimensionError(f"study index {s} outside 0..{state.n_studies - 1}")


# ---------------------------------------------------------------------------
# Per-index update operations
# ---------------------------------------------------------------------------

def update_lambda_row(state: MsfaState, data: MultiStudyDataset, s: int,
                      p: int) -> GaussianFactor:
    """Study-specific loading row update; the shared part is subtracted
    from the data before projecting on the study-specific scores."""
    _check_study(state, s)
    if not 0 <= p < state.p:
        raise DimensionError(f"row index {p} outside 0..{state.p - 1}")
    e_psi = state.psi_shape[s, p] / state.psi_rate[s, p]
    prec = np.diag(lambda_prior_precisions(state, s)[p]) + e_psi * l_second_moment_sum(state, s)
    cov = spd_inverse(prec)
    resid = data.studies[s].x[:, p] - state.f_mean[s] @ state.phi_mean[p]
    mean = cov @ (e_psi * (resid @ state.l_mean[s]))
    return GaussianFactor(mean, cov)


def update_phi_row(state: MsfaState, data: MultiStudyDataset, p: int) -> GaussianFactor:
    """Shared loading row update, summing moment contributions over studies."""
    if not 0 <= p < state.p:
        raise DimensionError(f"row index {p} outside 0..{state.p - 1}")
    prec = np.diag(phi_prior_precisions(state)[p]).astype(float)
    proj = np.zeros(state.k_star)
    for s in range(state.n_studies):
        e_psi = state.psi_shape[s, p] / state.psi_rate[s, p]
        prec = prec + e_psi * f_second_moment_sum(state, s)
        resid = data.studies[s].x[:, p] - state.l_mean[s] @ state.lam_mean[s][p]
        proj = proj + e_psi * (resid @ state.f_mean[s])
    cov = spd_inverse(prec)
    return GaussianFactor(cov @ proj, cov)


def update_psi_rate_msfa(state: MsfaState, data: MultiStudyDataset, s: int,
                         p: int) -> float:
    _check_study(state, s)
    x_col = data.studies[s].x[:, p]
    phi_p, lam_p = state.phi_mean[p], state.lam_mean[s][p]
    resid = x_col - state.f_mean[s] @ phi_p - state.l_mean[s] @ lam_p
    f_cov_sum = state.f_cov[s].sum(axis=0)
    l_cov_sum = state.l_cov[s].sum(axis=0)
    rss = float(resid @ resid)
    quad_phi = float(phi_p @ f_cov_sum @ phi_p)
    quad_lam = float(lam_p @ l_cov_sum @ lam_p)
    tr_phi = float(np.sum(f_second_moment_sum(state, s) * state.phi_cov[p]))
    tr_lam = float(np.sum(l_second_moment_sum(state, s) * state.lam_cov[s][p]))
    return state.hyper.b_psi + 0.5 * (rss + quad_phi + quad_lam + tr_phi + tr_lam)


def shared_l_covariance(state: MsfaState, s: int) -> np.ndarray:
    e_psi = state.psi_shape[s] / state.psi_rate[s]
    lam = state.lam_mean[s]
    prec = np.eye(state.j_stars[s])
    prec = prec + (lam * e_psi[:, None]).T @ lam
    prec = prec + np.einsum("p,pij->ij", e_psi, state.lam_cov[s])
    return spd_inverse(prec)


def shared_f_covariance(state: MsfaState, s: int) -> np.ndarray:
    e_psi = state.psi_shape[s] / state.psi_rate[s]
    phi = state.phi_mean
    prec = np.eye(state.k_star)
    prec = prec + (phi * e_psi[:, None]).T @ phi
    prec = prec + np.einsum("p,pij->ij", e_psi, state.phi_cov)
    return spd_inverse(prec)


def update_scores_msfa(state: MsfaState, data: MultiStudyDataset, s: int,
                       i: int) -> tuple[GaussianFactor, GaussianFactor]:
    """Block-coordinate score update for observation (s, i): the
    study-specific factor first, then the shared factor using the refreshed
    study-specific mean. Returns (shared f, study-specific l)."""
    _check_study(state, s)
    if not 0 <= i < state.n_per_study[s]:
        raise DimensionError(f"observation {i} outside study {s}")
    x_i = data.studies[s].x[i]
    e_psi = state.psi_shape[s] / state.psi_rate[s]

    l_cov = shared_l_covariance(state, s)
    l_mean = l_cov @ ((state.lam_mean[s] * e_psi[:, None]).T
                      @ (x_i - state.phi_mean @ state.f_mean[s][i]))

    f_cov = shared_f_covariance(state, s)
    f_mean = f_cov @ ((state.phi_mean * e_psi[:, None]).T
                      @ (x_i - state.lam_mean[s] @ l_mean))
    return GaussianFactor(f_mean, f_cov), GaussianFactor(l_mean, l_cov)


def update_shared_shrinkage(state: MsfaState, p: int, k: int) -> GammaFactor:
    if not (0 <= p < state.p and 0 <= k < state.k_star):
        raise DimensionError(f"index ({p}, {k}) outside the shared omega grid")
    nu = 2.0 * state.omega_shared_shape[p, k] - 1.0
    tau_k = state.expected_tau_shared()[k]
    m2 = state.phi_mean[p, k] ** 2 + state.phi_cov[p, k, k]
    return GammaFactor(state.omega_shared_shape[p, k], 0.5 * (nu + tau_k * m2))


def update_specific_shrinkage(state: MsfaState, s: int, p: int, j: int) -> GammaFactor:
    _check_study(state, s)
    if not (0 <= p < state.p and 0 <= j < state.j_stars[s]):
        raise DimensionError(f"index ({p}, {j}) outside study {s}'s omega grid")
    nu = 2.0 * state.omega_specific_shape[s][p, j] - 1.0
    tau_j = state.expected_tau_specific(s)[j]
    m2 = state.lam_mean[s][p, j] ** 2 + state.lam_cov[s][p, j, j]
    return GammaFactor(state.omega_specific_shape[s][p, j], 0.5 * (nu + tau_j * m2))


def _delta_rate(shape, rate, omega_mean, m2, l):
    e_delta = shape / rate
    masked = e_delta.copy()
    masked[l] = 1.0
    loo = np.cumprod(masked)
    weights = np.sum(omega_mean * m2, axis=0)
    return 1.0 + 0.5 * float(np.sum(loo[l:] * weights[l:]))


def update_shared_delta(state: MsfaState, l: int) -> GammaFactor:
    if not 0 <= l < state.k_star:
        raise DimensionError(f"column index {l} outside 0..{state.k_star - 1}")
    m2 = state.phi_mean ** 2 + np.diagonal(state.phi_cov, axis1=1, axis2=2)
    rate = _delta_rate(state.delta_shared_shape, state.delta_shared_rate,
                       state.omega_shared_shape / state.omega_shared_rate, m2, l)
    return GammaFactor(state.delta_shared_shape[l], rate)


def update_specific_delta(state: MsfaState, s: int, l: int) -> GammaFactor:
    _check_study(state, s)
    if not 0 <= l < state.j_stars[s]:
        raise DimensionError(f"column index {l} outside study {s}'s truncation")
    m2 = state.lam_mean[s] ** 2 + np.diagonal(state.lam_cov[s], axis1=1, axis2=2)
    rate = _delta_rate(state.delta_specific_shape[s], state.delta_specific_rate[s],
                       state.omega_specific_shape[s] / state.omega_specific_rate[s], m2, l)
    return GammaFactor(state.delta_specific_shape[s][l], rate)


# ---------------------------------------------------------------------------
# Vectorized sweep
# ---------------------------------------------------------------------------

def _update_lambda_all(state: MsfaState, data: MultiStudyDataset) -> None:
    for s in range(state.n_studies):
        js = state.j_stars[s]
        e_psi = state.psi_shape[s] / state.psi_rate[s]
        second = l_second_moment_sum(state, s)
        prec = e_psi[:, None, None] * second[None, :, :]
        prec[:, np.arange(js), np.arange(js)] += lambda_prior_precisions(state, s)
        state.lam_cov[s] = inv_from_chol_batch(chol_batch(prec))
        resid = data.studies[s].x - state.f_mean[s] @ state.phi_mean.T
        proj = resid.T @ state.l_mean[s]
        state.lam_mean[s] = np.einsum("pij,pj->pi", state.lam_cov[s],
                                      e_psi[:, None] * proj)


def _update_phi_all(state: MsfaState, data: MultiStudyDataset) -> None:
    p, k = state.p, state.k_star
    prec = np.zeros((p, k, k))
    prec[:, np.arange(k), np.arange(k)] = phi_prior_precisions(state)
    proj = np.zeros((p, k))
    for s in range(state.n_studies):
        e_psi = state.psi_shape[s] / state.psi_rate[s]
        second = f_second_moment_sum(state, s)
        prec += e_psi[:, None, None] * second[None, :, :]
        resid = data.studies[s].x - state.l_mean[s] @ state.lam_mean[s].T
        proj += e_psi[:, None] * (resid.T @ state.f_mean[s])
    state.phi_cov = inv_from_chol_batch(chol_batch(prec))
    state.phi_mean = np.einsum("pij,pj->pi", state.phi_cov, proj)


def _expected_residual_sums_study(state: MsfaState, data: MultiStudyDataset,
                                  s: int) -> np.ndarray:
    """(P,) vector of sum_i E[(x_sip - Phi_p^T f_si - Lambda_sp^T l_si)^2]."""
    x = data.studies[s].x
    resid = x - state.f_mean[s] @ state.phi_mean.T - state.l_mean[s] @ state.lam_mean[s].T
    rss = np.sum(resid * resid, axis=0)
    f_cov_sum = state.f_cov[s].sum(axis=0)
    l_cov_sum = state.l_cov[s].sum(axis=0)
    quad_phi = np.einsum("pi,ij,pj->p", state.phi_mean, f_cov_sum, state.phi_mean)
    quad_lam = np.einsum("pi,ij,pj->p", state.lam_mean[s], l_cov_sum, state.lam_mean[s])
    tr_phi = np.einsum("ij,pij->p", f_second_moment_sum(state, s), state.phi_cov)
    tr_lam = np.einsum("ij,pij->p", l_second_moment_sum(state, s), state.lam_cov[s])
    return rss + quad_phi + quad_lam + tr_phi + tr_lam


def _update_psi_all(state: MsfaState, data: MultiStudyDataset) -> None:
    for s in range(state.n_studies):
        state.psi_rate[s] = (state.hyper.b_psi
                             + 0.5 * _expected_residual_sums_study(state, data, s))


def _update_scores_all(state: MsfaState, data: MultiStudyDataset) -> None:
    for s in range(state.n_studies):
        x = data.studies[s].x
        ns = state.n_per_study[s]
        e_psi = state.psi_shape[s] / state.psi_rate[s]
        l_cov = shared_l_covariance(state, s)
        state.l_mean[s] = ((x - state.f_mean[s] @ state.phi_mean.T)
                           @ (state.lam_mean[s] * e_psi[:, None]) @ l_cov)
        state.l_cov[s] = np.broadcast_to(l_cov, (ns, *l_cov.shape)).copy()
        f_cov = shared_f_covariance(state, s)
        state.f_mean[s] = ((x - state.l_mean[s] @ state.lam_mean[s].T)
                           @ (state.phi_mean * e_psi[:, None]) @ f_cov)
        state.f_cov[s] = np.broadcast_to(f_cov, (ns, *f_cov.shape)).copy()


def _update_shrinkage_all(state: MsfaState) -> None:
    """Coordinate updates for all omega/delta families given current loadings."""
    h = state.hyper
    m2_phi = state.phi_mean ** 2 + np.diagonal(state.phi_cov, axis1=1, axis2=2)
    tau = state.expected_tau_shared()
    state.omega_shared_rate = 0.5 * (h.shared.nu + tau[None, :] * m2_phi)

    m2_lam = []
    for s in range(state.n_studies):
        m2 = state.lam_mean[s] ** 2 + np.diagonal(state.lam_cov[s], axis1=1, axis2=2)
        m2_lam.append(m2)
        tau_s = state.expected_tau_specific(s)
        state.omega_specific_rate[s] = 0.5 * (h.per_study[s].nu + tau_s[None, :] * m2)

    weights = np.sum((state.omega_shared_shape / state.omega_shared_rate) * m2_phi, axis=0)
    e_delta = state.delta_shared_shape / state.delta_shared_rate
    for l in range(state.k_star):
        masked = e_delta.copy()
        masked[l] = 1.0
        loo = np.cumprod(masked)
        state.delta_shared_rate[l] = 1.0 + 0.5 * float(np.sum(loo[l:] * weights[l:]))
        e_delta[l] = state.delta_shared_shape[l] / state.delta_shared_rate[l]

    for s in range(state.n_studies):
        weights = np.sum(
            (state.omega_specific_shape[s] / state.omega_specific_rate[s]) * m2_lam[s],
            axis=0)
        e_delta = state.delta_specific_shape[s] / state.delta_specific_rate[s]
        for l in range(state.j_stars[s]):
            masked = e_delta.copy()
            masked[l] = 1.0
            loo = np.cumprod(masked)
            state.delta_specific_rate[s][l] = 1.0 + 0.5 * float(
                np.sum(loo[l:] * weights[l:]))
            e_delta[l] = state.delta_specific_shape[s][l] / state.delta_specific_rate[s][l]


def _sweep(state: MsfaState, data: MultiStudyDataset) -> None:
    _update_lambda_all(state, data)
    _update_phi_all(state, data)
    _update_psi_all(state, data)
    _update_scores_all(state, data)
    _update_shrinkage_all(state)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def _loading_block_terms(mean, cov, omega_shape, omega_rate, delta_shape,
                         delta_rate, block):
    """Expected log prior of one loading matrix plus its omega/delta priors."""
    e_omega = omega_shape / omega_rate
    e_log_omega = digamma(omega_shape) - np.log(omega_rate)
    e_delta = delta_shape / delta_rate
    e_log_delta = digamma(delta_shape) - np.log(delta_rate)
    tau = np.cumprod(e_delta)
    cum_log_delta = np.cumsum(e_log_delta)
    m2 = mean ** 2 + np.diagonal(cov, axis1=1, axis2=2)

    loading_prior = float(np.sum(
        -0.5 * LOG_2PI + 0.5 * (e_log_omega + cum_log_delta[None, :])
        - 0.5 * e_omega * tau[None, :] * m2))

    half_nu = 0.5 * block.nu
    omega_prior = float(np.sum(half_nu * np.log(half_nu) - gammaln(half_nu)
                               + (half_nu - 1.0) * e_log_omega - half_nu * e_omega))

    a_l = block.delta_prior_shapes()
    delta_prior = float(np.sum(-gammaln(a_l) + (a_l - 1.0) * e_log_delta - e_delta))

    entropy = (np.sum(_gaussian_entropies(cov))
               + np.sum(_gamma_entropy(omega_shape, omega_rate))
               + np.sum(_gamma_entropy(delta_shape, delta_rate)))
    return loading_prior + omega_prior + delta_prior + entropy


def _score_block_terms(mean, cov):
    n, d = mean.shape
    sq = np.sum(mean ** 2) + np.einsum("iaa->", cov)
    prior = -0.5 * n * d * LOG_2PI - 0.5 * sq
    return prior + float(np.sum(_gaussian_entropies(cov)))


def elbo_msfa(state: MsfaState, data: MultiStudyDataset) -> float:
    """Closed-form ELBO for the multi-study mean-field family."""
    h = state.hyper
    total = _loading_block_terms(state.phi_mean, state.phi_cov,
                                 state.omega_shared_shape, state.omega_shared_rate,
                                 state.delta_shared_shape, state.delta_shared_rate,
                                 h.shared)
    for s in range(state.n_studies):
        n_s, p = state.n_per_study[s], state.p
        e_psi = state.psi_shape[s] / state.psi_rate[s]
        e_log_psi = digamma(state.psi_shape[s]) - np.log(state.psi_rate[s])

        total += (-0.5 * n_s * p * LOG_2PI + 0.5 * n_s * np.sum(e_log_psi)
                  - 0.5 * float(e_psi @ _expected_residual_sums_study(state, data, s)))
        total += _score_block_terms(state.f_mean[s], state.f_cov[s])
        total += _score_block_terms(state.l_mean[s], state.l_cov[s])
        total += _loading_block_terms(state.lam_mean[s], state.lam_cov[s],
                                      state.omega_specific_shape[s],
                                      state.omega_specific_rate[s],
                                      state.delta_specific_shape[s],
                                      state.delta_specific_rate[s],
                                      h.per_study[s])
        total += float(np.sum(h.a_psi * np.log(h.b_psi) - gammaln(h.a_psi)
                              + (h.a_psi - 1.0) * e_log_psi - h.b_psi * e_psi))
        total += float(np.sum(_gamma_entropy(state.psi_shape[s], state.psi_rate[s])))

    if not np.isfinite(total):
        raise FloatingPointError("MSFA ELBO evaluated to a non-finite value")
    return float(total)


# ---------------------------------------------------------------------------
# Fit driver
# ---------------------------------------------------------------------------

def _monitored_cavi(state: MsfaState) -> np.ndarray:
    parts = [state.phi_mean.ravel()]
    parts += [m.ravel() for m in state.lam_mean]
    parts += [m.ravel() for m in state.f_mean]
    parts += [m.ravel() for m in state.l_mean]
    return np.concatenate(parts)


def fit_msfa_cavi(data: MultiStudyDataset, hyper: MsfaHyperParams,
                  config: FitConfig | None = None) -> FitResult:
    config = config or FitConfig()
    start = time.perf_counter()
    state = init_msfa(data, hyper, seed=config.seed)
    state.validate(data)

    trace, elbo_trace = [], [] if config.track_elbo else None
    previous = _monitored_cavi(state)
    converged = False
    for _ in range(config.resolved_max_iter()):
        _sweep(state, data)
        current = _monitored_cavi(state)
        trace.append(mean_squared_difference(current, previous))
        previous = current
        if config.track_elbo:
            elbo_trace.append(elbo_msfa(state, data))
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
