"""Stochastic variational inference for multi-study factor analysis.

Per-study minibatches are drawn from independent streams keyed by
(seed, study, iteration), so study order never changes the draws. All of a
study's minibatch contributions enter the shared-loading naturals through a
single summed estimate that is blended once per iteration.
"""

from __future__ import annotations

import time

import numpy as np

from .fa_svi import minibatch_indices, step_size
from .initialize import init_msfa
from .linalg import chol_batch, inv_from_chol_batch, symmetrize
from .model import (
    ConfigError,
    FitConfig,
    FitResult,
    MsfaHyperParams,
    MsfaState,
    MultiStudyDataset,
    NumericalError,
    mean_squared_difference,
)
from .msfa_cavi import (
    _update_shrinkage_all,
    elbo_msfa,
    lambda_prior_precisions,
    phi_prior_precisions,
    shared_f_covariance,
    shared_l_covariance,
)


def study_rng(seed: int, s: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(s, t)))


def _refresh_local(state: MsfaState, data: MultiStudyDataset, s: int,
                   idx: np.ndarray) -> None:
    """Score factors for the sampled rows of study s (l first, then f)."""
    x = data.studies[s].x[idx]
    e_psi = state.psi_shape[s] / state.psi_rate[s]
    l_cov = shared_l_covariance(state, s)
    state.l_mean[s][idx] = ((x - state.f_mean[s][idx] @ state.phi_mean.T)
                            @ (state.lam_mean[s] * e_psi[:, None]) @ l_cov)
    state.l_cov[s][idx] = l_cov
    f_cov = shared_f_covariance(state, s)
    state.f_mean[s][idx] = ((x - state.l_mean[s][idx] @ state.lam_mean[s].T)
                            @ (state.phi_mean * e_psi[:, None]) @ f_cov)
    state.f_cov[s][idx] = f_cov


def lambda_naturals(state: MsfaState, data: MultiStudyDataset, s: int,
                    idx: np.ndarray, weight: float) -> tuple[np.ndarray, np.ndarray]:
    """Noisy (eta1, eta2) for study s's loading rows from its minibatch."""
    js = state.j_stars[s]
    e_psi = state.psi_shape[s] / state.psi_rate[s]
    mu_l = state.l_mean[s][idx]
    second = mu_l.T @ mu_l + state.l_cov[s][idx].sum(axis=0)
    eta1 = (weight * e_psi)[:, None, None] * second[None, :, :]
    eta1[:, np.arange(js), np.arange(js)] += lambda_prior_precisions(state, s)
    resid = data.studies[s].x[idx] - state.f_mean[s][idx] @ state.phi_mean.T
    eta2 = (weight * e_psi)[:, None] * (resid.T @ mu_l)
    return eta1, eta2


def phi_naturals(state: MsfaState, data: MultiStudyDataset,
                 batches: list[np.ndarray], weights: list[float]
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Noisy (eta1, eta2) for the shared loading rows, summed over studies."""
    p, k = state.p, state.k_star
    eta1 = np.zeros((p, k, k))
    eta1[:, np.arange(k), np.arange(k)] = phi_prior_precisions(state)
    eta2 = np.zeros((p, k))
    for s, (idx, weight) in enumerate(zip(batches, weights)):
        e_psi = state.psi_shape[s] / state.psi_rate[s]
        mu_f = state.f_mean[s][idx]
        second = mu_f.T @ mu_f + state.f_cov[s][idx].sum(axis=0)
        eta1 += (weight * e_psi)[:, None, None] * second[None, :, :]
        resid = data.studies[s].x[idx] - state.l_mean[s][idx] @ state.lam_mean[s].T
        eta2 += (weight * e_psi)[:, None] * (resid.T @ mu_f)
    return eta1, eta2


def psi_natural_rates_msfa(state: MsfaState, data: MultiStudyDataset, s: int,
                           idx: np.ndarray, weight: float) -> np.ndarray:
    """Noisy rates (-eta^psi) for study s from its minibatch."""
    x = data.studies[s].x[idx]
    resid = (x - state.f_mean[s][idx] @ state.phi_mean.T
             - state.l_mean[s][idx] @ state.lam_mean[s].T)
    rss = weight * np.sum(resid * resid, axis=0)
    mu_f, mu_l = state.f_mean[s][idx], state.l_mean[s][idx]
    f_cov_sum = weight * state.f_cov[s][idx].sum(axis=0)
    l_cov_sum = weight * state.l_cov[s][idx].sum(axis=0)
    second_f = weight * (mu_f.T @ mu_f) + f_cov_sum
    second_l = weight * (mu_l.T @ mu_l) + l_cov_sum
    quad_phi = np.einsum("pi,ij,pj->p", state.phi_mean, f_cov_sum, state.phi_mean)
    quad_lam = np.einsum("pi,ij,pj->p", state.lam_mean[s], l_cov_sum, state.lam_mean[s])
    tr_phi = np.einsum("ij,pij->p", second_f, state.phi_cov)
    tr_lam = np.einsum("ij,pij->p", second_l, state.lam_cov[s])
    return state.hyper.b_psi + 0.5 * (rss + quad_phi + quad_lam + tr_phi + tr_lam)


def _blend_gaussian_stack(mean, cov, eta1_hat, eta2_hat, rho):
    ell = chol_batch(cov)
    eta1 = inv_from_chol_batch(ell)
    eta2 = np.einsum("pij,pj->pi", eta1, mean)
    eta1 = symmetrize((1.0 - rho) * eta1 + rho * eta1_hat)
    eta2 = (1.0 - rho) * eta2 + rho * eta2_hat
    new_cov = inv_from_chol_batch(chol_batch(eta1))  # asserts the blend stayed SPD
    new_mean = np.einsum("pij,pj->pi", new_cov, eta2)
    return new_mean, new_cov


def svi_step_msfa(state: MsfaState, data: MultiStudyDataset, t: int,
                  config: FitConfig, rho: float | None = None) -> MsfaState:
    """One SVI iteration over all studies. `rho` overrides the schedule
    (used by the equivalence checks that force rho = 1 or 0)."""
    svi = config.svi
    if svi is None:
        raise ConfigError("svi_step_msfa needs a FitConfig with an SviConfig")
    if rho is None:
        rho = step_size(t, svi)

    batches, weights = [], []
    for s in range(state.n_studies):
        n_s = state.n_per_study[s]
        idx = minibatch_indices(config.seed, (s,), t, n_s, svi.fraction_for(s))
        batches.append(idx)
        weights.append(n_s / idx.size)

    new = state.copy()
    for s in range(new.n_studies):
        _refresh_local(new, data, s, batches[s])

    # All noisy naturals come from the pre-blend globals plus the refreshed
    # minibatch locals (one simultaneous natural-gradient step), then blend.
    lam_hats = [lambda_naturals(new, data, s, batches[s], weights[s])
                for s in range(new.n_studies)]
    phi_hat1, phi_hat2 = phi_naturals(new, data, batches, weights)
    rate_hats = [psi_natural_rates_msfa(new, data, s, batches[s], weights[s])
                 for s in range(new.n_studies)]

    for s, (eta1_hat, eta2_hat) in enumerate(lam_hats):
        new.lam_mean[s], new.lam_cov[s] = _blend_gaussian_stack(
            new.lam_mean[s], new.lam_cov[s], eta1_hat, eta2_hat, rho)
    # Shared block: one blend per iteration over the study-summed estimate.
    new.phi_mean, new.phi_cov = _blend_gaussian_stack(
        new.phi_mean, new.phi_cov, phi_hat1, phi_hat2, rho)
    for s, rate_hat in enumerate(rate_hats):
        new.psi_rate[s] = (1.0 - rho) * new.psi_rate[s] + rho * rate_hat
    if not np.all(new.psi_rate > 0):
        raise NumericalError("a blended psi rate lost positivity")

    _update_shrinkage_all(new)
    return new


def refresh_all_scores_msfa(state: MsfaState, data: MultiStudyDataset) -> None:
    for s in range(state.n_studies):
        _refresh_local(state, data, s, np.arange(state.n_per_study[s]))


def _monitored_svi(state: MsfaState) -> np.ndarray:
    parts = [state.phi_mean.ravel()]
    parts += [m.ravel() for m in state.lam_mean]
    return np.concatenate(parts)


def _blend_into(eta1, eta2, eta1_hat, eta2_hat, rho):
    eta1 *= 1.0 - rho
    eta1 += rho * eta1_hat
    eta1[:] = symmetrize(eta1)
    eta2 *= 1.0 - rho
    eta2 += rho * eta2_hat
    cov = inv_from_chol_batch(chol_batch(eta1))  # asserts the blend stayed SPD
    return np.einsum("pij,pj->pi", cov, eta2), cov


def _fit_loop_inplace(state: MsfaState, data: MultiStudyDataset, config: FitConfig,
                      trace, elbo_trace) -> bool:
    """Driver loop mutating one state; naturals are carried across iterations
    instead of being rebuilt from the covariances every step. Uses the
    compiled per-study kernel when numba is available."""
    from . import _fast

    svi = config.svi
    n_studies, p, k = state.n_studies, state.p, state.k_star
    lam_eta1 = [inv_from_chol_batch(chol_batch(c)) for c in state.lam_cov]
    lam_eta2 = [np.einsum("pij,pj->pi", e, m)
                for e, m in zip(lam_eta1, state.lam_mean)]
    phi_eta1 = inv_from_chol_batch(chol_batch(state.phi_cov))
    phi_eta2 = np.einsum("pij,pj->pi", phi_eta1, state.phi_mean)
    if _fast.AVAILABLE:
        lam_hat1 = [np.empty_like(c) for c in state.lam_cov]
        lam_hat2 = [np.empty_like(m) for m in state.lam_mean]
        rate_hats = [np.empty(p) for _ in range(n_studies)]

    previous = _monitored_svi(state)
    key_cache = {}
    for t in range(1, config.resolved_max_iter() + 1):
        rho = step_size(t, svi)
        batches, weights = [], []
        for s in range(n_studies):
            n_s = state.n_per_study[s]
            idx = minibatch_indices(config.seed, (s,), t, n_s, svi.fraction_for(s), key_cache)
            batches.append(idx)
            weights.append(n_s / idx.size)

        if _fast.AVAILABLE:
            phi_hat1 = np.zeros((p, k, k))
            phi_hat1[:, np.arange(k), np.arange(k)] = phi_prior_precisions(state)
            phi_hat2 = np.zeros((p, k))
            for s in range(n_studies):
                status = _fast.msfa_svi_study(
                    data.studies[s].x, batches[s], weights[s], state.hyper.b_psi,
                    state.phi_mean, state.phi_cov, state.lam_mean[s], state.lam_cov[s],
                    state.f_mean[s], state.f_cov[s], state.l_mean[s], state.l_cov[s],
                    state.psi_shape[s], state.psi_rate[s],
                    state.omega_specific_shape[s], state.omega_specific_rate[s],
                    state.delta_specific_shape[s], state.delta_specific_rate[s],
                    lam_hat1[s], lam_hat2[s], phi_hat1, phi_hat2, rate_hats[s])
                if status:
                    raise NumericalError("Cholesky failed in the SVI iteration")
            for s in range(n_studies):
                if _fast.blend_gaussian_stack(lam_eta1[s], lam_eta2[s], lam_hat1[s],
                                              lam_hat2[s], rho, state.lam_mean[s],
                                              state.lam_cov[s]):
                    raise NumericalError("a blended loading natural lost definiteness")
            if _fast.blend_gaussian_stack(phi_eta1, phi_eta2, phi_hat1, phi_hat2,
                                          rho, state.phi_mean, state.phi_cov):
                raise NumericalError("a blended loading natural lost definiteness")
            for s in range(n_studies):
                state.psi_rate[s] = (1.0 - rho) * state.psi_rate[s] + rho * rate_hats[s]
            if not np.all(state.psi_rate > 0):
                raise NumericalError("a blended psi rate lost positivity")
            _fast.shrinkage_family(state.phi_mean, state.phi_cov,
                                   state.omega_shared_shape, state.omega_shared_rate,
                                   state.delta_shared_shape, state.delta_shared_rate,
                                   state.hyper.shared.nu)
            for s in range(n_studies):
                _fast.shrinkage_family(state.lam_mean[s], state.lam_cov[s],
                                       state.omega_specific_shape[s],
                                       state.omega_specific_rate[s],
                                       state.delta_specific_shape[s],
                                       state.delta_specific_rate[s],
                                       state.hyper.per_study[s].nu)
        else:
            for s in range(n_studies):
                _refresh_local(state, data, s, batches[s])
            lam_hats = [lambda_naturals(state, data, s, batches[s], weights[s])
                        for s in range(n_studies)]
            phi_hat1, phi_hat2 = phi_naturals(state, data, batches, weights)
            psi_hats = [psi_natural_rates_msfa(state, data, s, batches[s], weights[s])
                        for s in range(n_studies)]
            for s, (eta1_hat, eta2_hat) in enumerate(lam_hats):
                state.lam_mean[s], state.lam_cov[s] = _blend_into(
                    lam_eta1[s], lam_eta2[s], eta1_hat, eta2_hat, rho)
            state.phi_mean, state.phi_cov = _blend_into(
                phi_eta1, phi_eta2, phi_hat1, phi_hat2, rho)
            for s, rate_hat in enumerate(psi_hats):
                state.psi_rate[s] = (1.0 - rho) * state.psi_rate[s] + rho * rate_hat
            if not np.all(state.psi_rate > 0):
                raise NumericalError("a blended psi rate lost positivity")
            _update_shrinkage_all(state)

        current = _monitored_svi(state)
        trace.append(mean_squared_difference(current, previous))
        previous = current
        if config.track_elbo:
            elbo_trace.append(elbo_msfa(state, data))
        if trace[-1] <= config.tol:
            return True
    return False


def fit_msfa_svi(data: MultiStudyDataset, hyper: MsfaHyperParams,
                 config: FitConfig) -> FitResult:
    """SVI loop; convergence is monitored on the loading means only."""
    if config.svi is None:
        raise ConfigError("fit_msfa_svi needs a FitConfig with an SviConfig")
    for s in range(data.n_studies):
        if int(np.floor(config.svi.fraction_for(s) * data.n_per_study[s])) < 1:
            raise ConfigError(f"batch fraction gives an empty minibatch in study {s}")
    start = time.perf_counter()
    state = init_msfa(data, hyper, seed=config.seed)
    state.validate(data)

    trace, elbo_trace = [], [] if config.track_elbo else None
    converged = _fit_loop_inplace(state, data, config, trace, elbo_trace)
    refresh_all_scores_msfa(state, data)
    return FitResult(
        state=state,
        iterations=len(trace),
        converged=converged,
        trace=np.asarray(trace),
        elbo_trace=None if elbo_trace is None else np.asarray(elbo_trace),
        elapsed_seconds=time.perf_counter() - start,
    )
