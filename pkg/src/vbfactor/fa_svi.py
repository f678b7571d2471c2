"""Stochastic variational inference for single-study factor analysis.

Each iteration refreshes score factors for a minibatch only, forms noisy
natural parameters for the global families (loading rows and noise
precisions) with every minibatch summand weighted N/N_batch, and blends them
into the running naturals with the Robbins-Monro step size
rho_t = (t + delay)^-kappa. Gamma shapes are never blended; the omega/delta
families have no data dependence and take their plain coordinate updates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fa_cavi import (
    _update_shrinkage_families,
    loading_prior_precisions,
    shared_score_covariance,
)
from .initialize import init_fa
from .linalg import chol_batch, inv_from_chol_batch, spd_inverse, symmetrize
from .model import (
    ConfigError,
    Dataset,
    FaHyperParams,
    FaState,
    FitConfig,
    FitResult,
    GaussianFactor,
    NumericalError,
    SviConfig,
    mean_squared_difference,
)


@dataclass
class NaturalGaussian:
    """Exponential-family coordinates of a Gaussian factor: (precision, precision @ mean)."""

    eta1: np.ndarray
    eta2: np.ndarray


def to_natural(g: GaussianFactor) -> NaturalGaussian:
    prec = spd_inverse(g.cov)
    return NaturalGaussian(eta1=prec, eta2=prec @ g.mean)


def from_natural(n: NaturalGaussian) -> GaussianFactor:
    cov = spd_inverse(n.eta1)
    return GaussianFactor(mean=cov @ n.eta2, cov=cov)


def step_size(t: int, cfg: SviConfig) -> float:
    """rho_t = (t + delay)^-kappa; summable squares, divergent sum for kappa in (0.5, 1]."""
    if t < 1:
        raise ConfigError(f"iteration index must be >= 1, got {t}")
    return float((t + cfg.delay) ** (-cfg.kappa))


def sample_minibatch(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """floor(fraction * n) distinct indices, uniformly without replacement."""
    size = int(np.floor(fraction * n))
    if size < 1:
        raise ConfigError(
            f"batch fraction {fraction} on {n} observations gives an empty minibatch")
    return np.sort(rng.choice(n, size=size, replace=False))


def iteration_rng(seed: int, t: int) -> np.random.Generator:
    """Splittable stream keyed by (seed, t): batches are reproducible per iteration."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))


KEY_CHUNK = 128  # iterations covered by one SeedSequence expansion

_MASK64 = (1 << 64) - 1


def _splitmix64_py(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def iteration_key(seed: int, prefix: tuple, t: int, cache: dict | None = None) -> int:
    """64-bit base key for iteration t, a pure function of (seed, prefix, t).

    Keys come from SeedSequence(seed, spawn_key=prefix + (chunk,)) expanded a
    chunk of iterations at a time; a driver-provided cache amortizes the
    expansion across its loop without changing any value.
    """
    chunk, pos = divmod(t - 1, KEY_CHUNK)
    block = None
    if cache is not None:
        entry = cache.get(prefix)
        if entry is not None and entry[0] == chunk:
            block = entry[1]
    if block is None:
        block = np.random.SeedSequence(
            entropy=seed, spawn_key=prefix + (chunk,)).generate_state(
                KEY_CHUNK, dtype=np.uint64)
        if cache is not None:
            cache[prefix] = (chunk, block)  # one live chunk per prefix
    return int(block[pos])


def minibatch_indices(seed: int, prefix: tuple, t: int, n: int, fraction: float,
                      cache: dict | None = None) -> np.ndarray:
    """Keyed without-replacement draw used by the SVI iterations.

    A splitmix64 stream from iteration_key(seed, prefix, t) drives a partial
    Fisher-Yates shuffle, so each iteration's (and study's) batch is
    reproducible regardless of execution order or thread count.
    """
    size = int(np.floor(fraction * n))
    if size < 1:
        raise ConfigError(
            f"batch fraction {fraction} on {n} observations gives an empty minibatch")
    base = iteration_key(seed, prefix, t, cache)
    out = np.empty(size, dtype=np.int64)
    from . import _fast

    if _fast.AVAILABLE:
        _fast.keyed_minibatch(n, np.uint64(base), out)
        return out
    pool = np.arange(n)
    for i in range(size):
        word = _splitmix64_py(base + i)
        j = i + int(word % (n - i))
        pool[i], pool[j] = pool[j], pool[i]
        out[i] = pool[i]
    out.sort()
    return out


# ---------------------------------------------------------------------------
# Noisy naturals (separately callable so fixed-point behavior is testable)
# ---------------------------------------------------------------------------

def loading_naturals(state: FaState, data: Dataset, idx: np.ndarray,
                     weight: float) -> tuple[np.ndarray, np.ndarray]:
    """Noisy (eta1, eta2) for every loading row from the minibatch `idx`."""
    j = state.j_star
    e_psi = state.psi_shape / state.psi_rate
    mu = state.score_mean[idx]
    second = mu.T @ mu + state.score_cov[idx].sum(axis=0)
    eta1 = (weight * e_psi)[:, None, None] * second[None, :, :]
    eta1[:, np.arange(j), np.arange(j)] += loading_prior_precisions(state)
    proj = data.x[idx].T @ mu
    eta2 = (weight * e_psi)[:, None] * proj
    return eta1, eta2


def psi_natural_rates(state: FaState, data: Dataset, idx: np.ndarray,
                      weight: float) -> np.ndarray:
    """Noisy rates (-eta^psi) for every p, using the state's current loadings."""
    mu = state.score_mean[idx]
    resid = data.x[idx] - mu @ state.load_mean.T
    rss = weight * np.sum(resid * resid, axis=0)
    cov_sum = weight * state.score_cov[idx].sum(axis=0)
    second = weight * (mu.T @ mu) + cov_sum
    traces = np.einsum("ij,pij->p", second, state.load_cov)
    quads = np.einsum("pi,ij,pj->p", state.load_mean, cov_sum, state.load_mean)
    return state.hyper.b_psi + 0.5 * (rss + traces + quads)


def _blend_loadings(state: FaState, eta1_hat, eta2_hat, rho: float) -> None:
    ell = chol_batch(state.load_cov)
    eta1 = inv_from_chol_batch(ell)
    eta2 = np.einsum("pij,pj->pi", eta1, state.load_mean)
    eta1 = symmetrize((1.0 - rho) * eta1 + rho * eta1_hat)
    eta2 = (1.0 - rho) * eta2 + rho * eta2_hat
    # Convex combination of SPD matrices; the Cholesky below asserts it stayed SPD.
    state.load_cov = inv_from_chol_batch(chol_batch(eta1))
    state.load_mean = np.einsum("pij,pj->pi", state.load_cov, eta2)


def svi_step_fa(state: FaState, data: Dataset, t: int, config: FitConfig,
                rho: float | None = None) -> FaState:
    """One SVI iteration: local refresh on a minibatch, then global blends.

    `rho` overrides the schedule step size (used by the equivalence checks
    that force rho = 1 or 0); by default it follows (t + delay)^-kappa.
    """
    svi = config.svi
    if svi is None:
        raise ConfigError("svi_step_fa needs a FitConfig with an SviConfig")
    if rho is None:
        rho = step_size(t, svi)
    idx = minibatch_indices(config.seed, (), t, state.n, svi.fraction_for(0))
    weight = state.n / idx.size

    new = state.copy()

    # Local step: score factors for the minibatch only.
    score_cov = shared_score_covariance(new)
    e_psi = new.psi_shape / new.psi_rate
    new.score_mean[idx] = data.x[idx] @ (new.load_mean * e_psi[:, None]) @ score_cov
    new.score_cov[idx] = score_cov

    # All noisy naturals come from the pre-blend globals plus the refreshed
    # minibatch locals (one simultaneous natural-gradient step), then blend.
    eta1_hat, eta2_hat = loading_naturals(new, data, idx, weight)
    rate_hat = psi_natural_rates(new, data, idx, weight)
    _blend_loadings(new, eta1_hat, eta2_hat, rho)
    new.psi_rate = (1.0 - rho) * new.psi_rate + rho * rate_hat
    if not np.all(new.psi_rate > 0):
        raise NumericalError("a blended psi rate lost positivity")

    # Families with no local dependence take their plain coordinate updates.
    _update_shrinkage_families(new)
    return new


def refresh_all_scores(state: FaState, data: Dataset) -> None:
    """Full local pass; run once before returning so no score factor is stale."""
    score_cov = shared_score_covariance(state)
    e_psi = state.psi_shape / state.psi_rate
    state.score_mean = data.x @ (state.load_mean * e_psi[:, None]) @ score_cov
    state.score_cov = np.broadcast_to(
        score_cov, (state.n, state.j_star, state.j_star)).copy()


def _fit_loop_fast(state: FaState, data: Dataset, config: FitConfig, trace,
                   elbo_trace) -> bool:
    """Driver loop on the compiled kernel; naturals are carried across
    iterations instead of being rebuilt from the covariances every step."""
    from . import _fast
    from .fa_cavi import elbo_fa

    svi = config.svi
    fraction = svi.fraction_for(0)
    nu, b_psi, seed = state.hyper.nu, state.hyper.b_psi, config.seed
    eta1 = inv_from_chol_batch(chol_batch(state.load_cov))
    eta2 = np.einsum("pij,pj->pi", eta1, state.load_mean)
    prev_load = state.load_mean.copy()
    out_msd = np.zeros(1)
    key_cache = {}
    for t in range(1, config.resolved_max_iter() + 1):
        idx = minibatch_indices(seed, (), t, state.n, fraction, key_cache)
        status = _fast.fa_svi_iteration(
            data.x, idx, step_size(t, svi), state.n / idx.size, nu, b_psi,
            state.load_mean, state.load_cov, state.score_mean, state.score_cov,
            eta1, eta2, state.psi_shape, state.psi_rate,
            state.omega_shape, state.omega_rate,
            state.delta_shape, state.delta_rate, prev_load, out_msd)
        if status == 1:
            raise NumericalError("Cholesky failed in the SVI iteration after jitter")
        if status == 2:
            raise NumericalError("a blended psi rate lost positivity")
        trace.append(out_msd[0])
        if config.track_elbo:
            elbo_trace.append(elbo_fa(state, data))
        if trace[-1] <= config.tol:
            return True
    return False


def fit_fa_svi(data: Dataset, hyper: FaHyperParams, config: FitConfig) -> FitResult:
    """SVI loop; convergence is monitored on the loading means only."""
    if config.svi is None:
        raise ConfigError("fit_fa_svi needs a FitConfig with an SviConfig")
    start = time.perf_counter()
    state = init_fa(data, hyper, seed=config.seed)
    state.validate(data)

    from . import _fast
    from .fa_cavi import elbo_fa  # avoid cycle at module import time

    trace, elbo_trace = [], [] if config.track_elbo else None
    converged = False
    if _fast.AVAILABLE:
        converged = _fit_loop_fast(state, data, config, trace, elbo_trace)
    else:
        previous = state.load_mean.ravel().copy()
        for t in range(1, config.resolved_max_iter() + 1):
            state = svi_step_fa(state, data, t, config)
            current = state.load_mean.ravel()
            trace.append(mean_squared_difference(current, previous))
            previous = current.copy()
            if config.track_elbo:
                elbo_trace.append(elbo_fa(state, data))
            if trace[-1] <= config.tol:
                converged = True
                break

    refresh_all_scores(state, data)
    return FitResult(
        state=state,
        iterations=len(trace),
        converged=converged,
        trace=np.asarray(trace),
        elbo_trace=None if elbo_trace is None else np.asarray(elbo_trace),
        elapsed_seconds=time.perf_counter() - start,
    )
