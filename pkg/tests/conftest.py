import numpy as np
import pytest

import vbfactor as v


@pytest.fixture(scope="session", autouse=True)
def warm_compiled_kernels():
    """Trigger numba compilation once so timed tests measure steady state."""
    truth = v.generate_fa_truth(8, 2, seed=0)
    data = v.center_dataset(v.sample_fa_dataset(truth, 30, seed=1))
    cfg = v.FitConfig(max_iter=2, tol=1e-30, seed=0, svi=v.SviConfig(batch_fraction=0.5))
    v.fit_fa_svi(data, v.FaHyperParams(j_star=2), cfg)
    mtruth = v.generate_msfa_truth(2, 8, 2, [2, 2], seed=2)
    mdata = v.center_multistudy(v.sample_msfa_dataset(mtruth, [20, 25], seed=3))
    v.fit_msfa_svi(mdata, v.MsfaHyperParams.symmetric(2, 2, 2), cfg)


def small_fa_problem(seed=0, n=120, p=15, j=3, j_star=4):
    truth = v.generate_fa_truth(p, j, seed=seed)
    data = v.center_dataset(v.sample_fa_dataset(truth, n, seed=seed + 1000))
    return truth, data, v.FaHyperParams(j_star=j_star)


def small_msfa_problem(seed=0, s=2, n_s=(60, 80), p=12, k=2, j=2, k_star=3, j_star=3):
    truth = v.generate_msfa_truth(s, p, k, [j] * s, seed=seed)
    data = v.center_multistudy(v.sample_msfa_dataset(truth, list(n_s), seed=seed + 1000))
    return truth, data, v.MsfaHyperParams.symmetric(s, k_star, j_star)


def fitted_fa_state(seed=0, sweeps=3, **kwargs):
    """A generic mid-optimization state for unit tests (not converged)."""
    from vbfactor.fa_cavi import _sweep

    truth, data, hyper = small_fa_problem(seed=seed, **kwargs)
    state = v.init_fa(data, hyper, seed=seed)
    for _ in range(sweeps):
        _sweep(state, data)
    return state, data


def fitted_msfa_state(seed=0, sweeps=3, **kwargs):
    from vbfactor.msfa_cavi import _sweep

    truth, data, hyper = small_msfa_problem(seed=seed, **kwargs)
    state = v.init_msfa(data, hyper, seed=seed)
    for _ in range(sweeps):
        _sweep(state, data)
    return state, data
