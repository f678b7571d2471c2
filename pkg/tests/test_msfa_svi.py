import numpy as np
import pytest

import vbfactor as v
from vbfactor.msfa_cavi import (
    shared_f_covariance,
    shared_l_covariance,
    update_lambda_row,
    update_phi_row,
    update_psi_rate_msfa,
    update_scores_msfa,
    update_shared_delta,
    update_shared_shrinkage,
    update_specific_delta,
    update_specific_shrinkage,
)
from vbfactor.msfa_svi import (
    phi_naturals,
    refresh_all_scores_msfa,
    svi_step_msfa,
)
from conftest import small_msfa_problem


def cavi_route_step(state, data):
    """Full-data coordinate updates with every family computed from the same
    pre-step state (scores refreshed first, as in the SVI iteration)."""
    out = state.copy()
    for s in range(out.n_studies):
        l_cov = shared_l_covariance(out, s)
        f_cov = shared_f_covariance(out, s)
        for i in range(out.n_per_study[s]):
            f, l = update_scores_msfa(out, data, s, i)
            out.l_mean[s][i], out.l_cov[s][i] = l.mean, l_cov
            out.f_mean[s][i], out.f_cov[s][i] = f.mean, f_cov
    new_lams = [[update_lambda_row(out, data, s, p) for p in range(out.p)]
                for s in range(out.n_studies)]
    new_phis = [update_phi_row(out, data, p) for p in range(out.p)]
    new_rates = [[update_psi_rate_msfa(out, data, s, p) for p in range(out.p)]
                 for s in range(out.n_studies)]
    for s in range(out.n_studies):
        for p, g in enumerate(new_lams[s]):
            out.lam_mean[s][p], out.lam_cov[s][p] = g.mean, g.cov
    for p, g in enumerate(new_phis):
        out.phi_mean[p], out.phi_cov[p] = g.mean, g.cov
    out.psi_rate = np.array(new_rates)
    for p in range(out.p):
        for k in range(out.k_star):
            out.omega_shared_rate[p, k] = update_shared_shrinkage(out, p, k).beta
    for s in range(out.n_studies):
        for p in range(out.p):
            for j in range(out.j_stars[s]):
                out.omega_specific_rate[s][p, j] = update_specific_shrinkage(
                    out, s, p, j).beta
    for k in range(out.k_star):
        out.delta_shared_rate[k] = update_shared_delta(out, k).beta
    for s in range(out.n_studies):
        for j in range(out.j_stars[s]):
            out.delta_specific_rate[s][j] = update_specific_delta(out, s, j).beta
    return out


class TestSviStepMsfa:
    def test_full_batch_unit_step_matches_cavi(self):
        _, data, hyper = small_msfa_problem(seed=0)
        snap = v.init_msfa(data, hyper, seed=0)
        cfg = v.FitConfig(seed=0, svi=v.SviConfig(batch_fraction=1.0))
        svi = svi_step_msfa(snap.copy(), data, 1, cfg, rho=1.0)
        cavi = cavi_route_step(snap, data)
        assert np.allclose(svi.phi_mean, cavi.phi_mean, rtol=1e-10, atol=1e-10)
        assert np.allclose(svi.phi_cov, cavi.phi_cov, rtol=1e-10, atol=1e-10)
        assert np.allclose(svi.psi_rate, cavi.psi_rate, rtol=1e-10, atol=1e-10)
        for s in range(snap.n_studies):
            assert np.allclose(svi.lam_mean[s], cavi.lam_mean[s],
                               rtol=1e-10, atol=1e-10)
            assert np.allclose(svi.l_mean[s], cavi.l_mean[s],
                               rtol=1e-10, atol=1e-10)
            assert np.allclose(svi.delta_specific_rate[s],
                               cavi.delta_specific_rate[s], rtol=1e-10)
        assert np.allclose(svi.delta_shared_rate, cavi.delta_shared_rate,
                           rtol=1e-10)

    def test_zero_step_freezes_blended_globals(self):
        _, data, hyper = small_msfa_problem(seed=1)
        snap = v.init_msfa(data, hyper, seed=0)
        cfg = v.FitConfig(seed=0, svi=v.SviConfig(batch_fraction=0.4))
        out = svi_step_msfa(snap.copy(), data, 3, cfg, rho=0.0)
        assert np.allclose(out.phi_mean, snap.phi_mean, atol=1e-12)
        assert np.allclose(out.psi_rate, snap.psi_rate, atol=1e-12)
        for s in range(snap.n_studies):
            assert np.allclose(out.lam_mean[s], snap.lam_mean[s], atol=1e-12)

    def test_duplicated_studies_double_phi_precision(self):
        _, data, hyper = small_msfa_problem(seed=2, s=1, n_s=(40,))
        single = v.init_msfa(data, hyper, seed=0)
        doubled_data = v.MultiStudyDataset([data.studies[0], data.studies[0]])
        doubled = v.init_msfa(doubled_data,
                              v.MsfaHyperParams.symmetric(2, hyper.k_star, 3),
                              seed=0)
        for s in range(2):
            doubled.psi_shape[s] = single.psi_shape[0]
            doubled.psi_rate[s] = single.psi_rate[0]
            doubled.f_mean[s] = single.f_mean[0].copy()
            doubled.f_cov[s] = single.f_cov[0].copy()
            doubled.l_mean[s] = single.l_mean[0].copy()
            doubled.l_cov[s] = single.l_cov[0].copy()
            doubled.lam_mean[s] = single.lam_mean[0].copy()
        doubled.phi_mean = single.phi_mean.copy()
        doubled.phi_cov = single.phi_cov.copy()
        doubled.omega_shared_shape = single.omega_shared_shape.copy()
        doubled.omega_shared_rate = single.omega_shared_rate.copy()
        doubled.delta_shared_shape = single.delta_shared_shape.copy()
        doubled.delta_shared_rate = single.delta_shared_rate.copy()

        n = data.studies[0].n
        idx = np.arange(n)
        one1, _ = phi_naturals(single, data, [idx], [1.0])
        two1, _ = phi_naturals(doubled, doubled_data, [idx, idx], [1.0, 1.0])
        prior = np.zeros_like(one1)
        k = single.k_star
        from vbfactor.msfa_cavi import phi_prior_precisions

        prior[:, np.arange(k), np.arange(k)] = phi_prior_precisions(single)
        assert np.allclose(two1 - prior, 2.0 * (one1 - prior), rtol=1e-10)

    def test_study_permutation_with_full_batches(self):
        # With b=1 the batch draws are the full index sets, so relabeling the
        # studies permutes the results exactly.
        _, data, hyper = small_msfa_problem(seed=3, s=2, n_s=(30, 45))
        cfg = v.FitConfig(seed=0, svi=v.SviConfig(batch_fraction=1.0))
        state = v.init_msfa(data, hyper, seed=0)
        stepped = svi_step_msfa(state, data, 1, cfg)

        perm_data = v.MultiStudyDataset([data.studies[1], data.studies[0]])
        perm_state = v.init_msfa(perm_data, hyper, seed=0)
        perm_stepped = svi_step_msfa(perm_state, perm_data, 1, cfg)

        assert np.allclose(perm_stepped.phi_mean, stepped.phi_mean, atol=1e-10)
        assert np.allclose(perm_stepped.lam_mean[0], stepped.lam_mean[1], atol=1e-10)
        assert np.allclose(perm_stepped.lam_mean[1], stepped.lam_mean[0], atol=1e-10)
        assert np.allclose(perm_stepped.psi_rate, stepped.psi_rate[[1, 0]], atol=1e-10)


class TestFitMsfaSvi:
    def test_driver_matches_pure_steps(self):
        _, data, hyper = small_msfa_problem(seed=4, s=2, n_s=(40, 55),
                                            k_star=3, j_star=2)
        cfg = v.FitConfig(seed=0, max_iter=20, tol=1e-30,
                          svi=v.SviConfig(batch_fraction=0.3))
        fast = v.fit_msfa_svi(data, hyper, cfg)
        state = v.init_msfa(data, hyper, seed=0)
        for t in range(1, 21):
            state = svi_step_msfa(state, data, t, cfg)
        refresh_all_scores_msfa(state, data)
        assert np.allclose(fast.state.phi_mean, state.phi_mean, rtol=1e-9, atol=1e-11)
        for s in range(2):
            assert np.allclose(fast.state.lam_mean[s], state.lam_mean[s],
                               rtol=1e-9, atol=1e-11)
            assert np.allclose(fast.state.l_mean[s], state.l_mean[s],
                               rtol=1e-9, atol=1e-11)
        assert np.allclose(fast.state.psi_rate, state.psi_rate, rtol=1e-9)

    def test_batch_floor_enforced(self):
        _, data, hyper = small_msfa_problem(seed=5, s=2, n_s=(10, 60))
        cfg = v.FitConfig(seed=0, svi=v.SviConfig(batch_fraction=0.05))
        with pytest.raises(v.ConfigError):
            v.fit_msfa_svi(data, hyper, cfg)

    def test_final_pass_refreshes_every_score(self):
        _, data, hyper = small_msfa_problem(seed=6)
        cfg = v.FitConfig(seed=0, max_iter=15, tol=1e-30,
                          svi=v.SviConfig(batch_fraction=0.2))
        result = v.fit_msfa_svi(data, hyper, cfg)
        for s in range(result.state.n_studies):
            shared = shared_l_covariance(result.state, s)
            assert np.allclose(result.state.l_cov[s], shared[None], atol=1e-12)

    def test_deterministic_under_seed(self):
        _, data, hyper = small_msfa_problem(seed=7)
        cfg = v.FitConfig(seed=2, max_iter=25, svi=v.SviConfig(batch_fraction=0.25))
        r1 = v.fit_msfa_svi(data, hyper, cfg)
        r2 = v.fit_msfa_svi(data, hyper, cfg)
        assert np.array_equal(r1.state.phi_mean, r2.state.phi_mean)
        assert np.array_equal(r1.trace, r2.trace)

    def test_per_study_batch_fractions(self):
        _, data, hyper = small_msfa_problem(seed=8, s=2, n_s=(40, 80))
        cfg = v.FitConfig(seed=0, max_iter=10, tol=1e-30,
                          svi=v.SviConfig(batch_fraction=(0.5, 0.25)))
        result = v.fit_msfa_svi(data, hyper, cfg)
        assert result.iterations == 10
