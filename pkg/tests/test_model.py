import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vbfactor as v
from vbfactor import serialize
from conftest import fitted_fa_state, fitted_msfa_state


class TestGaussianFactor:
    def test_dimension_mismatch(self):
        with pytest.raises(v.DimensionError):
            v.GaussianFactor(np.zeros(3), np.eye(2))

    def test_validate_passes_spd(self):
        g = v.GaussianFactor(np.zeros(2), np.array([[2.0, 0.5], [0.5, 1.0]]))
        g.validate()

    def test_validate_rejects_asymmetry(self):
        g = v.GaussianFactor(np.zeros(2), np.array([[1.0, 1e-6], [0.0, 1.0]]))
        with pytest.raises(v.NumericalError):
            g.validate()

    def test_validate_rejects_indefinite(self):
        g = v.GaussianFactor(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(v.NumericalError):
            g.validate()


class TestGammaFactor:
    def test_mean(self):
        assert v.GammaFactor(3.0, 2.0).mean() == 1.5

    @pytest.mark.parametrize("alpha,beta", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
    def test_positivity(self, alpha, beta):
        with pytest.raises(v.ConfigError):
            v.GammaFactor(alpha, beta)


class TestExpectedTau:
    def test_single_factor(self):
        assert v.expected_tau([v.GammaFactor(2, 1)], 1) == 2.0

    def test_product_of_means(self):
        delta = [v.GammaFactor(2, 1), v.GammaFactor(3, 1)]
        assert v.expected_tau(delta, 2) == 6.0

    def test_prior_mean_product(self):
        # Direct evaluation of the product formula: 2.1 * 3.1 * 3.1 = 20.181.
        delta = [v.GammaFactor(2.1, 1), v.GammaFactor(3.1, 1), v.GammaFactor(3.1, 1)]
        assert v.expected_tau(delta, 3) == pytest.approx(20.181, abs=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(v.DimensionError):
            v.expected_tau([v.GammaFactor(1, 1)], 2)
        with pytest.raises(v.DimensionError):
            v.expected_tau([v.GammaFactor(1, 1)], 0)

    @given(st.lists(st.tuples(st.floats(0.1, 50), st.floats(0.1, 50)),
                    min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_recurrence(self, params):
        delta = [v.GammaFactor(a, b) for a, b in params]
        for j in range(1, len(delta)):
            left = v.expected_tau(delta, j + 1)
            right = v.expected_tau(delta, j) * delta[j].mean()
            assert left == right  # exact: same product order


class TestHyperParams:
    def test_fa_defaults(self):
        h = v.FaHyperParams(j_star=5)
        assert (h.nu, h.a1, h.a2, h.a_psi, h.b_psi) == (3.0, 2.1, 3.1, 1.0, 0.3)

    def test_positivity_enforced(self):
        with pytest.raises(v.ConfigError):
            v.FaHyperParams(j_star=5, nu=-1.0)
        with pytest.raises(v.ConfigError):
            v.FaHyperParams(j_star=0)

    def test_delta_prior_shapes(self):
        s = v.ShrinkagePrior(4, a1=2.1, a2=3.1)
        assert np.allclose(s.delta_prior_shapes(), [2.1, 3.1, 3.1, 3.1])

    def test_msfa_requires_studies(self):
        with pytest.raises(v.ConfigError):
            v.MsfaHyperParams(v.ShrinkagePrior(3), ())

    def test_msfa_symmetric(self):
        h = v.MsfaHyperParams.symmetric(3, 4, 5)
        assert h.k_star == 4 and h.j_stars == (5, 5, 5) and h.n_studies == 3


class TestDataset:
    def test_rejects_nan(self):
        with pytest.raises(v.PreconditionError):
            v.Dataset(np.array([[1.0, np.nan]]))

    def test_centered_flag_checked(self):
        with pytest.raises(v.PreconditionError):
            v.Dataset(np.ones((4, 2)), centered=True)

    def test_preprocess_centers_and_records(self):
        x = np.arange(12.0).reshape(4, 3)
        d = v.Dataset.preprocess(x, center=True, scale=True)
        assert d.centered and d.scaled
        assert np.allclose(d.x.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(d.x.std(axis=0, ddof=1), 1.0)
        assert np.allclose(d.column_means, x.mean(axis=0))

    def test_scale_passes_constant_columns(self):
        x = np.column_stack([np.ones(5), np.arange(5.0)])
        d = v.Dataset.preprocess(x, center=True, scale=True)
        assert np.all(np.isfinite(d.x))

    def test_multistudy_column_mismatch(self):
        a = v.Dataset(np.zeros((3, 2)))
        b = v.Dataset(np.zeros((3, 3)))
        with pytest.raises(v.DimensionError):
            v.MultiStudyDataset([a, b])


class TestFitConfig:
    def test_defaults_resolve_by_algorithm(self):
        assert v.FitConfig().resolved_max_iter() == 5000
        assert v.FitConfig(svi=v.SviConfig()).resolved_max_iter() == 10000
        assert v.FitConfig(max_iter=7).resolved_max_iter() == 7

    def test_validation(self):
        with pytest.raises(v.ConfigError):
            v.FitConfig(tol=0.0)
        with pytest.raises(v.ConfigError):
            v.SviConfig(batch_fraction=0.0)
        with pytest.raises(v.ConfigError):
            v.SviConfig(kappa=0.5)
        with pytest.raises(v.ConfigError):
            v.SviConfig(delay=0.0)

    def test_per_study_fractions(self):
        cfg = v.SviConfig(batch_fraction=(0.1, 0.2))
        assert cfg.fraction_for(0) == 0.1 and cfg.fraction_for(1) == 0.2


class TestFitResult:
    def test_trace_length_enforced(self):
        state, _ = fitted_fa_state(sweeps=1)
        with pytest.raises(v.DimensionError):
            v.FitResult(state=state, iterations=3, converged=False,
                        trace=np.zeros(2))


class TestFaState:
    def test_accessors_and_dims(self):
        state, data = fitted_fa_state()
        assert state.n == data.n and state.p == data.p
        g = state.loadings(0)
        assert g.dim == state.j_star
        g.validate()
        state.scores(1).validate()
        assert state.psi(0).mean() > 0
        state.validate(data)

    def test_expected_tau_matches_factor_product(self):
        state, _ = fitted_fa_state()
        tau = state.expected_tau_vector()
        for j in range(state.j_star):
            assert tau[j] == pytest.approx(
                v.expected_tau(state.delta_factors(), j + 1), rel=1e-14)

    def test_copy_is_independent(self):
        state, _ = fitted_fa_state()
        clone = state.copy()
        clone.load_mean[0, 0] += 1.0
        assert state.load_mean[0, 0] != clone.load_mean[0, 0]

    def test_validate_catches_bad_binding(self):
        state, data = fitted_fa_state()
        other = v.Dataset(np.zeros((data.n + 1, data.p)), centered=True)
        with pytest.raises(v.DimensionError):
            state.validate(other)


class TestSerialization:
    def test_fa_round_trip_bit_identical(self):
        state, _ = fitted_fa_state()
        doc = json.loads(serialize.dumps(serialize.state_to_dict(state)))
        back = serialize.state_from_dict(doc)
        for name in ("load_mean", "load_cov", "score_mean", "score_cov",
                     "psi_shape", "psi_rate", "omega_shape", "omega_rate",
                     "delta_shape", "delta_rate"):
            assert np.array_equal(getattr(state, name), getattr(back, name)), name
        assert back.hyper == state.hyper

    def test_msfa_round_trip_bit_identical(self):
        state, _ = fitted_msfa_state()
        doc = json.loads(serialize.dumps(serialize.state_to_dict(state)))
        back = serialize.state_from_dict(doc)
        assert np.array_equal(state.phi_mean, back.phi_mean)
        for s in range(state.n_studies):
            assert np.array_equal(state.lam_mean[s], back.lam_mean[s])
            assert np.array_equal(state.l_cov[s], back.l_cov[s])
            assert np.array_equal(state.delta_specific_rate[s],
                                  back.delta_specific_rate[s])
        assert np.array_equal(state.psi_rate, back.psi_rate)
        assert back.hyper == state.hyper

    def test_dumps_deterministic(self):
        state, _ = fitted_fa_state()
        a = serialize.dumps(serialize.state_to_dict(state))
        b = serialize.dumps(serialize.state_to_dict(state.copy()))
        assert a == b

    @given(st.floats(allow_nan=False, allow_infinity=False))
    @settings(max_examples=200, deadline=None)
    def test_17_digits_round_trip_floats(self, x):
        assert float(format(x, ".17g")) == x

    def test_fit_result_round_trip(self):
        state, data = fitted_fa_state()
        result = v.FitResult(state=state, iterations=2, converged=True,
                             trace=np.array([1e-3, 1e-7]),
                             elbo_trace=np.array([-10.0, -9.5]),
                             elapsed_seconds=0.25)
        doc = json.loads(serialize.dumps(serialize.fit_result_to_dict(result)))
        back = serialize.fit_result_from_dict(doc)
        assert back.converged and back.iterations == 2
        assert np.array_equal(back.trace, result.trace)
        assert np.array_equal(back.elbo_trace, result.elbo_trace)
        assert back.elapsed_seconds == result.elapsed_seconds
