import numpy as np
import pytest

import vbfactor as v
from vbfactor.metrics import node_degrees, psi_squared_point
from conftest import fitted_fa_state, fitted_msfa_state


def _fa_state_with(load_mean, psi_shape, psi_rate):
    p, j = np.atleast_2d(load_mean).shape
    return v.FaState(
        hyper=v.FaHyperParams(j_star=j),
        load_mean=np.atleast_2d(load_mean).astype(float),
        load_cov=np.zeros((p, j, j)),
        score_mean=np.zeros((2, j)), score_cov=np.zeros((2, j, j)),
        psi_shape=np.asarray(psi_shape, float), psi_rate=np.asarray(psi_rate, float),
        omega_shape=np.ones((p, j)), omega_rate=np.ones((p, j)),
        delta_shape=np.ones(j), delta_rate=np.ones(j),
    )


class TestReconstructSigma:
    def test_zero_loadings_gives_noise_diagonal(self):
        state = _fa_state_with(np.zeros((3, 2)), [3.0] * 3, [4.0] * 3)
        sigma = v.reconstruct_sigma_fa(state)
        assert np.allclose(sigma, np.diag([2.0, 2.0, 2.0]))  # rate/(shape-1)

    def test_rank_one_off_diagonals(self):
        state = _fa_state_with(np.ones((2, 1)), [3.0, 3.0], [2.0, 2.0])
        sigma = v.reconstruct_sigma_fa(state)
        assert sigma[0, 1] == pytest.approx(1.0)
        assert sigma[1, 0] == pytest.approx(1.0)

    def test_low_shape_falls_back_with_warning(self):
        state = _fa_state_with(np.zeros((2, 1)), [0.5, 3.0], [1.0, 4.0])
        with pytest.warns(RuntimeWarning):
            sigma = v.reconstruct_sigma_fa(state)
        assert sigma[0, 0] == pytest.approx(1.0 / 1.5)  # rate/(shape+1)
        assert sigma[1, 1] == pytest.approx(2.0)

    def test_reconstruction_minus_noise_is_psd(self):
        state, _ = fitted_fa_state(seed=0)
        sigma = v.reconstruct_sigma_fa(state)
        noise = np.diag(psi_squared_point(state.psi_shape, state.psi_rate))
        eigvals = np.linalg.eigvalsh(sigma - noise)
        assert eigvals.min() >= -1e-10

    def test_msfa_reconstruction(self):
        state, _ = fitted_msfa_state(seed=1)
        sigma = v.reconstruct_sigma_msfa(state, 1)
        expected = (state.phi_mean @ state.phi_mean.T
                    + state.lam_mean[1] @ state.lam_mean[1].T
                    + np.diag(psi_squared_point(state.psi_shape[1],
                                                state.psi_rate[1])))
        assert np.allclose(sigma, expected)
        with pytest.raises(v.DimensionError):
            v.reconstruct_sigma_msfa(state, 5)


class TestRvCoefficient:
    def test_self_similarity_is_exactly_one(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = rng.standard_normal((6, 6))
            assert abs(v.rv_coefficient(a, a) - 1.0) <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        assert v.rv_coefficient(a, b) == pytest.approx(v.rv_coefficient(b, a),
                                                       abs=1e-12)

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        assert v.rv_coefficient(a, 2.0 * b) == pytest.approx(
            v.rv_coefficient(a, b), abs=1e-12)

    def test_orthogonal_supports(self):
        assert v.rv_coefficient(np.diag([1.0, 0.0]), np.diag([0.0, 1.0])) == 0.0

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            v.rv_coefficient(np.zeros((3, 3)), np.eye(3))

    def test_rotation_invariance_of_reconstruction(self):
        state, _ = fitted_fa_state(seed=2)
        sigma = v.reconstruct_sigma_fa(state)
        rng = np.random.default_rng(3)
        q, _ = np.linalg.qr(rng.standard_normal((state.j_star, state.j_star)))
        rotated = state.copy()
        rotated.load_mean = state.load_mean @ q
        sigma_rot = (rotated.load_mean @ rotated.load_mean.T
                     + np.diag(psi_squared_point(state.psi_shape, state.psi_rate)))
        truth = sigma + 0.1 * np.eye(state.p)
        assert v.rv_coefficient(sigma_rot, truth) == pytest.approx(
            v.rv_coefficient(sigma, truth), abs=1e-10)


class TestBartlettScores:
    def test_exact_noise_free_recovery(self):
        rng = np.random.default_rng(4)
        phi = rng.standard_normal((12, 3))
        lam = rng.standard_normal((12, 2))
        psi = rng.uniform(0.2, 1.5, 12)
        f, l = rng.standard_normal(3), rng.standard_normal(2)
        x = phi @ f + lam @ l
        f_hat, l_hat = v.bartlett_scores(phi, lam, psi, x)
        assert np.allclose(f_hat, f, atol=1e-10)
        assert np.allclose(l_hat, l, atol=1e-10)

    def test_empty_specific_block_is_classical(self):
        rng = np.random.default_rng(5)
        phi = rng.standard_normal((8, 2))
        psi = rng.uniform(0.5, 2.0, 8)
        x = rng.standard_normal(8)
        f_hat, l_hat = v.bartlett_scores(phi, np.zeros((8, 0)), psi, x)
        w = 1.0 / psi
        expected = np.linalg.solve(phi.T @ (phi * w[:, None]),
                                   (phi * w[:, None]).T @ x)
        assert l_hat.size == 0
        assert np.allclose(f_hat, expected, atol=1e-12)

    def test_isotropic_noise_scale_cancels(self):
        rng = np.random.default_rng(6)
        phi = rng.standard_normal((9, 2))
        lam = rng.standard_normal((9, 1))
        x = rng.standard_normal(9)
        a = v.bartlett_scores(phi, lam, np.full(9, 1.0), x)
        b = v.bartlett_scores(phi, lam, np.full(9, 7.5), x)
        assert np.allclose(a[0], b[0], atol=1e-12)
        assert np.allclose(a[1], b[1], atol=1e-12)

    def test_rank_deficient_uses_pseudo_inverse_with_warning(self):
        phi = np.ones((6, 2))  # duplicated column: rank 1
        with pytest.warns(RuntimeWarning):
            f_hat, _ = v.bartlett_scores(phi, np.zeros((6, 0)), np.ones(6),
                                         np.ones(6))
        assert np.all(np.isfinite(f_hat))

    def test_too_many_columns_rejected(self):
        with pytest.raises(v.DimensionError):
            v.bartlett_scores(np.ones((3, 2)), np.ones((3, 2)), np.ones(3),
                              np.ones(3))


class TestPredict:
    def test_noise_free_chain_recovers_input(self):
        state, _ = fitted_msfa_state(seed=7)
        rng = np.random.default_rng(8)
        f = rng.standard_normal((4, state.k_star))
        l = rng.standard_normal((4, state.j_stars[0]))
        x = f @ state.phi_mean.T + l @ state.lam_mean[0].T
        x_hat = v.predict("msfa", state, x, study=0)
        assert np.allclose(x_hat, x, atol=1e-8)

    def test_zero_input_zero_prediction(self):
        state, _ = fitted_fa_state(seed=9)
        assert np.allclose(v.predict("stacked", state, np.zeros(state.p)), 0.0)

    def test_prediction_is_a_projection(self):
        state, data = fitted_fa_state(seed=10)
        once = v.predict("independent", state, data.x[:5])
        twice = v.predict("independent", state, once)
        assert np.allclose(twice, once, atol=1e-10)

    def test_mode_and_state_checked(self):
        state, _ = fitted_fa_state(seed=11)
        with pytest.raises(ValueError):
            v.predict("nope", state, np.zeros(state.p))
        with pytest.raises(TypeError):
            v.predict("msfa", state, np.zeros(state.p), study=0)
        mstate, _ = fitted_msfa_state(seed=12)
        with pytest.raises(ValueError):
            v.predict("msfa", mstate, np.zeros(mstate.p))


class TestMse:
    def test_identical_is_zero(self):
        x = np.arange(6.0).reshape(2, 3)
        assert v.mse(x, x) == 0.0

    def test_row_sum_convention(self):
        assert v.mse(np.zeros((2, 2)), np.ones((2, 2))) == pytest.approx(2.0)

    def test_symmetry_and_shape_check(self):
        rng = np.random.default_rng(13)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        assert v.mse(a, b) == pytest.approx(v.mse(b, a))
        with pytest.raises(v.DimensionError):
            v.mse(a, b[:, :2])


class TestNearZeroProportion:
    def test_all_zero_column(self):
        assert v.near_zero_proportion(np.zeros((5, 1)))[0] == 1.0

    def test_all_ones_column(self):
        assert v.near_zero_proportion(np.ones((5, 1)))[0] == 0.0

    def test_mixed_column(self):
        col = np.array([[0.005], [-0.02], [0.0]])
        assert v.near_zero_proportion(col)[0] == pytest.approx(2.0 / 3.0)

    def test_column_permutation_consistency(self):
        rng = np.random.default_rng(14)
        m = rng.standard_normal((20, 4)) * 0.02
        base = v.near_zero_proportion(m)
        perm = [2, 0, 3, 1]
        assert np.allclose(v.near_zero_proportion(m[:, perm]), base[perm])


class TestExportEdges:
    def test_identity_has_no_edges(self):
        assert v.export_edges(np.eye(4), 0.5) == []

    def test_all_ones_three_nodes(self):
        edges = v.export_edges(np.ones((3, 3)), 0.5)
        assert len(edges) == 3
        assert {(s, t) for s, t, _ in edges} == {(0, 1), (0, 2), (1, 2)}

    def test_threshold_above_everything(self):
        rng = np.random.default_rng(15)
        c = rng.uniform(-0.4, 0.4, (5, 5))
        assert v.export_edges(c, 0.9) == []

    def test_names_and_degrees(self):
        c = np.array([[1.0, 0.8, 0.0], [0.8, 1.0, 0.0], [0.0, 0.0, 1.0]])
        edges = v.export_edges(c, 0.5, names=["a", "b", "c"])
        assert edges == [("a", "b", pytest.approx(0.8))]
        assert node_degrees(edges) == {"a": 1, "b": 1}
