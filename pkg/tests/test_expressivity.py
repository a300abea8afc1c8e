import numpy as np
import pytest

from metatailor.errors import ContractViolation
from metatailor.expressivity import (
    AugmentationSet,
    check_condition,
    cn_last_layer_system,
    corollary_rank_survey,
    expressivity_gap,
    system_consistency_error,
)
from metatailor.net import ModelConfig, MlpParams, init_params
from metatailor.autodiff import Tensor


class TestCheckCondition:
    def test_orthonormal_vectors_pass(self):
        assert check_condition(AugmentationSet(np.eye(4)[:3]))

    def test_duplicate_vector_fails(self):
        g = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert not check_condition(AugmentationSet(g))

    def test_matches_pairwise_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            aug = AugmentationSet.random_unit(4, 6, rng)
            g = aug.vectors
            expected = all(
                g[i] @ g[i] - g[i] @ g[j] > 0
                for i in range(4)
                for j in range(4)
                if i != j
            )
            assert check_condition(aug) == expected


def theory_config(m_h=8, n_layers=2, d_in=4):
    widths = [d_in] + [m_h] * n_layers + [1]
    return ModelConfig(widths=widths, activation="softplus")


class TestCnLastLayerSystem:
    def test_identity_cn_reproduces_plain_forward(self):
        cfg = theory_config()
        params = init_params(cfg, seed=1)
        rng = np.random.default_rng(5)
        aug = AugmentationSet.random_unit(4, 4, rng)
        err = system_consistency_error(
            cfg, params, aug, np.ones(cfg.widths[-2]), np.zeros(cfg.widths[-2])
        )
        assert err <= 1e-10

    def test_two_neuron_system_matches_hand_assembly(self):
        # m_H = n_g = 2 with a single hidden layer: every entry of the matrix
        # is w_out_k * softplus(W1 g_i + b1)_k next to a copy of w_out.
        cfg = ModelConfig(widths=[2, 2, 1], activation="softplus")
        params = init_params(cfg, seed=7)
        aug = AugmentationSet(np.array([[1.0, 0.0], [0.0, 1.0]]))
        system = cn_last_layer_system(cfg, params, aug)
        w1 = params.weights[0].data
        b1 = params.biases[0].data
        w2 = params.weights[1].data[0]
        for i, g in enumerate(aug.vectors):
            z = np.log1p(np.exp(w1 @ g + b1))
            np.testing.assert_allclose(system.matrix[i, :2], w2 * z, rtol=1e-12)
            np.testing.assert_allclose(system.matrix[i, 2:], w2, rtol=1e-12)

    def test_consistency_on_random_cn_values(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            cfg = theory_config(m_h=6, n_layers=2)
            params = init_params(cfg, seed=trial)
            aug = AugmentationSet.random_unit(3, 4, rng)
            gamma = rng.normal(size=6)
            beta = rng.normal(size=6)
            assert system_consistency_error(cfg, params, aug, gamma, beta) <= 1e-10

    def test_requires_single_output(self):
        cfg = ModelConfig(widths=[3, 4, 2])
        with pytest.raises(ContractViolation):
            cn_last_layer_system(cfg, init_params(cfg, seed=0), AugmentationSet(np.eye(3)))


class TestExpressivityGap:
    def test_full_rank_solves_any_targets(self):
        cfg = theory_config(m_h=8)
        params = init_params(cfg, seed=3)
        rng = np.random.default_rng(13)
        aug = AugmentationSet.random_unit(4, 4, rng)
        assert check_condition(aug)
        for _ in range(3):
            targets = rng.normal(size=4) * 5
            result = expressivity_gap(
                cfg, params, aug, targets, oracle_restarts=2, oracle_steps=200
            )
            assert result.rank_ok
            assert result.cn_residual <= 1e-8
            assert result.cn_residual <= result.joint_residual + 1e-8

    def test_zero_weights_are_degenerate(self):
        cfg = theory_config(m_h=4, n_layers=1)
        params = init_params(cfg, seed=0)
        for t in params.tensors:
            t.data[:] = 0.0
        aug = AugmentationSet(np.eye(4)[:2])
        result = expressivity_gap(cfg, params, aug, np.array([1.0, -1.0]),
                                  oracle_restarts=1, oracle_steps=50)
        assert not result.rank_ok
        assert result.rank == 0 or result.rank < aug.count

    def test_width_precondition(self):
        cfg = theory_config(m_h=2)
        with pytest.raises(ContractViolation):
            expressivity_gap(
                cfg, init_params(cfg, seed=0), AugmentationSet(np.eye(4)[:3, :4]),
                np.zeros(3),
            )


class TestCorollarySurvey:
    def test_perturbed_weights_are_full_rank(self):
        cfg = theory_config(m_h=8, n_layers=2)
        aug = AugmentationSet.random_unit(4, 4, np.random.default_rng(17))
        assert check_condition(aug)
        report = corollary_rank_survey(cfg, aug, n_draws=100, noise_std=0.1, seed=2)
        assert report["rank_ok"] >= 99
        assert report["residual_quantiles"]["max"] <= 1e-8
