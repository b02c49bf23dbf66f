#!/usr/bin/env python3
"""
Test the linearized predictive and the four probability constructions
"""

import math

import numpy as np
import pytest
from scipy.special import softmax

from laplace_lora.config import Activation, FisherVariant, Predictor, Scope
from laplace_lora.core.curvature import DiagFisher, accumulate_kfac, exact_fisher
from laplace_lora.core.errors import LayoutMismatch, NonPositiveAlpha
from laplace_lora.core.laplace import LaplacePosterior, build_posterior, scope_sublayers
from laplace_lora.core.lora_net import logits_jacobian
from laplace_lora.core.predict import (
    LogitGaussian,
    PredictiveProbs,
    bma_mc_indep,
    bma_mc_joint,
    bridge_alpha,
    bridge_predict,
    logit_posterior,
    predict_dataset,
    predict_probs,
    probit_predict,
)
from tests.helpers import perturbed_net, toy_dataset

X = np.array([0.4, -0.8, 1.3])


@pytest.fixture
def kfac_post(net, data):
    return build_posterior(net, accumulate_kfac(net, data, n_kfac=36), prior_precision=0.5)


HIDDEN_SHAPES = [(5,), (4, 6), (6, 3, 4), (7,)]


def _oracle_net(seed):
    """Toy net number seed: widths, depth, activation, rank and sizes all vary"""
    return perturbed_net(
        hidden=HIDDEN_SHAPES[seed % 4],
        input_dim=2 + seed % 3,
        n_classes=2 + (seed // 2) % 3,
        rank=1 + seed % 2,
        seed=seed,
        activation=Activation.RELU if (seed // 4) % 2 else Activation.TANH,
    )


def _random_lg(c=4, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((c, c))
    return LogitGaussian(mu=rng.standard_normal(c), lambda_cov=scale * (g @ g.T))


class TestLogitPosterior:
    def test_kfac_matches_dense_oracle(self, net, kfac_post):
        lg = logit_posterior(net, kfac_post, X)
        j = logits_jacobian(net, X).dense()
        precision = kfac_post.fisher.dense() + np.diag(kfac_post.prior_vector())
        expected = j @ np.linalg.solve(precision, j.T)
        np.testing.assert_allclose(lg.lambda_cov, expected, rtol=1e-6, atol=1e-12)
        np.testing.assert_array_equal(lg.mu, logits_jacobian(net, X).logits)

    @pytest.mark.parametrize("seed", range(20))
    def test_kfac_matches_dense_oracle_on_random_nets(self, seed):
        net = _oracle_net(seed)
        assert net.n_params <= 200
        data = toy_dataset(n=10, input_dim=net.input_dim, n_classes=net.n_classes, seed=seed)
        post = build_posterior(net, accumulate_kfac(net, data, n_kfac=64), prior_precision=0.7)
        x = np.random.default_rng(seed).standard_normal(net.input_dim)
        j = logits_jacobian(net, x).dense()
        precision = post.fisher.dense() + np.diag(post.prior_vector())
        expected = j @ np.linalg.solve(precision, j.T)
        np.testing.assert_allclose(
            logit_posterior(net, post, x).lambda_cov, expected, rtol=1e-6, atol=1e-10
        )

    def test_covariance_is_psd(self, net, kfac_post):
        lg = logit_posterior(net, kfac_post, X)
        assert np.linalg.eigvalsh(lg.lambda_cov).min() >= -1e-8

    def test_zero_curvature_is_prior_only(self, net):
        layout = net.layout()
        post = LaplacePosterior(
            theta_map=net.get_params(),
            fisher=DiagFisher(np.zeros(layout.size), layout),
            prior_precision=np.full(len(layout.ids), 4.0),
        )
        j = logits_jacobian(net, X).dense()
        np.testing.assert_allclose(logit_posterior(net, post, X).lambda_cov, j @ j.T / 4.0)

    def test_last_layer_uses_last_layer_columns(self, net, data):
        ids = scope_sublayers(net, Scope.LLLA)
        post = build_posterior(net, exact_fisher(net, data, ids), Scope.LLLA, 2.0)
        j = logits_jacobian(net, X).dense(ids)
        expected = j @ post.covariance_dense() @ j.T
        np.testing.assert_allclose(logit_posterior(net, post, X).lambda_cov, expected, rtol=1e-10)

    def test_layout_mismatch(self, net, data):
        deeper = perturbed_net(hidden=(4, 4))
        ids = scope_sublayers(deeper, Scope.LLLA)
        post = build_posterior(deeper, exact_fisher(deeper, data, ids), Scope.LLLA)
        with pytest.raises(LayoutMismatch):
            logit_posterior(net, post, X)

    def test_shape_mismatch(self, net, data):
        wider = perturbed_net(hidden=(6,))
        post = build_posterior(wider, exact_fisher(wider, data), Scope.LA)
        with pytest.raises(LayoutMismatch):
            logit_posterior(net, post, X)


class TestZeroCovariance:
    lg = LogitGaussian(mu=np.array([1.0, -0.5, 2.0]), lambda_cov=np.zeros((3, 3)))

    def test_mc_joint(self):
        np.testing.assert_array_equal(bma_mc_joint(self.lg).probs, softmax(self.lg.mu))

    def test_mc_indep(self):
        np.testing.assert_array_equal(bma_mc_indep(self.lg).probs, softmax(self.lg.mu))

    def test_probit(self):
        np.testing.assert_allclose(probit_predict(self.lg).probs, softmax(self.lg.mu), rtol=1e-12)

    def test_bridge_refuses(self):
        with pytest.raises(NonPositiveAlpha):
            bridge_predict(self.lg)


class TestMonteCarlo:
    def test_symmetric_binary(self):
        n = 4000
        lg = LogitGaussian(mu=np.zeros(2), lambda_cov=np.array([[2.0, 0.5], [0.5, 1.0]]))
        probs = bma_mc_joint(lg, n_samples=n, seed=1).probs
        assert abs(probs[0] - 0.5) < 3 / math.sqrt(n)

    def test_deterministic_in_seed(self):
        lg = _random_lg()
        np.testing.assert_array_equal(bma_mc_joint(lg, 50, 7).probs, bma_mc_joint(lg, 50, 7).probs)

    def test_self_convergence(self):
        lg = _random_lg(seed=3)
        coarse = bma_mc_joint(lg, 10_000, 0).probs
        fine = bma_mc_joint(lg, 100_000, 1).probs
        assert np.max(np.abs(coarse - fine)) < 0.01

    def test_diagonal_covariance_joint_equals_indep(self):
        lg = LogitGaussian(mu=np.array([0.3, -1.0, 0.8]), lambda_cov=np.diag([0.5, 2.0, 1.0]))
        np.testing.assert_allclose(
            bma_mc_joint(lg, 500, 4).probs, bma_mc_indep(lg, 500, 4).probs, rtol=1e-12
        )

    def test_correlations_matter(self):
        cov = 4.0 * np.array([[1.0, 0.99, -0.99], [0.99, 1.0, -0.99], [-0.99, -0.99, 1.0]])
        lg = LogitGaussian(mu=np.array([1.0, 0.0, -1.0]), lambda_cov=cov)
        n = 20_000
        joint = bma_mc_joint(lg, n, 0).probs
        indep = bma_mc_indep(lg, n, 0).probs
        assert np.max(np.abs(joint - indep)) > 3 / math.sqrt(n)

    def test_sample_count(self):
        with pytest.raises(ValueError):
            bma_mc_joint(_random_lg(), 0)


class TestProbit:
    def test_binary_hand_value(self):
        lg = LogitGaussian(mu=np.array([1.0, -1.0]), lambda_cov=np.eye(2))
        scale = 1.0 / math.sqrt(1.0 + math.pi / 8.0)
        p0 = 1.0 / (1.0 + math.exp(-2.0 * scale))
        np.testing.assert_allclose(probit_predict(lg).probs, [p0, 1.0 - p0], rtol=1e-12)

    def test_zero_mean_is_uniform(self):
        lg = LogitGaussian(mu=np.zeros(4), lambda_cov=_random_lg().lambda_cov)
        np.testing.assert_allclose(probit_predict(lg).probs, np.full(4, 0.25), rtol=1e-12)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            probit_predict(LogitGaussian(mu=np.zeros(2), lambda_cov=-np.eye(2)))


class TestBridge:
    def test_symmetric_binary(self):
        lg = LogitGaussian(mu=np.zeros(2), lambda_cov=np.eye(2))
        np.testing.assert_allclose(bridge_alpha(lg), [0.5, 0.5], rtol=1e-15)
        np.testing.assert_allclose(bridge_predict(lg).probs, [0.5, 0.5], rtol=1e-15)

    def test_variance_scaling(self):
        lg = LogitGaussian(mu=np.zeros(3), lambda_cov=np.eye(3))
        scaled = LogitGaussian(mu=np.zeros(3), lambda_cov=5.0 * np.eye(3))
        np.testing.assert_allclose(bridge_alpha(scaled), bridge_alpha(lg) / 5.0, rtol=1e-14)
        np.testing.assert_allclose(bridge_predict(scaled).probs, bridge_predict(lg).probs)

    def test_direct_formula(self):
        lg = _random_lg(seed=9)
        var = np.diag(lg.lambda_cov)
        mu = lg.mu - lg.mu.mean()
        c = 4
        expected = np.array(
            [
                (1.0 - 2.0 / c + math.exp(mu[i]) / c**2 * sum(math.exp(-m) for m in mu)) / var[i]
                for i in range(c)
            ]
        )
        np.testing.assert_allclose(bridge_alpha(lg), expected, rtol=1e-12)
        np.testing.assert_allclose(bridge_predict(lg).probs, expected / expected.sum(), rtol=1e-12)

    def test_mean_shift_invariance(self):
        lg = _random_lg(seed=2)
        moved = LogitGaussian(mu=lg.mu + 3.0, lambda_cov=lg.lambda_cov)
        np.testing.assert_allclose(bridge_alpha(moved), bridge_alpha(lg), rtol=1e-12)


class TestInfinitePrior:
    @pytest.mark.parametrize(
        "predictor", [Predictor.MC_JOINT, Predictor.MC_INDEP, Predictor.PROBIT]
    )
    def test_converges_to_map(self, net, data, predictor):
        post = build_posterior(net, exact_fisher(net, data), prior_precision=1e9)
        probs = predict_probs(logit_posterior(net, post, X), predictor, n_samples=1000)
        map_probs = softmax(logits_jacobian(net, X).logits)
        assert np.max(np.abs(probs.probs - map_probs)) < 1e-3


class TestPredictDataset:
    def test_shapes_and_simplex(self, net, kfac_post, test_data):
        predictors = {p.value: p for p in Predictor}
        out = predict_dataset(net, kfac_post, test_data.features, predictors, 200, seed=3)
        assert set(out) == set(predictors)
        for probs in out.values():
            assert probs.shape == (len(test_data.features), 3)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(probs >= 0)

    def test_deterministic(self, net, kfac_post, test_data):
        first = predict_dataset(net, kfac_post, test_data.features, n_samples=100, seed=5)
        second = predict_dataset(net, kfac_post, test_data.features, n_samples=100, seed=5)
        np.testing.assert_array_equal(first["default"], second["default"])

    def test_variant_recorded(self, kfac_post):
        assert kfac_post.variant == FisherVariant.KFAC


def test_predictive_probs_validation():
    PredictiveProbs(np.array([0.25, 0.75]))
    with pytest.raises(ValueError):
        PredictiveProbs(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        PredictiveProbs(np.array([-0.1, 1.1]))
