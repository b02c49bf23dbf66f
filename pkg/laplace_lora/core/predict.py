"""
Linearized Predictive Posterior

The network is linearized in its adapters around the MAP, so the logits at
an input are Gaussian with mean f(x; theta_map) and covariance
Lambda = J Sigma J^T, where J is the n_classes x D Jacobian and Sigma the
posterior covariance.

Predictive probabilities from a LogitGaussian:
- bma_mc_joint: Monte Carlo average of softmax over full-covariance draws
- bma_mc_indep: same with the diagonal of Lambda only
- probit_predict: softmax(mu / sqrt(1 + pi/8 * diag(Lambda)))
- bridge_predict: mean of the Dirichlet matched to the logit Gaussian
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.special import softmax

from laplace_lora.config import Predictor
from laplace_lora.core.errors import LayoutMismatch, NonPositiveAlpha
from laplace_lora.core.laplace import LaplacePosterior
from laplace_lora.core.linalg import Matrix, Vector, cholesky
from laplace_lora.core.lora_net import LoraNetwork, logits_jacobian

logger = logging.getLogger("laplace-lora.predict")

PSD_TOL = 1e-8


@dataclass(frozen=True)
class LogitGaussian:
    """Gaussian over the logits of one input"""

    mu: Vector
    lambda_cov: Matrix

    @property
    def n_classes(self) -> int:
        return int(self.mu.shape[0])


@dataclass(frozen=True)
class PredictiveProbs:
    probs: Vector

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError(f"Not a probability vector: {p}")
        object.__setattr__(self, "probs", p)


def _simplex(p: Vector) -> PredictiveProbs:
    p = np.clip(p, 0.0, None)
    return PredictiveProbs(p / p.sum())


def logit_posterior(net: LoraNetwork, post: LaplacePosterior, x: Vector) -> LogitGaussian:
    """
    Linearized logit distribution at x

    For KFAC posteriors each block contributes
    (1/lambda) <G_i, G_j> - (1/lambda^2) vec(B^T G_i L)^T M^-1 vec(B^T G_j L)
    through the posterior's Woodbury solve; full and diagonal posteriors use
    J Sigma J^T directly.
    """
    layout = net.layout()
    for entry in post.layout.entries:
        try:
            own = layout.get(entry.id)
        except KeyError:
            raise LayoutMismatch(f"Network has no sublayer {entry.id}") from None
        if own.shape != entry.shape:
            raise LayoutMismatch(f"Sublayer {entry.id} shape {own.shape} != {entry.shape}")

    jac = logits_jacobian(net, x)
    j = jac.dense(post.sublayers)
    cov = j @ post.solve(j.T)
    cov = 0.5 * (cov + cov.T)
    return LogitGaussian(mu=jac.logits, lambda_cov=cov)


def bma_mc_joint(lg: LogitGaussian, n_samples: int = 1000, seed: int = 0) -> PredictiveProbs:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if not np.any(lg.lambda_cov):
        return PredictiveProbs(softmax(lg.mu))
    chol = cholesky(lg.lambda_cov)
    if chol.jitter > 0:
        logger.debug(f"Logit covariance needed jitter {chol.jitter:g}")
    xi = np.random.default_rng(seed).standard_normal((n_samples, lg.n_classes))
    logits = lg.mu + xi @ chol.lower.T
    return _simplex(softmax(logits, axis=1).mean(axis=0))


def bma_mc_indep(lg: LogitGaussian, n_samples: int = 1000, seed: int = 0) -> PredictiveProbs:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    std = np.sqrt(np.clip(np.diag(lg.lambda_cov), 0.0, None))
    if not np.any(std):
        return PredictiveProbs(softmax(lg.mu))
    xi = np.random.default_rng(seed).standard_normal((n_samples, lg.n_classes))
    logits = lg.mu + xi * std
    return _simplex(softmax(logits, axis=1).mean(axis=0))


def probit_predict(lg: LogitGaussian) -> PredictiveProbs:
    var = np.diag(lg.lambda_cov)
    if np.any(var < -PSD_TOL):
        raise ValueError("Logit variances must be non-negative")
    var = np.clip(var, 0.0, None)
    return _simplex(softmax(lg.mu / np.sqrt(1.0 + math.pi / 8.0 * var)))


def bridge_alpha(lg: LogitGaussian) -> Vector:
    """Dirichlet parameters matched to the logit Gaussian"""
    var = np.diag(lg.lambda_cov)
    if np.any(var <= 0):
        raise NonPositiveAlpha("Laplace bridge needs strictly positive logit variances")
    c = lg.n_classes
    mu = lg.mu - lg.mu.mean()
    alpha = (1.0 - 2.0 / c + np.exp(mu) / c**2 * np.sum(np.exp(-mu))) / var
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise NonPositiveAlpha(f"Laplace bridge produced alpha {alpha}")
    return alpha


def bridge_predict(lg: LogitGaussian) -> PredictiveProbs:
    alpha = bridge_alpha(lg)
    return _simplex(alpha / alpha.sum())


def predict_probs(
    lg: LogitGaussian, predictor: Predictor, n_samples: int = 1000, seed: int = 0
) -> PredictiveProbs:
    """Dispatch on the configured predictor"""
    predictor = Predictor(predictor)
    if predictor == Predictor.MC_JOINT:
        return bma_mc_joint(lg, n_samples, seed)
    if predictor == Predictor.MC_INDEP:
        return bma_mc_indep(lg, n_samples, seed)
    if predictor == Predictor.PROBIT:
        return probit_predict(lg)
    return bridge_predict(lg)


def predict_dataset(
    net: LoraNetwork,
    post: LaplacePosterior,
    features: Matrix,
    predictors: Optional[Dict[str, Predictor]] = None,
    n_samples: int = 1000,
    seed: int = 0,
) -> Dict[str, Matrix]:
    """
    Predictive probabilities for every row under several predictors

    The logit Gaussian of each input is computed once and shared. Each input
    gets its own sampling seed derived from seed.

    Returns:
        Mapping from the caller's predictor label to an N x C matrix
    """
    predictors = predictors or {"default": Predictor.MC_JOINT}
    features = np.asarray(features, dtype=np.float64)
    out = {name: np.zeros((features.shape[0], net.n_classes)) for name in predictors}
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=features.shape[0])
    for n, x in enumerate(features):
        lg = logit_posterior(net, post, x)
        for name, predictor in predictors.items():
            out[name][n] = predict_probs(lg, predictor, n_samples, int(seeds[n])).probs
    return out

