"""
Baseline Predictors

Temperature scaling, MC dropout, checkpoint ensemble and deep ensemble.
Ensembles average probabilities, never logits.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, softmax

from laplace_lora.core.lora_net import LoraNetwork, predict_logits
from laplace_lora.core.linalg import Matrix, Vector
from laplace_lora.core.predict import PredictiveProbs
from laplace_lora.data import ensure_tuning_split

logger = logging.getLogger("laplace-lora.baselines")

LOG_T_BOUNDS = (-4.0, 4.0)
LOG_T_TOL = 1e-5


@dataclass(frozen=True)
class Temperature:
    t: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t) and self.t > 0):
            raise ValueError(f"Temperature must be finite and positive, got {self.t}")

    def apply(self, logits: Matrix) -> Matrix:
        return softmax(np.asarray(logits) / self.t, axis=-1)


def temperature_nll(logits: Matrix, labels: np.ndarray, t: float) -> float:
    # softplus of the log-sum of the other classes' gaps keeps resolution when
    # the true class dominates and 1 - p underflows
    z = logits / t
    rows = np.arange(labels.size)
    gaps = z - z[rows, labels][:, None]
    gaps[rows, labels] = -np.inf
    return float(np.mean(np.logaddexp(0.0, logsumexp(gaps, axis=1))))


def temp_fit(logits: Matrix, labels: np.ndarray, init_t: float = 1.0) -> Temperature:
    """
    Fit a temperature on held-out logits by bounded 1-D search over log t

    The search uses scipy's bounded scalar minimizer on [-4, 4]. Both bounds
    and init_t are scored as well and the best of them wins, so a monotone
    objective ends on its bound.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels).astype(np.int64)
    if logits.shape[0] == 0:
        raise ValueError("Temperature fitting needs validation logits")

    result = minimize_scalar(
        lambda log_t: temperature_nll(logits, labels, math.exp(log_t)),
        bounds=LOG_T_BOUNDS,
        method="bounded",
        options={"xatol": LOG_T_TOL},
    )
    baseline = temperature_nll(logits, labels, init_t)
    candidates = [init_t, math.exp(float(result.x))]
    candidates += [math.exp(b) for b in LOG_T_BOUNDS]
    t = min(candidates, key=lambda c: temperature_nll(logits, labels, c))
    logger.info(f"Temperature fitted: t={t:.4f} (val NLL {baseline:.4f} at t={init_t})")
    return Temperature(t)


def temp_fit_dataset(net: LoraNetwork, data) -> Temperature:
    """temp_fit on the network's logits for a validation dataset"""
    ensure_tuning_split(data)
    return temp_fit(predict_logits(net, data.features), data.labels)


def mc_dropout_predict(
    net: LoraNetwork, x: Vector, rate: float = 0.1, n: int = 10, seed: int = 0
) -> PredictiveProbs:
    """Mean softmax over n passes with independent dropout masks"""
    features = np.tile(np.asarray(x, dtype=np.float64), (n, 1))
    logits = predict_logits(net, features, dropout_rate=rate, seed=seed)
    return PredictiveProbs(_normalize(softmax(logits, axis=1).mean(axis=0)))


def mc_dropout_probs(
    net: LoraNetwork, features: Matrix, rate: float = 0.1, n: int = 10, seed: int = 0
) -> Matrix:
    """mc_dropout_predict for every row, each with its own derived seed"""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=len(features))
    return np.vstack(
        [mc_dropout_predict(net, x, rate, n, int(s)).probs for x, s in zip(features, seeds)]
    )


def _ensemble(nets: Sequence[LoraNetwork], features: Matrix) -> Matrix:
    if not nets:
        raise ValueError("An ensemble needs at least one member")
    probs = [softmax(predict_logits(net, features), axis=1) for net in nets]
    return np.mean(probs, axis=0)


def checkpoint_ensemble_predict(nets: Sequence[LoraNetwork], x: Vector) -> PredictiveProbs:
    """Average over the given checkpoints (callers pass the most recent ones)"""
    return PredictiveProbs(_normalize(_ensemble(nets, np.atleast_2d(x))[0]))


def deep_ensemble_predict(nets: Sequence[LoraNetwork], x: Vector) -> PredictiveProbs:
    return PredictiveProbs(_normalize(_ensemble(nets, np.atleast_2d(x))[0]))


def ensemble_probs(nets: Sequence[LoraNetwork], features: Matrix) -> Matrix:
    """Averaged probabilities for every row; used by both ensemble baselines"""
    return _ensemble(nets, np.atleast_2d(features))


def _normalize(p: Vector) -> Vector:
    return p / p.sum()
