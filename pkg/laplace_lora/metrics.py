"""
Classification Metrics

Accuracy, mean negative log-likelihood and expected calibration error over
predictive probability vectors, plus a per-bin reliability table.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np
import pandas as pd

from laplace_lora.core.errors import BadLabel, DimMismatch

logger = logging.getLogger("laplace-lora.metrics")

PROB_FLOOR = 1e-12
BIN_EDGE_DECIMALS = 12
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class EvalRecords:
    """
    Predictive probabilities and true labels for a set of inputs

    Attributes:
        probs: N x C matrix, every row a probability vector
        labels: N class indices
    """

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if probs.shape[0] != labels.shape[0]:
            raise DimMismatch(f"{probs.shape[0]} probability rows for {labels.shape[0]} labels")
        if probs.shape[0] == 0:
            raise ValueError("Metrics need at least one record")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("Every row of probs must be a probability vector")
        if labels.min() < 0 or labels.max() >= probs.shape[1]:
            raise BadLabel(f"Labels must lie in [0, {probs.shape[1]})")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest index
        return self.probs.argmax(axis=1)


@dataclass(frozen=True)
class EceConfig:
    n_bins: int = 15

    def __post_init__(self) -> None:
        if self.n_bins < 1:
            raise ValueError("n_bins must be at least 1")


def accuracy(records: EvalRecords) -> float:
    return float(np.mean(records.predictions == records.labels))


def nll(records: EvalRecords) -> float:
    """Mean of -log p(label), probabilities floored at PROB_FLOOR"""
    p = records.probs[np.arange(records.size), records.labels]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def _bin_index(confidence: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin m holds (m/M, (m+1)/M]; confidence 0 falls in the first bin"""
    # rounding first keeps products like 0.2 * 15 = 3.0000000000000004 on their edge
    scaled = np.round(confidence * n_bins, BIN_EDGE_DECIMALS)
    return np.clip(np.ceil(scaled).astype(np.int64) - 1, 0, n_bins - 1)


def reliability_table(records: EvalRecords, cfg: EceConfig = EceConfig()) -> pd.DataFrame:
    """Per-bin count, accuracy and confidence; empty bins report zeros"""
    bins = _bin_index(records.confidence, cfg.n_bins)
    correct = (records.predictions == records.labels).astype(np.float64)
    counts = np.bincount(bins, minlength=cfg.n_bins)
    acc_sum = np.bincount(bins, weights=correct, minlength=cfg.n_bins)
    conf_sum = np.bincount(bins, weights=records.confidence, minlength=cfg.n_bins)
    nonzero = np.maximum(counts, 1)
    edges = np.arange(cfg.n_bins + 1) / cfg.n_bins
    return pd.DataFrame(
        {
            "lower": edges[:-1],
            "upper": edges[1:],
            "count": counts,
            "accuracy": np.where(counts > 0, acc_sum / nonzero, 0.0),
            "confidence": np.where(counts > 0, conf_sum / nonzero, 0.0),
        }
    )


def ece(records: EvalRecords, cfg: EceConfig = EceConfig()) -> float:
    """Sum over bins of (|B_m| / N) * |acc(B_m) - conf(B_m)|"""
    table = reliability_table(records, cfg)
    gaps = (table["accuracy"] - table["confidence"]).abs()
    return float(np.sum(table["count"] / records.size * gaps))


def evaluate(records: EvalRecords, cfg: EceConfig = EceConfig()) -> Dict[str, float]:
    """acc, ece and nll in one mapping"""
    scores = {"acc": accuracy(records), "ece": ece(records, cfg), "nll": nll(records)}
    if not all(math.isfinite(v) for v in scores.values()):
        logger.warning(f"⚠️ Non-finite metric values: {scores}")
    return scores
