"""
MAP Fine-Tuning

Plain minibatch SGD on the LoRA parameters. The objective is the mean
cross-entropy plus (weight_decay / 2) * ||theta||^2, i.e. a Gaussian prior
whose precision is independent of the Laplace prior tuned afterwards.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from laplace_lora.config import TrainConfig
from laplace_lora.core.errors import BadLabel, Divergence
from laplace_lora.core.linalg import Matrix, Vector
from laplace_lora.core.lora_net import Dropout, LoraNetwork, backward, forward

logger = logging.getLogger("laplace-lora.train")


@dataclass
class Checkpoint:
    """
    Snapshot of the adapters during training

    Attributes:
        step: Number of SGD steps taken
        net: Network at this step (private copy)
        losses: Minibatch objective of every step since the previous checkpoint
    """

    step: int
    net: LoraNetwork
    losses: List[float] = field(default_factory=list)


def cross_entropy(logits: Vector, label: int) -> Tuple[float, Vector]:
    """Loss -log softmax(logits)[label] and its gradient softmax - onehot"""
    logits = np.asarray(logits, dtype=np.float64)
    n_classes = logits.shape[0]
    if not 0 <= int(label) < n_classes or int(label) != label:
        raise BadLabel(f"Label {label} outside [0, {n_classes})")
    loss = float(logsumexp(logits) - logits[int(label)])
    grad = softmax(logits)
    grad[int(label)] -= 1.0
    return loss, grad


def log_likelihood(net: LoraNetwork, features: Matrix, labels: np.ndarray) -> float:
    """Sum over the data of log p(label | x) without dropout"""
    total = 0.0
    for x, y in zip(features, labels):
        loss, _ = cross_entropy(forward(net, x).logits, int(y))
        total -= loss
    return total


def _objective(
    net: LoraNetwork,
    features: Matrix,
    labels: np.ndarray,
    dropout_rate: float,
    seeds: np.ndarray,
) -> Tuple[float, Vector]:
    loss = 0.0
    grad = np.zeros(net.n_params)
    for x, y, s in zip(features, labels, seeds):
        dropout = Dropout(dropout_rate, int(s)) if dropout_rate > 0.0 else None
        trace = forward(net, x, dropout)
        item_loss, grad_logits = cross_entropy(trace.logits, int(y))
        item_grad, _ = backward(net, trace, grad_logits)
        loss += item_loss
        grad += item_grad.theta
    n = len(labels)
    return loss / n, grad / n


def _diverged(
    step: int, current: LoraNetwork, pending: List[float], checkpoints: List[Checkpoint]
) -> Divergence:
    """Divergence carrying the last good parameters as its final checkpoint"""
    if not checkpoints or checkpoints[-1].step != step - 1:
        checkpoints.append(Checkpoint(step=step - 1, net=current, losses=pending))
    return Divergence(step, checkpoints)


def map_finetune(net: LoraNetwork, data, cfg: TrainConfig) -> List[Checkpoint]:
    """
    Train the adapters to a MAP estimate

    Args:
        net: Starting network; it is not mutated
        data: Dataset with features (N x d) and labels (N,)
        cfg: Training configuration

    Returns:
        Checkpoints every cfg.checkpoint_every steps plus the final step

    Raises:
        Divergence: The objective became non-finite; carries the checkpoints
            emitted so far plus one for the last finite state
    """
    features = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels)
    n = features.shape[0]
    if n == 0:
        raise ValueError("Training data is empty")

    rng = np.random.default_rng(cfg.seed)
    batch_size = min(cfg.batch_size, n)
    current = net.copy()
    theta = current.get_params().theta
    checkpoints: List[Checkpoint] = []
    pending: List[float] = []

    logger.info(
        f"Training MAP: D={theta.size} N={n} steps={cfg.steps} lr={cfg.lr} "
        f"batch={batch_size} wd={cfg.weight_decay} dropout={cfg.dropout_rate}"
    )
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=batch_size, replace=False)
        seeds = rng.integers(0, 2**31 - 1, size=batch_size)
        loss, grad = _objective(current, features[idx], labels[idx], cfg.dropout_rate, seeds)
        loss += 0.5 * cfg.weight_decay * float(theta @ theta)
        grad = grad + cfg.weight_decay * theta

        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            logger.warning(f"⚠️ Non-finite loss at step {step}, aborting")
            raise _diverged(step, current, pending, checkpoints)

        pending.append(loss)
        candidate = theta - cfg.lr * grad
        if not np.all(np.isfinite(candidate)):
            logger.warning(f"⚠️ Non-finite parameters at step {step}, aborting")
            raise _diverged(step, current, pending, checkpoints)
        theta = candidate
        current = current.with_params(theta)

        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            checkpoints.append(Checkpoint(step=step, net=current, losses=pending))
            logger.debug(f"Checkpoint at step {step}: loss={np.mean(pending):.6f}")
            pending = []

    logger.info(f"✅ Training finished after {cfg.steps} steps ({len(checkpoints)} checkpoints)")
    return checkpoints


def loss_curve(checkpoints: List[Checkpoint]) -> List[float]:
    """Per-step minibatch objective across a run"""
    return [loss for ckpt in checkpoints for loss in ckpt.losses]
