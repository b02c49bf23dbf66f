"""Builders shared by the test modules"""

import numpy as np

from laplace_lora.config import Activation, NetworkConfig, load_config
from laplace_lora.core.lora_net import LoraNetwork, init_network
from laplace_lora.data import Dataset, Split


def perturbed_net(
    hidden=(5,),
    input_dim=3,
    n_classes=3,
    rank=2,
    alpha=4.0,
    seed=0,
    scale=0.5,
    activation=Activation.TANH,
) -> LoraNetwork:
    """Network whose adapters are random (b is zero straight after init)"""
    cfg = NetworkConfig(
        hidden=list(hidden),
        rank=rank,
        alpha=alpha,
        activation=activation,
        input_dim=input_dim,
        n_classes=n_classes,
    )
    net = init_network(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    return net.with_params(scale * rng.standard_normal(net.n_params))


def toy_dataset(n=12, input_dim=3, n_classes=3, seed=0, split=Split.TRAIN) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    features = rng.standard_normal((n, input_dim)) + labels[:, None]
    return Dataset(features=features, labels=labels, n_classes=n_classes, split=split)


TINY_OVERRIDES = [
    "task.n_per_class=10",
    "task.n_test_per_class=10",
    "network.hidden=8",
    "train.steps=40",
    "train.checkpoint_every=20",
    "laplace.scopes=LLLA",
    "laplace.evidence_steps=5",
    "predict.n_samples=50",
    "baselines.mc_dropout_samples=3",
    "baselines.deep_ensemble=false",
]


def tiny_config(out_dir, *extra):
    """A configuration that trains and evaluates in about a second"""
    return load_config(None, [*TINY_OVERRIDES, f"experiment.output_dir={out_dir}", *extra])
