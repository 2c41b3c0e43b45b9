"""Small builders shared by the test modules."""
from __future__ import annotations

import math

import numpy as np

from gvf_acc.cumulants import CAR_ZONE, CumulantKind
from gvf_acc.learner import FEATURES_BY_KIND, GvfModel, Question
from gvf_acc.network import DenseNet
from gvf_acc.sim import SimConfig

# Lines reported by the acceptance suite; printed in the terminal summary.
ACCEPTANCE_LINES: list = []


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def constant_model(kind, value: float, gamma: float = 0.95) -> GvfModel:
    """A model whose prediction is ``value`` for every input (zero weights, tuned bias)."""
    kind = CumulantKind(kind)
    names = FEATURES_BY_KIND[kind]
    cfg = SimConfig()
    if kind is CumulantKind.SPEED:
        net = DenseNet((len(names) + 1, 1), "identity")
        net.biases[-1][0] = value / cfg.speed_scale
        scale = cfg.speed_scale
    else:
        net = DenseNet((len(names) + 1, 1), "sigmoid")
        net.biases[-1][0] = _logit(value)
        scale = 1.0
    return GvfModel(net, Question(kind, gamma), CAR_ZONE, names, cfg.feature_scaling(), scale)


def random_net(rng: np.random.Generator, sizes, activation: str = "sigmoid") -> DenseNet:
    net = DenseNet.initialize(sizes, rng, activation)
    net.params += rng.normal(0.0, 0.1, size=net.params.size)
    return net
