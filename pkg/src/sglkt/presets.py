"""Desk-scale experiment settings shared by the scripts and the acceptance suite."""

from dataclasses import replace

from .config import TrainConfig
from .data import GeneratorConfig

TRAIN_DIALOGS = 2000
VAL_DIALOGS = 200
GRAPH_MODE_ORDER = ("sgl", "sparse_hard", "dense", "edgeless")


def desk_generator(**overrides):
    """Default synthetic world: switch 0.3, revisit 0.1, noise 0.3."""
    return replace(GeneratorConfig(), **overrides)


def desk_train_config(**overrides):
    """Full schedule and architecture at a width that trains in minutes on one core.

    The straight-through edge gradient from the answer loss is clipped; without
    it the learned structure collapses at the peak learning rate.
    """
    base = TrainConfig(d_h=16, heads=2, steps=2, tau=0.5, lam=10.0, edge_grad_clip=0.1, epochs=20, seed=0)
    return replace(base, **overrides).validate()
