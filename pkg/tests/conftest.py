"""Shared fixtures: tiny two-domain toy graphs and small trainer configs."""

from __future__ import annotations

import numpy as np
import pytest

from xdmatch.graph import (
    Domain,
    aligned_nodes,
    compute_edge_weights,
    load_network,
)
from xdmatch.losses import LossConfig
from xdmatch.training import TrainerConfig


def toy_records(seed: int, n_users: int = 4, n_items: int = 6, n_tags: int = 3):
    """Node/edge TSV lines for a random two-domain graph (10-30 nodes/domain).

    Users and tags share ids across domains (aligned); items are
    domain-prefixed.  Every user gets three weighted item edges and every
    item one tag edge, so nothing is isolated.
    """
    rng = np.random.default_rng(seed)
    nodes, edges = [], []
    for dom in ("source", "target"):
        users = [f"u{i}" for i in range(n_users)]
        items = [f"{dom[0]}i{i}" for i in range(n_items)]
        tags = [f"t{i}" for i in range(n_tags)]
        nodes += [f"user\t{u}\t{dom}" for u in users]
        nodes += [f"item\t{i}\t{dom}" for i in items]
        nodes += [f"tag\t{t}\t{dom}" for t in tags]
        for u in users:
            for i in rng.choice(n_items, size=min(3, n_items), replace=False):
                edges.append(
                    f"user\t{u}\titem\t{items[i]}\t{rng.integers(3, 9)}\t{dom}"
                )
        for i in items:
            edges.append(f"item\t{i}\ttag\t{tags[rng.integers(n_tags)]}\t1\t{dom}")
    return nodes, edges


def toy_graphs(seed: int, **kwargs):
    """(source_net, target_net, aligned) for one toy instance."""
    nodes, edges = toy_records(seed, **kwargs)
    nets = {}
    for dom in (Domain.SOURCE, Domain.TARGET):
        nets[dom] = compute_edge_weights(load_network(nodes, edges, dom))
    return (
        nets[Domain.SOURCE],
        nets[Domain.TARGET],
        aligned_nodes(nets[Domain.SOURCE], nets[Domain.TARGET]),
    )


def toy_trainer_config(seed: int = 0, **overrides) -> TrainerConfig:
    defaults = dict(
        epochs=1,
        steps_per_epoch=2,
        batch_size=8,
        fanouts=(3, 2),
        dim_in=6,
        dim_out=5,
        seed=seed,
        learning_rate=0.01,
        loss=LossConfig(negatives_per_anchor=3, batch_size=8),
    )
    defaults.update(overrides)
    return TrainerConfig(**defaults)


@pytest.fixture
def toy_pair():
    return toy_graphs(0)
