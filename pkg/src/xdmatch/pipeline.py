"""End-to-end wiring: files -> graphs -> training -> index -> evaluation."""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from . import evaluation
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import ABLATION_VARIANTS, EvalReport, run_eval
from .graph import (
    ALIGNABLE_KINDS,
    Domain,
    NodeKind,
    PreferenceNetwork,
    aligned_nodes,
    compute_edge_weights,
    iter_lines,
    load_network,
)
from .losses import LossConfig
from .retrieval import RetrievalIndex, build_index
from .training import Model, TrainerConfig, compute_all_embeddings, train


def load_graphs(
    data_dir: str, min_ui_count: int = 3, smoothing: float = 0.1
) -> tuple[PreferenceNetwork, PreferenceNetwork, list[tuple[NodeKind, str]]]:
    nodes_path = os.path.join(data_dir, "nodes.tsv")
    edges_path = os.path.join(data_dir, "edges.tsv")
    nets = {}
    for domain in (Domain.SOURCE, Domain.TARGET):
        net = load_network(
            iter_lines(nodes_path), iter_lines(edges_path), domain, min_ui_count
        )
        nets[domain] = compute_edge_weights(net, smoothing)
    aligned = aligned_nodes(nets[Domain.SOURCE], nets[Domain.TARGET])
    return nets[Domain.SOURCE], nets[Domain.TARGET], aligned


def train_model(
    data_dir: str,
    cfg: TrainerConfig,
    checkpoint_path: str | None = None,
    log_stream=None,
):
    source_net, target_net, aligned = load_graphs(data_dir)
    model, history = train(
        source_net, target_net, aligned, cfg, log_stream=log_stream
    )
    if checkpoint_path is not None:
        save_checkpoint(
            model, {"source": source_net, "target": target_net}, checkpoint_path
        )
    return model, history, (source_net, target_net, aligned)


def final_embeddings(
    model: Model,
    source_net: PreferenceNetwork,
    target_net: PreferenceNetwork,
    fanouts: tuple[int, int],
    seed: int,
) -> dict[str, np.ndarray]:
    return {
        "source": compute_all_embeddings(model.source, source_net, fanouts, seed),
        "target": compute_all_embeddings(model.target, target_net, fanouts, seed + 1),
    }


def assemble_index(
    source_net: PreferenceNetwork,
    target_net: PreferenceNetwork,
    embeddings: dict[str, np.ndarray],
    k: int = 100,
) -> RetrievalIndex:
    """Exact top-k index over all active anchors of both domains.

    When a (kind, id) exists in both domains, alignable anchor kinds
    (users and taxonomies) take the source-domain embedding: the source
    side is the data-rich one, and the cross-domain neighbor loss pulls
    exactly those source anchors toward their target-item neighbors.
    Items keep the target-domain embedding (they are the corpus).  Nodes
    without any edge are considered untrained and are not indexed.
    """
    anchors: list[tuple[NodeKind, str]] = []
    vecs: list[np.ndarray] = []
    ranked: dict[tuple[NodeKind, str], np.ndarray] = {}
    for name, net in (("target", target_net), ("source", source_net)):
        emb = embeddings[name]
        prefer_source = name == "source"
        for i, node in enumerate(net.nodes):
            key = (node.kind, node.external_id)
            if net.degree(i) == 0:
                continue
            if key in ranked and not (
                prefer_source and node.kind in ALIGNABLE_KINDS
            ):
                continue
            ranked[key] = emb[i]
    for key in sorted(ranked, key=lambda k: (k[0].value, k[1])):
        anchors.append(key)
        vecs.append(ranked[key])

    item_idx = target_net.indices_of_kind(NodeKind.ITEM)
    item_ids = [target_net.nodes[i].external_id for i in item_idx]
    item_vecs = embeddings["target"][item_idx]
    if not anchors:
        return RetrievalIndex(k=k)
    return build_index(anchors, np.vstack(vecs), item_ids, item_vecs, k=k)


def index_from_checkpoint(
    data_dir: str,
    checkpoint_path: str,
    fanouts: tuple[int, int],
    seed: int,
    k: int = 100,
) -> tuple[RetrievalIndex, list[str]]:
    source_net, target_net, _ = load_graphs(data_dir)
    model, _ = load_checkpoint(checkpoint_path)
    emb = final_embeddings(model, source_net, target_net, fanouts, seed)
    index = assemble_index(source_net, target_net, emb, k=k)
    corpus = [
        target_net.nodes[i].external_id
        for i in target_net.indices_of_kind(NodeKind.ITEM)
    ]
    return index, corpus


def evaluate_dataset(
    data_dir: str,
    index: RetrievalIndex,
    corpus_ids: list[str],
    mode: str,
    channel_weights: dict[str, float] | None = None,
):
    instances = evaluation.load_test_instances(
        os.path.join(data_dir, "test_instances.jsonl")
    )
    target_items = set(corpus_ids)
    return run_eval(
        index,
        instances,
        corpus_ids,
        mode=mode,
        target_item_ids=target_items,
        channel_weights=channel_weights,
    )


def compact_trainer_config(seed: int = 0, steps: int = 400) -> TrainerConfig:
    """Trainer settings sized for one desktop core at the default data scale.

    Small dims and fanouts with a large batch keep per-node visit counts
    high enough for the contrastive geometry to form within a few hundred
    steps; float32 and the low temperature are throughput/contrast tuning.
    """
    return TrainerConfig(
        epochs=1,
        steps_per_epoch=steps,
        batch_size=1024,
        fanouts=(4, 2),
        dim_in=12,
        dim_out=8,
        seed=seed,
        learning_rate=0.05,
        layer_init_scale=8.0,
        param_dtype="float32",
        loss=LossConfig(
            negatives_per_anchor=3,
            batch_size=1024,
            tau=0.2,
            neighbor_pairs_per_step=1024,
            neighbor_pos_fanout=2,
        ),
    )


def run_single(
    data_dir: str,
    cfg: TrainerConfig,
    mode: str,
    channel_weights: dict[str, float] | None = None,
    untrained: bool = False,
) -> EvalReport:
    """Train (or skip, for the frozen-random baseline) and evaluate."""
    source_net, target_net, aligned = load_graphs(data_dir)
    if untrained:
        model = Model.init(source_net, target_net, cfg)
    else:
        model, _ = train(source_net, target_net, aligned, cfg)
    emb = final_embeddings(model, source_net, target_net, cfg.fanouts, cfg.seed)
    index = assemble_index(source_net, target_net, emb)
    corpus = [
        target_net.nodes[i].external_id
        for i in target_net.indices_of_kind(NodeKind.ITEM)
    ]
    report, _ = evaluate_dataset(data_dir, index, corpus, mode, channel_weights)
    return report


def ablation_config(base: TrainerConfig, variant: str, mode: str) -> TrainerConfig | None:
    """Trainer config for one ablation row; None marks an N/A cell."""
    overrides = ABLATION_VARIANTS[variant]
    if mode == "strict_cold_start" and variant == "no_inter_u":
        return None  # the user loss is already skipped in strict cold-start
    loss = replace(base.loss, **overrides)
    return replace(base, loss=loss, strict_cold_start=(mode == "strict_cold_start"))


def run_ablations(
    data_dirs: dict[str, str],
    base: TrainerConfig,
    variants: list[str],
    seeds: list[int],
) -> list[dict]:
    """Train and evaluate every (variant, mode, seed) cell."""
    rows = []
    for mode, data_dir in data_dirs.items():
        for variant in variants:
            for seed in seeds:
                cfg = ablation_config(base, variant, mode)
                if cfg is None:
                    rows.append(
                        {
                            "variant": variant,
                            "mode": mode,
                            "seed": seed,
                            "hit": {str(n): None for n in evaluation.HIT_NS},
                            "item_coverage": None,
                        }
                    )
                    continue
                cfg = replace(cfg, seed=seed)
                report = run_single(data_dir, cfg, mode)
                rows.append(
                    {
                        "variant": variant,
                        "mode": mode,
                        "seed": seed,
                        "hit": {str(n): report.hit[n] for n in evaluation.HIT_NS},
                        "item_coverage": report.coverage,
                    }
                )
    return rows
