"""Scalar training losses over aggregated node representations.

Five losses feed the multi-task objective: a neighbor-similarity loss per
domain (bounded negative-sampling form over raw dot products), an
intra-domain contrastive loss between two neighborhood-sample views, and
three cross-domain contrastive losses (aligned users, aligned taxonomies,
and neighbors of aligned nodes), all cosine InfoNCE.  Every loss averages
over anchors so the task weights stay batch-size independent, and returns
exactly 0 with a skip flag when its eligible set is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import NodeKind

TAXONOMY_KINDS = (NodeKind.TAG, NodeKind.CATEGORY, NodeKind.WORD)


@dataclass
class LossConfig:
    lambda1: float = 1.0  # source neighbor-similarity
    lambda2: float = 1.0  # target neighbor-similarity
    lambda3: float = 1.5  # intra-domain contrast
    lambda4: float = 0.6  # cross-domain contrast
    tau: float = 1.0
    tau_by_kind: dict[NodeKind, float] = field(default_factory=dict)
    negatives_per_anchor: int = 10
    batch_size: int = 4096
    neighbor_pos_fanout: int = 5  # positives per aligned anchor, per step
    neighbor_pairs_per_step: int | None = None  # None: batch_size // fanout
    negative_skew: float = 0.0  # negative pools ~ degree^skew (0 = uniform)
    literal_neighbor_loss: bool = False  # unbounded as-printed variant
    enable_inter_user: bool = True
    enable_inter_taxonomy: bool = True
    enable_inter_neighbor: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be >= 1")

    def tau_for(self, kind: NodeKind) -> float:
        return self.tau_by_kind.get(kind, self.tau)


@dataclass
class LossResult:
    value: float
    skipped: bool = False


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    # -softplus(-x), stable on both tails
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), 1.0 - 1.0 / (1.0 + np.exp(-np.abs(x))))


# -- neighbor-similarity (SGNS-form) loss ------------------------------------


def sgns_terms(
    pos_dots: np.ndarray, neg_dots: np.ndarray, literal: bool = False
) -> np.ndarray:
    """Per-anchor loss from positive dot (B,) and negative dots (B, K)."""
    if literal:
        return log_sigmoid(neg_dots).sum(axis=1) - log_sigmoid(pos_dots)
    return -log_sigmoid(pos_dots) - log_sigmoid(-neg_dots).sum(axis=1)


def sgns_dot_grads(
    pos_dots: np.ndarray, neg_dots: np.ndarray, literal: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """d(per-anchor loss)/d(dot) for positives and negatives."""
    if literal:
        return _sigmoid(pos_dots) - 1.0, 1.0 - _sigmoid(neg_dots)
    return _sigmoid(pos_dots) - 1.0, _sigmoid(neg_dots)


def neighbor_similarity_loss(
    anchors: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    literal: bool = False,
) -> LossResult:
    """Mean over anchors of -log s(e_i.e_k) - sum_j log s(-e_i.e_j)."""
    if len(anchors) == 0:
        return LossResult(0.0, skipped=True)
    pos_dots = np.einsum("bd,bd->b", anchors, positives)
    neg_dots = np.einsum("bd,bkd->bk", anchors, negatives)
    return LossResult(float(sgns_terms(pos_dots, neg_dots, literal).mean()))


# -- InfoNCE -----------------------------------------------------------------


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return np.einsum("...d,...d->...", a, b) / (na * nb)


def infonce(
    anchor: np.ndarray, positive: np.ndarray, negatives: np.ndarray, tau: float
) -> float:
    """-log softmax mass of the positive among positive + negatives."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    sims = np.concatenate(
        ([cosine_rows(anchor, positive)], cosine_rows(anchor[None, :], negatives))
    )
    z = sims / tau
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[0])


def infonce_rows(
    anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float
) -> np.ndarray:
    """Per-anchor InfoNCE for (B,d), (B,d), (B,K,d) inputs."""
    s_pos = cosine_rows(anchors, positives)
    s_neg = cosine_rows(anchors[:, None, :], negatives)
    z = np.concatenate((s_pos[:, None], s_neg), axis=1) / tau
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - z[:, 0]


def infonce_grads(
    anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean InfoNCE and its gradients w.r.t. the raw (unnormalized) inputs."""
    B = anchors.shape[0]
    na = np.linalg.norm(anchors, axis=1, keepdims=True)
    a_hat = anchors / na
    cat = np.concatenate((positives[:, None, :], negatives), axis=1)  # (B, 1+K, d)
    nc = np.linalg.norm(cat, axis=2, keepdims=True)
    c_hat = cat / nc
    sims = np.einsum("bd,bkd->bk", a_hat, c_hat)  # (B, 1+K)
    z = sims / tau
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    w = ez / ez.sum(axis=1, keepdims=True)
    loss = float((np.log(ez.sum(axis=1)) + m[:, 0] - z[:, 0]).mean())

    g_sim = w.copy()
    g_sim[:, 0] -= 1.0
    g_sim /= tau * B  # mean over anchors
    # d sim/d anchor = (c_hat - sim * a_hat) / |a|
    g_anchor = (
        np.einsum("bk,bkd->bd", g_sim, c_hat) - (g_sim * sims).sum(axis=1)[:, None] * a_hat
    ) / na
    # d sim/d cat_k = (a_hat - sim * c_hat) / |c|
    g_cat = g_sim[:, :, None] * (a_hat[:, None, :] - sims[:, :, None] * c_hat) / nc
    return loss, g_anchor, g_cat[:, 0, :], g_cat[:, 1:, :]


# -- batch assembly over graphs and vector maps ------------------------------


def sample_batch_negatives(
    batch: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """(batch, k) indices into the batch, never the anchor's own row."""
    if batch < 2:
        raise ValueError("need at least 2 batch members to draw negatives")
    idx = rng.integers(0, batch - 1, size=(batch, k))
    rows = np.arange(batch)[:, None]
    return idx + (idx >= rows)


def intra_cl_loss(
    view1: np.ndarray,
    view2: np.ndarray,
    cfg: LossConfig,
    rng: np.random.Generator,
) -> LossResult:
    """InfoNCE between two augmentation views of the same batch.

    Anchor i's positive is its own second view; negatives are other batch
    members' second views, ``negatives_per_anchor`` of them per anchor.
    """
    B = view1.shape[0]
    if B == 0:
        return LossResult(0.0, skipped=True)
    if B < cfg.negatives_per_anchor + 1:
        raise ValueError(
            f"batch of {B} too small for {cfg.negatives_per_anchor} negatives"
        )
    neg_idx = sample_batch_negatives(B, cfg.negatives_per_anchor, rng)
    losses = infonce_rows(view1, view2, view2[neg_idx], cfg.tau)
    return LossResult(float(losses.mean()))


def inter_cl_user(
    src_users: np.ndarray,
    tgt_users: np.ndarray,
    cfg: LossConfig,
    rng: np.random.Generator,
    target_has_user_edges: bool = True,
) -> LossResult:
    """Cross-domain contrast between the two embeddings of aligned users.

    Skipped (0, flagged) in strict cold-start targets where the user
    nodes are isolated.
    """
    n = src_users.shape[0]
    if not target_has_user_edges or n < 2:
        return LossResult(0.0, skipped=True)
    k = min(cfg.negatives_per_anchor, n - 1)
    neg_idx = sample_batch_negatives(n, k, rng)
    tau = cfg.tau_for(NodeKind.USER)
    losses = infonce_rows(src_users, tgt_users, tgt_users[neg_idx], tau)
    return LossResult(float(losses.mean()))


def inter_cl_taxonomy(
    by_kind: dict[NodeKind, tuple[np.ndarray, np.ndarray]],
    cfg: LossConfig,
    rng: np.random.Generator,
) -> LossResult:
    """Aligned-taxonomy contrast; negatives never cross taxonomy kinds."""
    all_losses: list[np.ndarray] = []
    for kind in TAXONOMY_KINDS:
        if kind not in by_kind:
            continue
        src, tgt = by_kind[kind]
        n = src.shape[0]
        if n < 2:
            continue  # no same-kind negatives available
        k = min(cfg.negatives_per_anchor, n - 1)
        neg_idx = sample_batch_negatives(n, k, rng)
        all_losses.append(infonce_rows(src, tgt, tgt[neg_idx], cfg.tau_for(kind)))
    if not all_losses:
        return LossResult(0.0, skipped=True)
    stacked = np.concatenate(all_losses)
    return LossResult(float(stacked.mean()))


def inter_cl_neighbor(
    pairs_anchor: np.ndarray,
    pairs_positive: np.ndarray,
    pairs_negatives: np.ndarray,
    cfg: LossConfig,
) -> LossResult:
    """Mean InfoNCE over assembled (source anchor, target neighbor) pairs.

    Pair assembly (positive capping, same-kind negative pools) lives in
    the batch planner; this is the numeric reduction.
    """
    if pairs_anchor.shape[0] == 0:
        return LossResult(0.0, skipped=True)
    losses = infonce_rows(pairs_anchor, pairs_positive, pairs_negatives, cfg.tau)
    return LossResult(float(losses.mean()))


def inter_cl_total(
    user: LossResult, taxonomy: LossResult, neighbor: LossResult
) -> LossResult:
    """Unit-weight sum of the three cross-domain losses."""
    return LossResult(
        user.value + taxonomy.value + neighbor.value,
        skipped=user.skipped and taxonomy.skipped and neighbor.skipped,
    )


def total_loss(
    l_ns: float, l_nt: float, l_intra: float, l_inter: float, cfg: LossConfig
) -> float:
    """Weighted multi-task objective."""
    return (
        cfg.lambda1 * l_ns
        + cfg.lambda2 * l_nt
        + cfg.lambda3 * l_intra
        + cfg.lambda4 * l_inter
    )
