"""Two-layer graph-attention aggregation over sampled neighborhoods.

Layer x projects the previous-layer vectors with W, scores each neighbor
against the root through a LeakyReLU'd attention vector, softmax-normalizes
the scores, and squashes the attention-weighted sum with a logistic
sigmoid.  The root's own layer-1 representation (aggregated from its own
first-hop sample) feeds the layer-2 attention scores.

Two equivalent implementations are provided: a plain per-node path used
as a readable reference, and a batched path that records every
intermediate tensor so the trainer can run reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import PreferenceNetwork, sample_neighbors, sample_neighbors_batch

LEAKY_SLOPE = 0.2
DEFAULT_DIM_IN = 128
DEFAULT_DIM_OUT = 100
DEFAULT_FANOUTS = (25, 10)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # stable on both tails with a single exp
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


@dataclass
class GATLayerParams:
    """One attention layer: weighting matrix W and attention vector a."""

    W: np.ndarray  # (d_out, d_in)
    a: np.ndarray  # (2 * d_out,)

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @staticmethod
    def init(
        d_in: int, d_out: int, rng: np.random.Generator, scale: float = 1.0
    ) -> "GATLayerParams":
        """Uniform Glorot init, optionally widened by ``scale``.

        With unit scale and small base embeddings every pre-activation
        lands in the near-linear center of the sigmoid, which leaves all
        aggregated outputs nearly collinear; a few-times-wider init
        spreads them over the sigmoid's range.
        """
        limit = scale * np.sqrt(6.0 / (d_in + d_out))
        W = rng.uniform(-limit, limit, size=(d_out, d_in))
        a = rng.uniform(-limit, limit, size=2 * d_out)
        return GATLayerParams(W=W, a=a)


def init_embeddings(n_nodes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Base vectors, uniform on [-1/sqrt(d), +1/sqrt(d)]."""
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(n_nodes, dim))


@dataclass
class NeighborhoodSample:
    """Fixed-fanout two-hop sample rooted at one node.

    ``root_hop1`` is the root's own first-hop sample (feeds its layer-1
    representation used in the layer-2 attention); ``hop1`` are the F1
    neighbors aggregated at layer 2, each with its own F2-sized ``hop2``
    row.
    """

    root: int
    root_hop1: np.ndarray  # (F2,)
    hop1: np.ndarray  # (F1,)
    hop2: np.ndarray  # (F1, F2)
    seed: int | None = None


def sample_neighborhood(
    net: PreferenceNetwork,
    root: int,
    fanouts: tuple[int, int],
    rng: np.random.Generator,
) -> NeighborhoodSample:
    f1, f2 = fanouts
    root_hop1 = sample_neighbors(net, root, f2, rng)
    hop1 = sample_neighbors(net, root, f1, rng)
    hop2 = np.stack([sample_neighbors(net, int(v), f2, rng) for v in hop1])
    return NeighborhoodSample(root=root, root_hop1=root_hop1, hop1=hop1, hop2=hop2)


def sample_neighborhoods(
    net: PreferenceNetwork,
    roots: np.ndarray,
    fanouts: tuple[int, int],
    rng: np.random.Generator,
) -> list[NeighborhoodSample]:
    """Batched sample_neighborhood: same per-sample distribution, drawn
    with three vectorized passes instead of a Python loop per root."""
    f1, f2 = fanouts
    roots = np.asarray(roots, dtype=np.int64)
    root_hop1 = sample_neighbors_batch(net, roots, f2, rng)
    hop1 = sample_neighbors_batch(net, roots, f1, rng)
    hop2 = sample_neighbors_batch(net, hop1.ravel(), f2, rng).reshape(
        len(roots), f1, f2
    )
    return [
        NeighborhoodSample(
            root=int(r), root_hop1=root_hop1[i], hop1=hop1[i], hop2=hop2[i]
        )
        for i, r in enumerate(roots)
    ]


def sample_neighborhoods_packed(
    net: PreferenceNetwork,
    roots: np.ndarray,
    fanouts: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Like sample_neighborhoods, but emits pack_samples layout directly:
    (B, 1+F1) mid indices and (B, 1+F1, F2) leaf indices, skipping the
    per-sample objects entirely."""
    f1, f2 = fanouts
    roots = np.asarray(roots, dtype=np.int64)
    root_hop1 = sample_neighbors_batch(net, roots, f2, rng)
    hop1 = sample_neighbors_batch(net, roots, f1, rng)
    hop2 = sample_neighbors_batch(net, hop1.ravel(), f2, rng).reshape(
        len(roots), f1, f2
    )
    mids = np.concatenate((roots[:, None], hop1), axis=1)
    leaves = np.concatenate((root_hop1[:, None, :], hop2), axis=1)
    return mids, leaves


# -- reference per-node path -------------------------------------------------


def attention_coefficients(
    h_root: np.ndarray, h_neighbors: np.ndarray, params: GATLayerParams
) -> np.ndarray:
    """Softmax attention of the root over its neighbor list."""
    if h_root.shape[-1] != params.d_in or h_neighbors.shape[-1] != params.d_in:
        raise ValueError(
            f"dimension mismatch: inputs {h_root.shape[-1]}/{h_neighbors.shape[-1]} "
            f"vs params d_in {params.d_in}"
        )
    p_root = params.W @ h_root
    p_nbrs = h_neighbors @ params.W.T
    d = params.d_out
    logits = leaky_relu(params.a[:d] @ p_root + p_nbrs @ params.a[d:])
    logits = logits - logits.max()
    ex = np.exp(logits)
    return ex / ex.sum()


def aggregate_layer(
    h_root: np.ndarray, h_neighbors: np.ndarray, params: GATLayerParams
) -> np.ndarray:
    """One attention layer: sigmoid of the attention-weighted projection sum."""
    alpha = attention_coefficients(h_root, h_neighbors, params)
    p_nbrs = h_neighbors @ params.W.T
    return sigmoid(alpha @ p_nbrs)


def forward(
    sample: NeighborhoodSample,
    embeddings: np.ndarray,
    params: tuple[GATLayerParams, GATLayerParams],
) -> np.ndarray:
    """Aggregated representation of the sample's root node."""
    l1, l2 = params
    root_repr = aggregate_layer(
        embeddings[sample.root], embeddings[sample.root_hop1], l1
    )
    hop1_repr = np.stack(
        [
            aggregate_layer(embeddings[int(v)], embeddings[sample.hop2[j]], l1)
            for j, v in enumerate(sample.hop1)
        ]
    )
    return aggregate_layer(root_repr, hop1_repr, l2)


def forward_batch(
    samples: list[NeighborhoodSample],
    embeddings: np.ndarray,
    params: tuple[GATLayerParams, GATLayerParams],
) -> np.ndarray:
    """Row i is forward(samples[i], ...); values identical to single calls."""
    if not samples:
        return np.zeros((0, params[1].d_out))
    mids, leaves = pack_samples(samples)
    out, _ = forward_batch_recorded(mids, leaves, embeddings, params)
    return out


# -- batched recorded path ---------------------------------------------------


def pack_samples(samples: list[NeighborhoodSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (B, 1+F1) mid and (B, 1+F1, F2) leaf index arrays.

    Column 0 of ``mids`` is the root; its leaf row is ``root_hop1``.
    """
    mids = np.stack([np.concatenate(([s.root], s.hop1)) for s in samples])
    leaves = np.stack(
        [np.concatenate((s.root_hop1[None, :], s.hop2), axis=0) for s in samples]
    )
    return mids, leaves


@dataclass
class ForwardRecord:
    """Every intermediate of a batched forward pass, for backprop."""

    mids: np.ndarray  # (B, M) node indices, col 0 = root
    leaves: np.ndarray  # (B, M, F2) node indices
    Hm: np.ndarray  # (B, M, d_in) gathered base vectors
    Hl: np.ndarray  # (B, M, F2, d_in)
    Pm: np.ndarray  # (B, M, d) W1-projections of mids
    Pl: np.ndarray  # (B, M, F2, d) W1-projections of leaves
    pre1: np.ndarray  # (B, M, F2) attention logits before LeakyReLU
    alpha1: np.ndarray  # (B, M, F2)
    O1: np.ndarray  # (B, M, d) layer-1 outputs (post sigmoid)
    Pr: np.ndarray  # (B, d) W2-projection of the root's layer-1 output
    Pn: np.ndarray  # (B, F1, d) W2-projections of hop-1 layer-1 outputs
    pre2: np.ndarray  # (B, F1)
    alpha2: np.ndarray  # (B, F1)
    out: np.ndarray  # (B, d)


def forward_batch_recorded(
    mids: np.ndarray,
    leaves: np.ndarray,
    embeddings: np.ndarray,
    params: tuple[GATLayerParams, GATLayerParams],
) -> tuple[np.ndarray, ForwardRecord]:
    l1, l2 = params
    d = l1.d_out
    Hm = embeddings[mids]
    Hl = embeddings[leaves]
    Pm = Hm @ l1.W.T
    Pl = Hl @ l1.W.T
    pre1 = (Pm @ l1.a[:d])[..., None] + Pl @ l1.a[d:]
    act1 = leaky_relu(pre1)
    act1 = act1 - act1.max(axis=-1, keepdims=True)
    ex1 = np.exp(act1)
    alpha1 = ex1 / ex1.sum(axis=-1, keepdims=True)
    S1 = np.matmul(alpha1[:, :, None, :], Pl)[:, :, 0, :]
    O1 = sigmoid(S1)

    Pr = O1[:, 0] @ l2.W.T
    Pn = O1[:, 1:] @ l2.W.T
    pre2 = (Pr @ l2.a[:d])[:, None] + Pn @ l2.a[d:]
    act2 = leaky_relu(pre2)
    act2 = act2 - act2.max(axis=-1, keepdims=True)
    ex2 = np.exp(act2)
    alpha2 = ex2 / ex2.sum(axis=-1, keepdims=True)
    S2 = np.matmul(alpha2[:, None, :], Pn)[:, 0, :]
    out = sigmoid(S2)
    record = ForwardRecord(
        mids=mids,
        leaves=leaves,
        Hm=Hm,
        Hl=Hl,
        Pm=Pm,
        Pl=Pl,
        pre1=pre1,
        alpha1=alpha1,
        O1=O1,
        Pr=Pr,
        Pn=Pn,
        pre2=pre2,
        alpha2=alpha2,
        out=out,
    )
    return out, record
