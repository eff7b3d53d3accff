"""Heterogeneous per-domain preference graphs.

Each domain is described by one undirected weighted graph over six node
kinds (user groups, items, tags, categories, medias, words) connected by
six legal edge kinds.  The graph is built from TSV streams, re-weighted
with smoothed PMI so that the different edge kinds have comparable mass,
and exposes weighted neighbor sampling for the aggregator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "NodeKind",
    "Domain",
    "NodeRef",
    "GraphError",
    "PreferenceNetwork",
    "load_network",
    "compute_edge_weights",
    "sample_neighbors",
    "aligned_nodes",
    "build_user_groups",
    "canonical_node_tsv",
    "canonical_edge_tsv",
]


class NodeKind(str, Enum):
    USER = "user"
    ITEM = "item"
    TAG = "tag"
    CATEGORY = "category"
    MEDIA = "media"
    WORD = "word"


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True, order=True)
class NodeRef:
    kind: NodeKind
    external_id: str
    domain: Domain


class GraphError(ValueError):
    """Malformed or inconsistent graph input."""


# Legal unordered endpoint-kind pairs per edge kind.
EDGE_KINDS: dict[str, frozenset[NodeKind]] = {
    "UI": frozenset({NodeKind.USER, NodeKind.ITEM}),
    "II": frozenset({NodeKind.ITEM}),
    "TI": frozenset({NodeKind.TAG, NodeKind.ITEM}),
    "CI": frozenset({NodeKind.CATEGORY, NodeKind.ITEM}),
    "MI": frozenset({NodeKind.MEDIA, NodeKind.ITEM}),
    "WI": frozenset({NodeKind.WORD, NodeKind.ITEM}),
}

# Kinds that may be aligned across domains (items and medias have no
# explicit cross-domain mapping).
ALIGNABLE_KINDS = (NodeKind.USER, NodeKind.TAG, NodeKind.CATEGORY, NodeKind.WORD)


def edge_kind_for(a: NodeKind, b: NodeKind) -> str:
    pair = frozenset({a, b})
    for name, kinds in EDGE_KINDS.items():
        if kinds == pair:
            return name
    raise GraphError(f"illegal kind pair: {a.value}-{b.value}")


class PreferenceNetwork:
    """Immutable per-domain heterogeneous graph with CSR adjacency.

    Nodes are indexed 0..n-1 in canonical order (kind, external_id).
    Adjacency stores, per incident edge: neighbor index, edge-kind code,
    raw interaction count, and the current sampling weight.  Cumulative
    weights per node back O(log deg) weighted sampling.
    """

    def __init__(
        self,
        domain: Domain,
        nodes: list[NodeRef],
        edges: list[tuple[int, int, str, float]],
    ):
        self.domain = domain
        self.nodes = nodes
        self.node_index = {(n.kind, n.external_id): i for i, n in enumerate(nodes)}
        self._edges = sorted(edges)
        self._build_adjacency()

    def _build_adjacency(self) -> None:
        n = len(self.nodes)
        kind_codes = {k: c for c, k in enumerate(sorted(EDGE_KINDS))}
        half: dict[int, list[tuple[int, int, float, float]]] = {i: [] for i in range(n)}
        for u, v, kind, count in self._edges:
            code = kind_codes[kind]
            half[u].append((v, code, count, count))
            half[v].append((u, code, count, count))
        indptr = np.zeros(n + 1, dtype=np.int64)
        for i in range(n):
            half[i].sort()
            indptr[i + 1] = indptr[i] + len(half[i])
        m = int(indptr[-1])
        self.indptr = indptr
        self.nbr = np.empty(m, dtype=np.int64)
        self.nbr_kind = np.empty(m, dtype=np.int8)
        self.raw_count = np.empty(m, dtype=np.float64)
        self.weight = np.empty(m, dtype=np.float64)
        for i in range(n):
            lo = indptr[i]
            for j, (v, code, count, w) in enumerate(half[i]):
                self.nbr[lo + j] = v
                self.nbr_kind[lo + j] = code
                self.raw_count[lo + j] = count
                self.weight[lo + j] = w
        self.kind_codes = kind_codes
        self._refresh_sampling_tables()

    def _refresh_sampling_tables(self) -> None:
        self.cumw = np.empty_like(self.weight)
        for i in range(len(self.nodes)):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            self.cumw[lo:hi] = np.cumsum(self.weight[lo:hi])
        # Per-node alias tables (Vose) for O(1) vectorized weighted draws.
        # alias_prob[p] is the acceptance probability of slot p within its
        # node's segment; alias_idx[p] the fallback slot (global index).
        self.alias_prob = np.ones_like(self.weight)
        self.alias_idx = np.arange(len(self.weight), dtype=np.int64)
        for i in range(len(self.nodes)):
            lo, hi = int(self.indptr[i]), int(self.indptr[i + 1])
            deg = hi - lo
            if deg <= 1:
                continue
            w = self.weight[lo:hi]
            scaled = w * (deg / w.sum())
            small = [p for p in range(deg) if scaled[p] < 1.0]
            large = [p for p in range(deg) if scaled[p] >= 1.0]
            scaled = scaled.copy()
            while small and large:
                s = small.pop()
                g = large.pop()
                self.alias_prob[lo + s] = scaled[s]
                self.alias_idx[lo + s] = lo + g
                scaled[g] = (scaled[g] + scaled[s]) - 1.0
                (small if scaled[g] < 1.0 else large).append(g)
            for p in small + large:
                self.alias_prob[lo + p] = 1.0
                self.alias_idx[lo + p] = lo + p

    # -- lookups -----------------------------------------------------------

    def n_nodes(self) -> int:
        return len(self.nodes)

    def node(self, kind: NodeKind, external_id: str) -> NodeRef | None:
        i = self.node_index.get((kind, external_id))
        return self.nodes[i] if i is not None else None

    def degree(self, idx: int) -> int:
        return int(self.indptr[idx + 1] - self.indptr[idx])

    def neighbors(self, idx: int) -> np.ndarray:
        return self.nbr[self.indptr[idx] : self.indptr[idx + 1]]

    def neighbor_weights(self, idx: int) -> np.ndarray:
        return self.weight[self.indptr[idx] : self.indptr[idx + 1]]

    def adjacency_of(self, node: NodeRef) -> list[tuple[NodeRef, str, float]]:
        idx = self.node_index[(node.kind, node.external_id)]
        code_names = {c: k for k, c in self.kind_codes.items()}
        lo, hi = self.indptr[idx], self.indptr[idx + 1]
        return [
            (self.nodes[self.nbr[p]], code_names[int(self.nbr_kind[p])], float(self.weight[p]))
            for p in range(lo, hi)
        ]

    def indices_of_kind(self, kind: NodeKind) -> np.ndarray:
        return np.array(
            [i for i, nd in enumerate(self.nodes) if nd.kind == kind], dtype=np.int64
        )

    def edge_list(self) -> list[tuple[int, int, str, float]]:
        return list(self._edges)


def _parse_kind(token: str, lineno: int) -> NodeKind:
    try:
        return NodeKind(token)
    except ValueError:
        raise GraphError(f"line {lineno}: unknown node kind {token!r}") from None


def _parse_domain(token: str, lineno: int) -> Domain:
    try:
        return Domain(token)
    except ValueError:
        raise GraphError(f"line {lineno}: unknown domain {token!r}") from None


def load_network(
    node_records: Iterable[str],
    edge_records: Iterable[str],
    domain: Domain,
    min_ui_count: int = 3,
) -> PreferenceNetwork:
    """Build one domain's graph from nodes.tsv / edges.tsv line streams.

    User-item edges whose weighted count falls below ``min_ui_count`` are
    dropped; all other kinds are kept as given.  Records of the other
    domain are ignored so both domains may share the same files.
    """
    nodes: list[NodeRef] = []
    seen: set[tuple[NodeKind, str]] = set()
    for lineno, line in enumerate(node_records, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        kind = _parse_kind(parts[0], lineno)
        rec_domain = _parse_domain(parts[2], lineno)
        if rec_domain != domain:
            continue
        key = (kind, parts[1])
        if key in seen:
            raise GraphError(f"line {lineno}: duplicate node {parts[0]}/{parts[1]}")
        seen.add(key)
        nodes.append(NodeRef(kind, parts[1], domain))

    nodes.sort()
    index = {(n.kind, n.external_id): i for i, n in enumerate(nodes)}

    edges: dict[tuple[int, int, str], float] = {}
    for lineno, line in enumerate(edge_records, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise GraphError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        src_kind = _parse_kind(parts[0], lineno)
        dst_kind = _parse_kind(parts[2], lineno)
        rec_domain = _parse_domain(parts[5], lineno)
        if rec_domain != domain:
            continue
        try:
            count = float(parts[4])
        except ValueError:
            raise GraphError(f"line {lineno}: bad count {parts[4]!r}") from None
        if not math.isfinite(count) or count <= 0:
            raise GraphError(f"line {lineno}: non-positive count {parts[4]}")
        try:
            kind = edge_kind_for(src_kind, dst_kind)
        except GraphError as exc:
            raise GraphError(f"line {lineno}: {exc}") from None
        u = index.get((src_kind, parts[1]))
        v = index.get((dst_kind, parts[3]))
        if u is None:
            raise GraphError(f"line {lineno}: undeclared node {parts[0]}/{parts[1]}")
        if v is None:
            raise GraphError(f"line {lineno}: undeclared node {parts[2]}/{parts[3]}")
        if u == v:
            raise GraphError(f"line {lineno}: self edge on {parts[1]}")
        a, b = (u, v) if u < v else (v, u)
        edges[(a, b, kind)] = edges.get((a, b, kind), 0.0) + count

    kept = [
        (u, v, kind, count)
        for (u, v, kind), count in edges.items()
        if kind != "UI" or count >= min_ui_count
    ]
    return PreferenceNetwork(domain, nodes, kept)


def compute_edge_weights(net: PreferenceNetwork, smoothing: float = 0.1) -> PreferenceNetwork:
    """Re-weight edges with per-kind smoothed PMI, mean-normalized to 1.

    weight(u, v) = max(smoothing, log(c(u,v) * C / (c(u) * c(v)))) where C
    and the marginals c(.) are taken within the edge's kind; weights are
    then scaled so every kind's mean weight is exactly 1, giving the
    different interaction types comparable sampling mass.
    """
    if smoothing <= 0:
        raise GraphError("smoothing must be positive")
    by_kind: dict[str, list[int]] = {}
    edges = net.edge_list()
    for e, (_, _, kind, _) in enumerate(edges):
        by_kind.setdefault(kind, []).append(e)

    new_weights = np.empty(len(edges), dtype=np.float64)
    for kind, edge_ids in by_kind.items():
        total = sum(edges[e][3] for e in edge_ids)
        marginal: dict[int, float] = {}
        for e in edge_ids:
            u, v, _, count = edges[e]
            marginal[u] = marginal.get(u, 0.0) + count
            marginal[v] = marginal.get(v, 0.0) + count
        pmi = np.empty(len(edge_ids))
        for j, e in enumerate(edge_ids):
            u, v, _, count = edges[e]
            if marginal[u] <= 0 or marginal[v] <= 0:
                raise GraphError(f"zero marginal count on edge {u}-{v}")
            pmi[j] = math.log(count * total / (marginal[u] * marginal[v]))
        w = np.maximum(pmi, smoothing)
        w /= w.mean()
        new_weights[edge_ids] = w

    reweighted = [
        (u, v, kind, count) for (u, v, kind, count) in edges
    ]
    out = PreferenceNetwork(net.domain, net.nodes, reweighted)
    # Scatter normalized weights onto both half-edges.
    lut = {(u, v, kind): new_weights[e] for e, (u, v, kind, _) in enumerate(edges)}
    for i in range(out.n_nodes()):
        lo, hi = out.indptr[i], out.indptr[i + 1]
        code_names = {c: k for k, c in out.kind_codes.items()}
        for p in range(lo, hi):
            j = int(out.nbr[p])
            kind = code_names[int(out.nbr_kind[p])]
            a, b = (i, j) if i < j else (j, i)
            out.weight[p] = lut[(a, b, kind)]
    out._refresh_sampling_tables()
    return out


def sample_neighbors(
    net: PreferenceNetwork, idx: int, fanout: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``fanout`` neighbors with replacement, p proportional to weight.

    An isolated node falls back to ``fanout`` copies of itself so that
    strict cold-start graphs (which contain isolates) never abort.
    """
    lo, hi = net.indptr[idx], net.indptr[idx + 1]
    if lo == hi:
        return np.full(fanout, idx, dtype=np.int64)
    cum = net.cumw[lo:hi]
    u = rng.random(fanout) * cum[-1]
    picks = np.searchsorted(cum, u, side="right")
    return net.nbr[lo:hi][picks]


def sample_neighbors_batch(
    net: PreferenceNetwork, idxs: np.ndarray, fanout: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized sample_neighbors over a 1-D index array -> (len, fanout).

    Same distribution as sample_neighbors (weight-proportional with
    replacement, isolated nodes fall back to themselves) via per-node
    alias tables, so the whole batch is drawn without a Python loop.
    """
    idxs = np.asarray(idxs, dtype=np.int64)
    n = len(idxs)
    lo = net.indptr[idxs]
    deg = net.indptr[idxs + 1] - lo
    out = np.repeat(idxs[:, None], fanout, axis=1)  # isolate fallback
    live = deg > 0
    if not np.any(live):
        return out
    slot = (rng.random((n, fanout)) * deg[:, None]).astype(np.int64)
    np.minimum(slot, np.maximum(deg - 1, 0)[:, None], out=slot)
    g = lo[:, None] + slot
    g[~live] = 0  # dead rows are overwritten below; keep indices in range
    accept = rng.random((n, fanout)) < net.alias_prob[g]
    chosen = np.where(accept, g, net.alias_idx[g])
    out[live] = net.nbr[chosen[live]]
    return out


def aligned_nodes(
    source_net: PreferenceNetwork, target_net: PreferenceNetwork
) -> list[tuple[NodeKind, str]]:
    """(kind, id) pairs present in both domains, alignable kinds only."""
    src = {
        (n.kind, n.external_id)
        for n in source_net.nodes
        if n.kind in ALIGNABLE_KINDS
    }
    tgt = {
        (n.kind, n.external_id)
        for n in target_net.nodes
        if n.kind in ALIGNABLE_KINDS
    }
    return sorted(src & tgt)


def build_user_groups(profile_records: Iterable[str]) -> dict[str, str]:
    """Map raw user ids to canonical gender-age-location group ids.

    Missing attributes fall back to "unknown" so a profile always lands
    in some group.
    """
    groups: dict[str, str] = {}
    for lineno, line in enumerate(profile_records, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise GraphError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        raw_id, gender, age, location = parts
        gender = gender or "unknown"
        age = age or "unknown"
        location = location or "unknown"
        groups[raw_id] = f"{gender}-{age}-{location}"
    return groups


def canonical_node_tsv(net: PreferenceNetwork) -> str:
    """Nodes in canonical sorted order, in the nodes.tsv format."""
    lines = [
        f"{n.kind.value}\t{n.external_id}\t{n.domain.value}" for n in net.nodes
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def canonical_edge_tsv(net: PreferenceNetwork) -> str:
    """Each undirected edge once, endpoints in canonical order, sorted."""
    lines = []
    for u, v, kind, count in net.edge_list():
        a, b = net.nodes[u], net.nodes[v]
        count_str = repr(count) if count != int(count) else str(int(count))
        lines.append(
            f"{a.kind.value}\t{a.external_id}\t{b.kind.value}\t{b.external_id}"
            f"\t{count_str}\t{net.domain.value}"
        )
    lines.sort()
    return "\n".join(lines) + ("\n" if lines else "")


def iter_lines(path) -> Iterator[str]:
    with open(path, "r", encoding="utf-8") as fh:
        yield from fh
