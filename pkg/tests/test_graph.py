"""Graph construction, PMI re-weighting, sampling, and canonical TSV."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdmatch.graph import (
    Domain,
    GraphError,
    NodeKind,
    aligned_nodes,
    build_user_groups,
    canonical_edge_tsv,
    canonical_node_tsv,
    compute_edge_weights,
    edge_kind_for,
    load_network,
    sample_neighbors,
    sample_neighbors_batch,
)

from conftest import toy_graphs, toy_records

NODES = [
    "user\tu1\tsource",
    "user\tu2\tsource",
    "item\ti1\tsource",
    "item\ti2\tsource",
    "tag\tt1\tsource",
]


def net_of(nodes, edges, domain=Domain.SOURCE, **kw):
    return load_network(nodes, edges, domain, **kw)


class TestLoadNetwork:
    def test_basic_build(self):
        edges = [
            "user\tu1\titem\ti1\t5\tsource",
            "item\ti1\ttag\tt1\t1\tsource",
        ]
        net = net_of(NODES, edges)
        assert net.n_nodes() == 5
        i1 = net.node_index[(NodeKind.ITEM, "i1")]
        assert net.degree(i1) == 2

    def test_nodes_canonically_sorted(self):
        net = net_of(NODES, [])
        keys = [(n.kind, n.external_id) for n in net.nodes]
        assert keys == sorted(keys)

    def test_ui_threshold_drops_weak_edges(self):
        edges = [
            "user\tu1\titem\ti1\t2\tsource",  # below default threshold 3
            "user\tu2\titem\ti1\t3\tsource",
        ]
        net = net_of(NODES, edges)
        u1 = net.node_index[(NodeKind.USER, "u1")]
        u2 = net.node_index[(NodeKind.USER, "u2")]
        assert net.degree(u1) == 0
        assert net.degree(u2) == 1

    def test_ui_threshold_applies_to_summed_count(self):
        # repeated records accumulate before the threshold check
        edges = [
            "user\tu1\titem\ti1\t2\tsource",
            "user\tu1\titem\ti1\t1\tsource",
        ]
        net = net_of(NODES, edges)
        u1 = net.node_index[(NodeKind.USER, "u1")]
        assert net.degree(u1) == 1

    def test_non_ui_kinds_keep_small_counts(self):
        net = net_of(NODES, ["item\ti1\ttag\tt1\t1\tsource"])
        t1 = net.node_index[(NodeKind.TAG, "t1")]
        assert net.degree(t1) == 1

    def test_other_domain_records_ignored(self):
        nodes = NODES + ["item\tx9\ttarget"]
        edges = ["user\tu1\titem\ti1\t5\tsource"]
        net = net_of(nodes, edges)
        assert net.node(NodeKind.ITEM, "x9") is None

    def test_error_messages_carry_line_numbers(self):
        with pytest.raises(GraphError, match="line 2"):
            net_of(["user\tu1\tsource", "user\tu1\tsource"], [])
        with pytest.raises(GraphError, match="line 1"):
            net_of(NODES, ["user\tu1\titem\ti1\t5"])
        with pytest.raises(GraphError, match="line 1"):
            net_of(NODES, ["user\tu1\tuser\tu2\t5\tsource"])  # illegal pair
        with pytest.raises(GraphError, match="line 1"):
            net_of(NODES, ["user\tu1\titem\tmissing\t5\tsource"])
        with pytest.raises(GraphError, match="line 1"):
            net_of(NODES, ["user\tu1\titem\ti1\t-3\tsource"])

    def test_unknown_kind_and_domain_rejected(self):
        with pytest.raises(GraphError, match="kind"):
            net_of(["widget\tw1\tsource"], [])
        with pytest.raises(GraphError, match="domain"):
            net_of(["user\tu1\tmiddle"], [])

    def test_edge_kind_for_rejects_illegal_pairs(self):
        assert edge_kind_for(NodeKind.USER, NodeKind.ITEM) == "UI"
        assert edge_kind_for(NodeKind.ITEM, NodeKind.ITEM) == "II"
        with pytest.raises(GraphError):
            edge_kind_for(NodeKind.TAG, NodeKind.WORD)


class TestEdgeWeights:
    def test_weights_positive_and_mean_one_per_kind(self):
        source, _, _ = toy_graphs(3)
        by_kind = {}
        for u, v, kind, _ in source.edge_list():
            i = source.node_index[
                (source.nodes[u].kind, source.nodes[u].external_id)
            ]
            lo, hi = source.indptr[i], source.indptr[i + 1]
            pos = [p for p in range(lo, hi) if source.nbr[p] == v]
            by_kind.setdefault(kind, []).append(source.weight[pos[0]])
        for kind, ws in by_kind.items():
            assert all(w > 0 for w in ws)
            assert np.mean(ws) == pytest.approx(1.0, abs=1e-12)

    def test_pmi_oracle_two_edges(self):
        # hand-computed smoothed PMI for a 2-edge UI kind
        nodes = NODES
        edges = [
            "user\tu1\titem\ti1\t6\tsource",
            "user\tu2\titem\ti2\t3\tsource",
        ]
        net = compute_edge_weights(net_of(nodes, edges), smoothing=0.1)
        total = 9.0
        pmi1 = math.log(6 * total / (6 * 6))
        pmi2 = math.log(3 * total / (3 * 3))
        w = np.array([max(pmi1, 0.1), max(pmi2, 0.1)])
        w = w / w.mean()
        u1 = net.node_index[(NodeKind.USER, "u1")]
        assert net.neighbor_weights(u1)[0] == pytest.approx(w[0], rel=1e-12)

    def test_smoothing_floor_applies(self):
        # strongly negative PMI is clamped at the smoothing value
        nodes = [
            "user\tu1\tsource",
            "user\tu2\tsource",
            "item\ti1\tsource",
            "item\ti2\tsource",
        ]
        edges = [
            "user\tu1\titem\ti1\t100\tsource",
            "user\tu1\titem\ti2\t100\tsource",
            "user\tu2\titem\ti1\t100\tsource",
            "user\tu2\titem\ti2\t3\tsource",
        ]
        raw = net_of(nodes, edges)
        # the weak edge's raw PMI is negative, so it must be clamped
        total = 303.0
        pmis = [
            math.log(100 * total / (200 * 200)),
            math.log(100 * total / (200 * 103)),
            math.log(100 * total / (103 * 200)),
            math.log(3 * total / (103 * 103)),
        ]
        assert pmis[3] < 0.1  # premise of the test
        clamped = np.maximum(pmis, 0.1)
        expected = clamped / clamped.mean()
        net = compute_edge_weights(raw, smoothing=0.1)
        u2 = net.node_index[(NodeKind.USER, "u2")]
        i2 = net.node_index[(NodeKind.ITEM, "i2")]
        ws = dict(zip(net.neighbors(u2).tolist(), net.neighbor_weights(u2)))
        assert ws[i2] == pytest.approx(expected[3], rel=1e-12)

    def test_non_positive_smoothing_rejected(self):
        source, _, _ = toy_graphs(1)
        with pytest.raises(GraphError):
            compute_edge_weights(source, smoothing=0.0)


class TestSampling:
    def test_sample_respects_fanout_and_membership(self):
        source, _, _ = toy_graphs(2)
        rng = np.random.default_rng(0)
        for idx in range(source.n_nodes()):
            picks = sample_neighbors(source, idx, 7, rng)
            assert picks.shape == (7,)
            if source.degree(idx) == 0:
                assert np.all(picks == idx)
            else:
                assert set(picks) <= set(source.neighbors(idx).tolist())

    def test_isolated_node_falls_back_to_self(self):
        nodes = ["user\tu1\tsource", "item\ti1\tsource"]
        net = net_of(nodes, [])
        picks = sample_neighbors(net, 0, 4, np.random.default_rng(0))
        assert np.all(picks == 0)

    def test_batch_sampler_matches_membership_and_fallback(self):
        source, _, _ = toy_graphs(4)
        rng = np.random.default_rng(1)
        idxs = np.arange(source.n_nodes())
        out = sample_neighbors_batch(source, idxs, 5, rng)
        assert out.shape == (source.n_nodes(), 5)
        for i in idxs:
            if source.degree(int(i)) == 0:
                assert np.all(out[i] == i)
            else:
                assert set(out[i].tolist()) <= set(source.neighbors(int(i)).tolist())

    def test_batch_sampler_distribution_matches_weights(self):
        # frequency of each neighbor approaches its normalized weight
        source, _, _ = toy_graphs(5)
        idx = int(np.argmax(np.diff(source.indptr)))  # highest-degree node
        w = source.neighbor_weights(idx)
        p = w / w.sum()
        nbrs = source.neighbors(idx)
        rng = np.random.default_rng(7)
        draws = sample_neighbors_batch(
            source, np.full(2000, idx), 10, rng
        ).ravel()
        for nbr, prob in zip(nbrs.tolist(), p):
            freq = np.mean(draws == nbr)
            assert freq == pytest.approx(prob, abs=0.03)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_single_and_batch_same_support(self, seed):
        source, _, _ = toy_graphs(0)
        rng1 = np.random.default_rng(seed)
        rng2 = np.random.default_rng(seed + 1)
        idx = seed % source.n_nodes()
        single = set(sample_neighbors(source, idx, 6, rng1).tolist())
        batch = set(sample_neighbors_batch(source, np.array([idx]), 6, rng2)[0])
        support = set(source.neighbors(idx).tolist()) or {idx}
        assert single <= support and batch <= support


class TestAlignment:
    def test_aligned_kinds_only(self):
        source, target, aligned = toy_graphs(0)
        kinds = {k for k, _ in aligned}
        assert NodeKind.ITEM not in kinds  # items are never aligned
        assert (NodeKind.USER, "u0") in aligned
        assert (NodeKind.TAG, "t0") in aligned

    def test_alignment_is_sorted_intersection(self):
        source, target, aligned = toy_graphs(0)
        assert aligned == sorted(aligned)
        for kind, ext in aligned:
            assert source.node(kind, ext) is not None
            assert target.node(kind, ext) is not None


class TestUserGroups:
    def test_triplet_grouping(self):
        groups = build_user_groups(
            ["alice\tF\t25-30\tSH", "bob\tM\t25-30\tSH", "carol\tF\t25-30\tSH"]
        )
        assert groups["alice"] == groups["carol"] == "F-25-30-SH"
        assert groups["bob"] == "M-25-30-SH"

    def test_missing_fields_fall_back_to_unknown(self):
        groups = build_user_groups(["dave\t\t\tNY"])
        assert groups["dave"] == "unknown-unknown-NY"

    def test_malformed_profile_line(self):
        with pytest.raises(GraphError, match="line 1"):
            build_user_groups(["dave\tM\t20-25"])


class TestCanonicalTsv:
    def test_round_trip_is_fixed_point(self):
        nodes, edges = toy_records(6)
        net1 = compute_edge_weights(load_network(nodes, edges, Domain.SOURCE))
        n1, e1 = canonical_node_tsv(net1), canonical_edge_tsv(net1)
        net2 = compute_edge_weights(
            load_network(n1.splitlines(), e1.splitlines(), Domain.SOURCE)
        )
        assert canonical_node_tsv(net2) == n1
        assert canonical_edge_tsv(net2) == e1

    def test_canonical_edges_sorted_and_unique(self):
        nodes, edges = toy_records(8)
        net = load_network(nodes, edges, Domain.TARGET)
        lines = canonical_edge_tsv(net).splitlines()
        assert lines == sorted(lines)
        assert len(lines) == len(set(lines))
