"""Multi-task trainer with hand-written reverse-mode gradients.

Each step draws independent batches for the four loss families (source
and target neighbor-similarity, intra-domain contrast, cross-domain
contrast), runs recorded forward passes, backpropagates analytically
through the attention layers into the layer parameters and the touched
base embeddings, clips the global gradient norm, and applies Adam (or
SGD) with lazy per-row embedding updates.

Planning (all random index draws for a step) is separated from the
numeric pass, so the loss is a pure function of the parameters for any
fixed plan; the finite-difference gradient checker leans on that.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import losses as L
from .aggregator import (
    DEFAULT_DIM_IN,
    DEFAULT_DIM_OUT,
    DEFAULT_FANOUTS,
    LEAKY_SLOPE,
    ForwardRecord,
    GATLayerParams,
    NeighborhoodSample,
    forward_batch_recorded,
    init_embeddings,
    pack_samples,
    sample_neighborhood,
    sample_neighborhoods,
    sample_neighborhoods_packed,
)
from .graph import NodeKind, PreferenceNetwork
from .losses import LossConfig, LossResult

LOSS_KEYS = ("L_Ns", "L_Nt", "L_intra", "L_inter_u", "L_inter_t", "L_inter_n")


class DivergenceError(RuntimeError):
    """Total loss exceeded 10x its initial value."""


@dataclass
class TrainerConfig:
    optimizer: str = "adam"  # "adam" | "sgd"
    learning_rate: float = 1e-3
    epochs: int = 1
    steps_per_epoch: int | None = None
    batch_size: int = 4096
    seed: int = 0
    gradient_clip_norm: float = 5.0
    dim_in: int = DEFAULT_DIM_IN
    dim_out: int = DEFAULT_DIM_OUT
    fanouts: tuple[int, int] = DEFAULT_FANOUTS
    layer_init_scale: float = 1.0
    strict_cold_start: bool = False
    param_dtype: str = "float64"  # "float32" halves memory traffic
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.param_dtype not in ("float64", "float32"):
            raise ValueError(f"unknown param_dtype {self.param_dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.param_dtype == "float64" else np.float32


@dataclass
class DomainModel:
    embeddings: np.ndarray  # (n_nodes, d_in)
    layers: tuple[GATLayerParams, GATLayerParams]


@dataclass
class Model:
    source: DomainModel
    target: DomainModel

    @staticmethod
    def init(
        source_net: PreferenceNetwork,
        target_net: PreferenceNetwork,
        cfg: TrainerConfig,
    ) -> "Model":
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        domains = []
        for net in (source_net, target_net):
            emb = init_embeddings(net.n_nodes(), cfg.dim_in, rng).astype(dt)
            l1 = GATLayerParams.init(
                cfg.dim_in, cfg.dim_out, rng, scale=cfg.layer_init_scale
            )
            l2 = GATLayerParams.init(
                cfg.dim_out, cfg.dim_out, rng, scale=cfg.layer_init_scale
            )
            for layer in (l1, l2):
                layer.W = layer.W.astype(dt)
                layer.a = layer.a.astype(dt)
            domains.append(DomainModel(embeddings=emb, layers=(l1, l2)))
        return Model(source=domains[0], target=domains[1])

    def domain(self, name: str) -> DomainModel:
        return self.source if name == "source" else self.target


@dataclass
class DomainGrads:
    E: np.ndarray
    W1: np.ndarray
    a1: np.ndarray
    W2: np.ndarray
    a2: np.ndarray

    @staticmethod
    def zeros_like(dm: DomainModel) -> "DomainGrads":
        l1, l2 = dm.layers
        return DomainGrads(
            E=np.zeros_like(dm.embeddings),
            W1=np.zeros_like(l1.W),
            a1=np.zeros_like(l1.a),
            W2=np.zeros_like(l2.W),
            a2=np.zeros_like(l2.a),
        )

    def arrays(self):
        return (self.E, self.W1, self.a1, self.W2, self.a2)


@dataclass
class GradientSet:
    source: DomainGrads
    target: DomainGrads

    @staticmethod
    def zeros_like(model: Model) -> "GradientSet":
        return GradientSet(
            source=DomainGrads.zeros_like(model.source),
            target=DomainGrads.zeros_like(model.target),
        )

    def arrays(self):
        return self.source.arrays() + self.target.arrays()

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((a * a).sum()) for a in self.arrays())))

    def clip_(self, max_norm: float) -> float:
        norm = self.global_norm()
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for a in self.arrays():
                a *= scale
        return norm

    def check_finite(self) -> None:
        names = ("src.E", "src.W1", "src.a1", "src.W2", "src.a2",
                 "tgt.E", "tgt.W1", "tgt.a1", "tgt.W2", "tgt.a2")
        for name, a in zip(names, self.arrays()):
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"non-finite gradient in {name}")


def backward_batch(
    rec: ForwardRecord,
    g_out: np.ndarray,
    params: tuple[GATLayerParams, GATLayerParams],
    grads: DomainGrads,
) -> None:
    """Accumulate d(loss)/d(params, base embeddings) for one forward batch."""
    l1, l2 = params
    d = l1.d_out

    # layer 2
    g_S2 = g_out * rec.out * (1.0 - rec.out)
    g_alpha2 = np.matmul(rec.Pn, g_S2[:, :, None])[:, :, 0]
    g_Pn = rec.alpha2[:, :, None] * g_S2[:, None, :]
    g_act2 = rec.alpha2 * (
        g_alpha2 - (rec.alpha2 * g_alpha2).sum(axis=1, keepdims=True)
    )
    g_pre2 = g_act2 * np.where(rec.pre2 >= 0, 1.0, LEAKY_SLOPE)
    g_Pr = g_pre2.sum(axis=1)[:, None] * l2.a[:d][None, :]
    g_Pn += g_pre2[:, :, None] * l2.a[d:][None, None, :]
    grads.a2[:d] += rec.Pr.T @ g_pre2.sum(axis=1)
    grads.a2[d:] += g_pre2.reshape(-1) @ rec.Pn.reshape(-1, d)
    grads.W2 += g_Pr.T @ rec.O1[:, 0]
    grads.W2 += g_Pn.reshape(-1, d).T @ rec.O1[:, 1:].reshape(-1, d)
    g_O1 = np.empty_like(rec.O1)
    g_O1[:, 0] = g_Pr @ l2.W
    g_O1[:, 1:] = g_Pn @ l2.W

    # layer 1
    g_S1 = g_O1 * rec.O1 * (1.0 - rec.O1)
    g_alpha1 = np.matmul(rec.Pl, g_S1[:, :, :, None])[..., 0]
    g_Pl = rec.alpha1[..., None] * g_S1[:, :, None, :]
    g_act1 = rec.alpha1 * (
        g_alpha1 - (rec.alpha1 * g_alpha1).sum(axis=-1, keepdims=True)
    )
    g_pre1 = g_act1 * np.where(rec.pre1 >= 0, 1.0, LEAKY_SLOPE)
    g_Pm = g_pre1.sum(axis=-1)[..., None] * l1.a[:d]
    g_Pl += g_pre1[..., None] * l1.a[d:]
    grads.a1[:d] += g_pre1.sum(axis=-1).reshape(-1) @ rec.Pm.reshape(-1, d)
    grads.a1[d:] += g_pre1.reshape(-1) @ rec.Pl.reshape(-1, d)
    d_in = grads.E.shape[1]
    grads.W1 += g_Pm.reshape(-1, d).T @ rec.Hm.reshape(-1, d_in)
    grads.W1 += g_Pl.reshape(-1, d).T @ rec.Hl.reshape(-1, d_in)
    g_Hm = g_Pm @ l1.W
    g_Hl = g_Pl @ l1.W
    idx = np.concatenate((rec.mids.ravel(), rec.leaves.ravel()))
    rows = np.concatenate(
        (g_Hm.reshape(-1, d_in), g_Hl.reshape(-1, d_in)), axis=0
    )
    _scatter_add_rows(grads.E, idx, rows)


def _scatter_add_rows(E: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """E[idx[i]] += rows[i], duplicates summed (sort + segment reduce)."""
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_rows = rows[order]
    boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate(([0], boundaries))
    sums = np.add.reduceat(sorted_rows, starts, axis=0)
    E[sorted_idx[starts]] += sums


# -- step planning -----------------------------------------------------------


@dataclass
class Packed:
    """A batch of two-hop samples in pack_samples layout.

    ``mids`` is (B, 1+F1) node indices with the root in column 0;
    ``leaves`` is (B, 1+F1, F2) with the root's own first-hop sample in
    row 0 of each block.
    """

    mids: np.ndarray
    leaves: np.ndarray

    def __len__(self) -> int:
        return len(self.mids)


@dataclass
class SgnsPlan:
    """Anchors and positives are per-row; negatives come from a shared pool.

    Sampling one pool of negative nodes per step and letting each anchor
    pick its K rows from it (``neg_sel``) keeps the per-anchor loss terms
    unchanged while aggregating K-fold fewer neighborhood forwards.
    """

    anchors: Packed
    positives: Packed
    neg_pool: Packed
    neg_sel: np.ndarray  # (B, K) into neg_pool


@dataclass
class IntraPlan:
    view1: Packed
    view2: Packed
    neg_idx: np.ndarray  # (B, K) into the batch


@dataclass
class AlignPlan:
    """Source-anchor / target-positive InfoNCE batch with in-batch negatives."""

    src: Packed
    tgt: Packed
    neg_idx: np.ndarray
    tau: float


@dataclass
class NeighborAlignPlan:
    """Cross-domain pairs: unique source anchors, per-pair target positives.

    ``anchor_map[p]`` points pair p at its row in ``anchors``; negatives
    come from a shared per-step pool selected per pair via ``neg_sel``.
    """

    anchors: Packed  # source domain, unique nodes
    anchor_map: np.ndarray  # (P,) into anchors
    positives: Packed  # target domain, len P
    neg_pool: Packed  # target domain
    neg_sel: np.ndarray  # (P, K) into neg_pool


@dataclass
class StepPlan:
    sgns_source: SgnsPlan | None
    sgns_target: SgnsPlan | None
    intra: IntraPlan | None
    inter_user: AlignPlan | None
    inter_taxonomy: list[AlignPlan]
    inter_neighbor: NeighborAlignPlan | None
    user_skipped: bool


class BatchPlanner:
    """Owns the per-net caches and all sampling decisions for one trainer."""

    def __init__(
        self,
        source_net: PreferenceNetwork,
        target_net: PreferenceNetwork,
        aligned: list[tuple[NodeKind, str]],
        cfg: TrainerConfig,
    ):
        self.source_net = source_net
        self.target_net = target_net
        self.cfg = cfg
        self.nets = {"source": source_net, "target": target_net}
        self.active = {
            name: np.array(
                [i for i in range(net.n_nodes()) if net.degree(i) > 0],
                dtype=np.int64,
            )
            for name, net in self.nets.items()
        }
        self.nbr_sets = {
            name: [set(net.neighbors(i).tolist()) for i in range(net.n_nodes())]
            for name, net in self.nets.items()
        }
        self.aligned_pairs = [
            (
                source_net.node_index[(kind, ext)],
                target_net.node_index[(kind, ext)],
                kind,
            )
            for kind, ext in aligned
        ]
        self.kind_pool = {
            kind: target_net.indices_of_kind(kind) for kind in NodeKind
        }
        # globally monotone cumulative edge weights: one searchsorted call
        # samples weighted neighbors for a whole batch of anchors at once
        self.totw = {}
        self.offw = {}
        self.gcum = {}
        for name, net in self.nets.items():
            ends = np.maximum(net.indptr[1:] - 1, net.indptr[:-1])
            ends = np.minimum(ends, max(len(net.cumw) - 1, 0))
            gathered = net.cumw[ends] if len(net.cumw) else np.zeros_like(ends, dtype=float)
            tot = np.where(net.indptr[1:] > net.indptr[:-1], gathered, 0.0)
            off = np.concatenate(([0.0], np.cumsum(tot)))[:-1]
            edge_node = np.repeat(
                np.arange(net.n_nodes()), np.diff(net.indptr)
            )
            self.totw[name] = tot
            self.offw[name] = off
            self.gcum[name] = net.cumw + off[edge_node]
        user_idx = target_net.indices_of_kind(NodeKind.USER)
        self.target_has_user_edges = any(
            target_net.degree(int(i)) > 0 for i in user_idx
        )
        # degree^skew sampling tables for negative pools (popularity-aware
        # negatives damp the pull of head nodes on the shared geometry)
        self.skew_cum: dict[str, np.ndarray] = {}
        self.kind_skew: dict[NodeKind, np.ndarray] = {}
        gamma = cfg.loss.negative_skew
        if gamma:
            for name, net in self.nets.items():
                deg = np.diff(net.indptr).astype(float)
                cum = np.cumsum(deg**gamma)
                if len(cum) and cum[-1] > 0:
                    self.skew_cum[name] = cum
            tdeg = np.diff(target_net.indptr).astype(float)
            for kind in NodeKind:
                cand = self.kind_pool[kind]
                cum = np.cumsum(tdeg[cand] ** gamma)
                if len(cum) and cum[-1] > 0:
                    self.kind_skew[kind] = cum

    def _skewed_pool(self, cum: np.ndarray, size: int, rng) -> np.ndarray:
        """`size` indices into the support of `cum`, drawn ~ its increments."""
        return np.searchsorted(cum, rng.random(size) * cum[-1], side="right")

    def _sample_many(self, name: str, idxs, rng) -> "Packed":
        net = self.nets[name]
        mids, leaves = sample_neighborhoods_packed(
            net, np.asarray(list(idxs), dtype=np.int64), self.cfg.fanouts, rng
        )
        return Packed(mids=mids, leaves=leaves)

    def _weighted_positives(self, name: str, anchors: np.ndarray, rng) -> np.ndarray:
        """One weighted neighbor per anchor; anchors must have degree > 0."""
        net = self.nets[name]
        vals = self.offw[name][anchors] + rng.random(len(anchors)) * self.totw[name][anchors]
        return net.nbr[np.searchsorted(self.gcum[name], vals, side="right")]

    def _pool_negatives(
        self, pool: np.ndarray, owners: list[int], nbr_sets, k: int, rng
    ) -> np.ndarray:
        """(len(owners), k) selections into pool avoiding each owner's neighbors."""
        sel = np.empty((len(owners), k), dtype=np.int64)
        S = len(pool)
        draws = rng.integers(0, S, size=(len(owners), 8 * k + 32))
        for i, owner in enumerate(owners):
            nbrs = nbr_sets[owner]
            got = 0
            for j in draws[i]:
                cand = int(pool[j])
                if cand == owner or cand in nbrs:
                    continue
                sel[i, got] = j
                got += 1
                if got == k:
                    break
            guard = 0
            while got < k:  # pool nearly covered by this neighbor set
                cand = int(rng.integers(0, S))
                guard += 1
                if int(pool[cand]) != owner and (
                    int(pool[cand]) not in nbrs or guard > 50 * k
                ):
                    sel[i, got] = cand
                    got += 1
        return sel

    def _plan_sgns(self, name: str, batch: int, rng) -> SgnsPlan | None:
        active = self.active[name]
        if len(active) == 0:
            return None
        k = self.cfg.loss.negatives_per_anchor
        anchors = rng.choice(active, size=batch, replace=len(active) < batch)
        pos = self._weighted_positives(name, anchors, rng)
        n = self.nets[name].n_nodes()
        size = min(n, max(4 * k, 64))
        if name in self.skew_cum:
            pool = self._skewed_pool(self.skew_cum[name], size, rng)
        else:
            pool = rng.integers(0, n, size=size)
        neg_sel = self._pool_negatives(
            pool, [int(a) for a in anchors], self.nbr_sets[name], k, rng
        )
        return SgnsPlan(
            anchors=self._sample_many(name, anchors, rng),
            positives=self._sample_many(name, pos, rng),
            neg_pool=self._sample_many(name, pool, rng),
            neg_sel=neg_sel,
        )

    def _plan_intra(self, batch: int, rng) -> IntraPlan | None:
        n = self.target_net.n_nodes()
        k = self.cfg.loss.negatives_per_anchor
        batch = min(batch, n)
        if batch < k + 1:
            return None
        idxs = rng.choice(n, size=batch, replace=False)
        return IntraPlan(
            view1=self._sample_many("target", idxs, rng),
            view2=self._sample_many("target", idxs, rng),
            neg_idx=L.sample_batch_negatives(batch, k, rng),
        )

    def _plan_align(self, kinds, tau: float, batch: int, rng) -> AlignPlan | None:
        pairs = [(s, t) for s, t, kind in self.aligned_pairs if kind in kinds]
        if len(pairs) < 2:
            return None
        if len(pairs) > batch:
            sel = rng.choice(len(pairs), size=batch, replace=False)
            pairs = [pairs[i] for i in sel]
        k = min(self.cfg.loss.negatives_per_anchor, len(pairs) - 1)
        neg_idx = L.sample_batch_negatives(len(pairs), k, rng)
        return AlignPlan(
            src=self._sample_many("source", [s for s, _ in pairs], rng),
            tgt=self._sample_many("target", [t for _, t in pairs], rng),
            neg_idx=neg_idx,
            tau=tau,
        )

    def _plan_neighbor_align(self, batch: int, rng) -> NeighborAlignPlan | None:
        if not self.aligned_pairs:
            return None
        cfg = self.cfg
        k = cfg.loss.negatives_per_anchor
        fan = cfg.loss.neighbor_pos_fanout
        sel = self.aligned_pairs
        budget = cfg.loss.neighbor_pairs_per_step
        if budget is None:
            budget = max(1, batch // fan)  # pairs stay within one batch of rows
        if len(sel) > budget:
            pick = rng.choice(len(sel), size=budget, replace=False)
            sel = [sel[i] for i in pick]
        anchor_nodes: list[int] = []
        anchor_row: dict[int, int] = {}
        anchor_map: list[int] = []
        positives: list[int] = []
        pos_owner: list[int] = []
        net = self.target_net
        for s_idx, t_idx, _ in sel:
            lo, hi = net.indptr[t_idx], net.indptr[t_idx + 1]
            if lo == hi:
                continue  # aligned node with no target neighbors contributes nothing
            n_pos = min(fan, hi - lo)
            cum = net.cumw[lo:hi]
            picks = np.searchsorted(cum, rng.random(n_pos) * cum[-1], side="right")
            for p in picks:
                if s_idx not in anchor_row:
                    anchor_row[s_idx] = len(anchor_nodes)
                    anchor_nodes.append(s_idx)
                anchor_map.append(anchor_row[s_idx])
                positives.append(int(net.nbr[lo + p]))
                pos_owner.append(t_idx)
        if not positives:
            return None
        # negatives share one pool of target nodes of the dominant positive
        # kind; each pair selects k rows avoiding its aligned node's neighbors
        kinds = [net.nodes[p].kind for p in positives]
        pool_parts = []
        for kind in sorted(set(kinds), key=lambda kd: kd.value):
            cand = self.kind_pool[kind]
            take = min(len(cand), max(2 * k, 32))
            if kind in self.kind_skew:
                pool_parts.append(
                    cand[self._skewed_pool(self.kind_skew[kind], take, rng)]
                )
            else:
                pool_parts.append(rng.choice(cand, size=take, replace=False))
        pool = np.concatenate(pool_parts)
        kind_ok = {
            kind: np.array([net.nodes[int(j)].kind == kind for j in pool])
            for kind in set(kinds)
        }
        neg_sel = np.empty((len(positives), k), dtype=np.int64)
        for i, (owner, kind) in enumerate(zip(pos_owner, kinds)):
            nbrs = self.nbr_sets["target"][owner]
            valid = [
                j
                for j in range(len(pool))
                if kind_ok[kind][j]
                and int(pool[j]) != owner
                and int(pool[j]) not in nbrs
            ]
            if len(valid) >= k:
                neg_sel[i] = rng.choice(valid, size=k, replace=False)
            elif valid:
                neg_sel[i] = rng.choice(valid, size=k, replace=True)
            else:
                neg_sel[i] = rng.integers(0, len(pool), size=k)
        return NeighborAlignPlan(
            anchors=self._sample_many("source", anchor_nodes, rng),
            anchor_map=np.asarray(anchor_map, dtype=np.int64),
            positives=self._sample_many("target", positives, rng),
            neg_pool=self._sample_many("target", pool, rng),
            neg_sel=neg_sel,
        )

    def plan_step(self, rng: np.random.Generator) -> StepPlan:
        cfg = self.cfg
        batch = cfg.batch_size
        lcfg = cfg.loss
        sgns_s = self._plan_sgns("source", batch, rng) if lcfg.lambda1 else None
        sgns_t = self._plan_sgns("target", batch, rng) if lcfg.lambda2 else None
        intra = self._plan_intra(batch, rng) if lcfg.lambda3 else None
        user_plan = None
        taxo_plans: list[AlignPlan] = []
        nbr_plan = None
        user_skipped = True
        if lcfg.lambda4:
            if (
                lcfg.enable_inter_user
                and self.target_has_user_edges
                and not cfg.strict_cold_start
            ):
                user_plan = self._plan_align(
                    (NodeKind.USER,), lcfg.tau_for(NodeKind.USER), batch, rng
                )
                user_skipped = user_plan is None
            if lcfg.enable_inter_taxonomy:
                for kind in L.TAXONOMY_KINDS:
                    plan = self._plan_align((kind,), lcfg.tau_for(kind), batch, rng)
                    if plan is not None:
                        taxo_plans.append(plan)
            if lcfg.enable_inter_neighbor:
                nbr_plan = self._plan_neighbor_align(batch, rng)
        return StepPlan(
            sgns_source=sgns_s,
            sgns_target=sgns_t,
            intra=intra,
            inter_user=user_plan,
            inter_taxonomy=taxo_plans,
            inter_neighbor=nbr_plan,
            user_skipped=user_skipped,
        )


# -- numeric pass ------------------------------------------------------------


def _forward(
    samples: "Packed | list[NeighborhoodSample]", dm: DomainModel
) -> tuple[np.ndarray, ForwardRecord]:
    if isinstance(samples, Packed):
        mids, leaves = samples.mids, samples.leaves
    else:
        mids, leaves = pack_samples(samples)
    return forward_batch_recorded(mids, leaves, dm.embeddings, dm.layers)


def _forward_parts(
    parts: list[Packed], dm: DomainModel
) -> tuple[list[np.ndarray], ForwardRecord, list[slice]]:
    """One packed forward over the concatenation of ``parts``.

    Returns the per-part output rows plus the shared record and slices so
    the caller can run a single backward with concatenated gradients.
    """
    slices = []
    at = 0
    for part in parts:
        slices.append(slice(at, at + len(part)))
        at += len(part)
    merged = Packed(
        mids=np.concatenate([p.mids for p in parts]),
        leaves=np.concatenate([p.leaves for p in parts]),
    )
    out, rec = _forward(merged, dm)
    return [out[sl] for sl in slices], rec, slices


def _sgns_family(
    plan: SgnsPlan, dm: DomainModel, lcfg: LossConfig, weight: float,
    grads: DomainGrads | None,
) -> float:
    B = len(plan.anchors)
    (av, pv, nv), rec, slices = _forward_parts(
        [plan.anchors, plan.positives, plan.neg_pool], dm
    )
    nv3 = nv[plan.neg_sel]  # (B, K, d)
    pos_dots = np.einsum("bd,bd->b", av, pv)
    neg_dots = np.einsum("bd,bkd->bk", av, nv3)
    value = float(L.sgns_terms(pos_dots, neg_dots, lcfg.literal_neighbor_loss).mean())
    if grads is not None and weight != 0.0:
        g_pos, g_neg = L.sgns_dot_grads(pos_dots, neg_dots, lcfg.literal_neighbor_loss)
        scale = weight / B
        g_all = np.zeros((slices[-1].stop, av.shape[1]), dtype=av.dtype)
        g_all[slices[0]] = scale * (
            g_pos[:, None] * pv + np.einsum("bk,bkd->bd", g_neg, nv3)
        )
        g_all[slices[1]] = scale * g_pos[:, None] * av
        np.add.at(
            g_all[slices[2]],
            plan.neg_sel.ravel(),
            (scale * g_neg[:, :, None] * av[:, None, :]).reshape(-1, av.shape[1]),
        )
        backward_batch(rec, g_all, dm.layers, grads)
    return value


def _infonce_family(
    anchors_vec: np.ndarray,
    anchors_rec: ForwardRecord,
    anchors_dm: DomainModel,
    pos_vec: np.ndarray,
    pos_rec: ForwardRecord,
    pos_dm: DomainModel,
    neg_idx: np.ndarray,
    tau: float,
    weight: float,
    grads_anchor: DomainGrads | None,
    grads_pos: DomainGrads | None,
) -> float:
    """InfoNCE with in-batch negatives drawn from the positive-side rows."""
    negs = pos_vec[neg_idx]
    value, gA, gP, gN = L.infonce_grads(anchors_vec, pos_vec, negs, tau)
    if grads_anchor is not None and weight != 0.0:
        g_pos_rows = weight * gP
        np.add.at(g_pos_rows, neg_idx.ravel(), gN.reshape(-1, gN.shape[-1]) * weight)
        backward_batch(anchors_rec, weight * gA, anchors_dm.layers, grads_anchor)
        backward_batch(pos_rec, g_pos_rows, pos_dm.layers, grads_pos)
    return value


def loss_and_grads(
    plan: StepPlan,
    model: Model,
    lcfg: LossConfig,
    compute_grads: bool = True,
    isolate: str | None = None,
) -> tuple[dict[str, float], GradientSet | None]:
    """Loss components and (optionally) gradients of the weighted total.

    With ``isolate`` set to one of LOSS_KEYS, gradients are of that single
    component with unit weight, for the gradient checker.
    """
    grads = GradientSet.zeros_like(model) if compute_grads else None

    def w(key: str, base: float) -> float:
        if isolate is not None:
            return 1.0 if key == isolate else 0.0
        return base

    def active(key: str) -> bool:
        # isolating one component skips the other families entirely
        return isolate is None or key == isolate

    comps = {k: 0.0 for k in LOSS_KEYS}

    if plan.sgns_source is not None and active("L_Ns"):
        comps["L_Ns"] = _sgns_family(
            plan.sgns_source, model.source, lcfg, w("L_Ns", lcfg.lambda1),
            grads.source if grads else None,
        )
    if plan.sgns_target is not None and active("L_Nt"):
        comps["L_Nt"] = _sgns_family(
            plan.sgns_target, model.target, lcfg, w("L_Nt", lcfg.lambda2),
            grads.target if grads else None,
        )
    if plan.intra is not None and active("L_intra"):
        (v1, v2), rec, slices = _forward_parts(
            [plan.intra.view1, plan.intra.view2], model.target
        )
        negs = v2[plan.intra.neg_idx]
        value, gA, gP, gN = L.infonce_grads(v1, v2, negs, lcfg.tau)
        comps["L_intra"] = value
        weight = w("L_intra", lcfg.lambda3)
        if grads is not None and weight != 0.0:
            g_all = np.zeros((slices[-1].stop, v1.shape[1]), dtype=v1.dtype)
            g_all[slices[0]] = weight * gA
            g_all[slices[1]] = weight * gP
            np.add.at(
                g_all[slices[1]],
                plan.intra.neg_idx.ravel(),
                weight * gN.reshape(-1, gN.shape[-1]),
            )
            backward_batch(rec, g_all, model.target.layers, grads.target)

    inter_weight_base = lcfg.lambda4
    if plan.inter_user is not None and active("L_inter_u"):
        sv, sr = _forward(plan.inter_user.src, model.source)
        tv, tr = _forward(plan.inter_user.tgt, model.target)
        comps["L_inter_u"] = _infonce_family(
            sv, sr, model.source, tv, tr, model.target,
            plan.inter_user.neg_idx, plan.inter_user.tau,
            w("L_inter_u", inter_weight_base),
            grads.source if grads else None,
            grads.target if grads else None,
        )
    if plan.inter_taxonomy and active("L_inter_t"):
        total_anchors = sum(len(p.src) for p in plan.inter_taxonomy)
        acc = 0.0
        for p in plan.inter_taxonomy:
            frac = len(p.src) / total_anchors
            sv, sr = _forward(p.src, model.source)
            tv, tr = _forward(p.tgt, model.target)
            value = _infonce_family(
                sv, sr, model.source, tv, tr, model.target,
                p.neg_idx, p.tau,
                w("L_inter_t", inter_weight_base) * frac,
                grads.source if grads else None,
                grads.target if grads else None,
            )
            acc += frac * value
        comps["L_inter_t"] = acc
    if plan.inter_neighbor is not None and active("L_inter_n"):
        p = plan.inter_neighbor
        au, arec = _forward(p.anchors, model.source)
        av = au[p.anchor_map]
        (pv, nv), rec, slices = _forward_parts(
            [p.positives, p.neg_pool], model.target
        )
        value, gA, gP, gN = L.infonce_grads(av, pv, nv[p.neg_sel], lcfg.tau)
        comps["L_inter_n"] = value
        weight = w("L_inter_n", inter_weight_base)
        if grads is not None and weight != 0.0:
            g_anchor = np.zeros_like(au)
            np.add.at(g_anchor, p.anchor_map, weight * gA)
            g_all = np.zeros((slices[-1].stop, pv.shape[1]), dtype=pv.dtype)
            g_all[slices[0]] = weight * gP
            np.add.at(
                g_all[slices[1]], p.neg_sel.ravel(),
                weight * gN.reshape(-1, gN.shape[-1]),
            )
            backward_batch(arec, g_anchor, model.source.layers, grads.source)
            backward_batch(rec, g_all, model.target.layers, grads.target)

    if grads is not None:
        grads.check_finite()
    return comps, grads


def total_from_components(comps: dict[str, float], lcfg: LossConfig) -> float:
    l_inter = comps["L_inter_u"] + comps["L_inter_t"] + comps["L_inter_n"]
    return L.total_loss(comps["L_Ns"], comps["L_Nt"], comps["L_intra"], l_inter, lcfg)


# -- optimizers --------------------------------------------------------------


class AdamState:
    """Adam with lazy (per-touched-row) updates for the embedding tables."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, shape, per_row: bool = False):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.per_row = per_row
        if per_row:
            self.t = np.zeros(shape[0], dtype=np.int64)
        else:
            self.t = 0

    def update(self, param: np.ndarray, grad: np.ndarray, lr: float,
               rows: np.ndarray | None = None) -> None:
        b1, b2, eps = self.BETA1, self.BETA2, self.EPS
        if self.per_row:
            if rows is None or len(rows) == 0:
                return
            self.t[rows] += 1
            self.m[rows] = b1 * self.m[rows] + (1 - b1) * grad[rows]
            self.v[rows] = b2 * self.v[rows] + (1 - b2) * grad[rows] ** 2
            t = self.t[rows][:, None].astype(np.float64)
            mh = self.m[rows] / (1 - b1 ** t)
            vh = self.v[rows] / (1 - b2 ** t)
            param[rows] -= lr * mh / (np.sqrt(vh) + eps)
        else:
            self.t += 1
            self.m = b1 * self.m + (1 - b1) * grad
            self.v = b2 * self.v + (1 - b2) * grad ** 2
            mh = self.m / (1 - b1 ** self.t)
            vh = self.v / (1 - b2 ** self.t)
            param -= lr * mh / (np.sqrt(vh) + eps)


class Optimizer:
    def __init__(self, model: Model, cfg: TrainerConfig):
        self.cfg = cfg
        self.kind = cfg.optimizer
        if self.kind == "adam":
            self.states = {}
            for name in ("source", "target"):
                dm = model.domain(name)
                l1, l2 = dm.layers
                self.states[name] = {
                    "E": AdamState(dm.embeddings.shape, per_row=True),
                    "W1": AdamState(l1.W.shape),
                    "a1": AdamState(l1.a.shape),
                    "W2": AdamState(l2.W.shape),
                    "a2": AdamState(l2.a.shape),
                }

    def step(self, model: Model, grads: GradientSet) -> None:
        lr = self.cfg.learning_rate
        for name in ("source", "target"):
            dm = model.domain(name)
            dg = grads.source if name == "source" else grads.target
            l1, l2 = dm.layers
            touched = np.nonzero(np.any(dg.E != 0.0, axis=1))[0]
            if self.kind == "sgd":
                if len(touched):
                    dm.embeddings[touched] -= lr * dg.E[touched]
                for p, g in ((l1.W, dg.W1), (l1.a, dg.a1), (l2.W, dg.W2), (l2.a, dg.a2)):
                    if np.any(g != 0.0):
                        p -= lr * g
            else:
                st = self.states[name]
                st["E"].update(dm.embeddings, dg.E, lr, rows=touched)
                for key, p, g in (
                    ("W1", l1.W, dg.W1), ("a1", l1.a, dg.a1),
                    ("W2", l2.W, dg.W2), ("a2", l2.a, dg.a2),
                ):
                    if np.any(g != 0.0):
                        st[key].update(p, g, lr)


# -- gradient checking -------------------------------------------------------


def gradient_check(
    model: Model,
    planner: BatchPlanner,
    lcfg: LossConfig,
    seed: int = 0,
    h: float = 1e-4,
    max_entries: int | None = None,
) -> dict[str, float]:
    """Max relative FD error per loss component (and the weighted total).

    Central differences on every parameter entry with nonzero analytic
    gradient; the step plan is frozen so each loss is a pure function of
    the parameters.
    """
    rng = np.random.default_rng(seed)
    plan = planner.plan_step(rng)
    report: dict[str, float] = {}
    targets = list(LOSS_KEYS) + ["total"]
    for key in targets:
        isolate = None if key == "total" else key
        comps, grads = loss_and_grads(plan, model, lcfg, isolate=isolate)
        if isolate is not None and comps[isolate] == 0.0 and grads.global_norm() == 0.0:
            continue  # family absent from this plan

        def value_at() -> float:
            c, _ = loss_and_grads(
                plan, model, lcfg, compute_grads=False, isolate=isolate
            )
            if isolate is not None:
                return c[isolate]
            return total_from_components(c, lcfg)

        param_arrays = []
        for name in ("source", "target"):
            dm = model.domain(name)
            dg = grads.source if name == "source" else grads.target
            l1, l2 = dm.layers
            param_arrays += [
                (dm.embeddings, dg.E), (l1.W, dg.W1), (l1.a, dg.a1),
                (l2.W, dg.W2), (l2.a, dg.a2),
            ]
        # one flat candidate list so the budget is global per target
        candidates: list[tuple[int, int]] = []
        for ai, (_, g) in enumerate(param_arrays):
            for i in np.nonzero(g.reshape(-1) != 0.0)[0]:
                candidates.append((ai, int(i)))
        if max_entries is not None and len(candidates) > max_entries:
            picked = rng.choice(len(candidates), size=max_entries, replace=False)
            candidates = [candidates[int(j)] for j in picked]
        max_rel = 0.0
        for ai, i in candidates:
            param, g = param_arrays[ai]
            flat_p = param.reshape(-1)
            analytic = g.reshape(-1)[i]
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = value_at()
            flat_p[i] = orig - h
            down = value_at()
            flat_p[i] = orig
            fd = (up - down) / (2 * h)
            # floor at the FD resolution limit: central differences carry
            # ~eps*|f|/h of roundoff, so entries below ~1e-6 cannot be
            # compared relatively and would only measure FD noise
            denom = max(abs(fd), abs(analytic), 1e-6)
            max_rel = max(max_rel, abs(fd - analytic) / denom)
        report[key] = max_rel
    return report


# -- training loop -----------------------------------------------------------


def train(
    source_net: PreferenceNetwork,
    target_net: PreferenceNetwork,
    aligned: list[tuple[NodeKind, str]],
    cfg: TrainerConfig,
    model: Model | None = None,
    log_stream: IO[str] | None = None,
) -> tuple[Model, list[dict[str, float]]]:
    """Run the multi-task loop; returns the model and per-step loss history."""
    if model is None:
        model = Model.init(source_net, target_net, cfg)
    planner = BatchPlanner(source_net, target_net, aligned, cfg)
    optimizer = Optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    steps = cfg.steps_per_epoch
    if steps is None:
        active = max(len(planner.active["target"]), 1)
        steps = max(1, -(-active // cfg.batch_size))
    history: list[dict[str, float]] = []
    initial_total: float | None = None
    step_no = 0
    for _ in range(cfg.epochs):
        for _ in range(steps):
            step_no += 1
            plan = planner.plan_step(rng)
            comps, grads = loss_and_grads(plan, model, cfg.loss)
            total = total_from_components(comps, cfg.loss)
            if initial_total is None:
                initial_total = abs(total) if total != 0 else 1.0
            if abs(total) > 10.0 * initial_total:
                raise DivergenceError(
                    f"total loss {total:.4g} exceeded 10x initial at step {step_no}"
                )
            grads.clip_(cfg.gradient_clip_norm)
            optimizer.step(model, grads)
            record = {"step": step_no, **{k: comps[k] for k in LOSS_KEYS}, "total": total}
            history.append(record)
            if log_stream is not None:
                log_stream.write(json.dumps(record) + "\n")
    return model, history


def compute_all_embeddings(
    model_domain: DomainModel,
    net: PreferenceNetwork,
    fanouts: tuple[int, int],
    seed: int,
    chunk: int = 512,
) -> np.ndarray:
    """Aggregated representation for every node, deterministic per seed."""
    rng = np.random.default_rng(seed)
    n = net.n_nodes()
    mids, leaves = sample_neighborhoods_packed(net, np.arange(n), fanouts, rng)
    out = np.empty((n, model_domain.layers[1].d_out))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        vals, _ = forward_batch_recorded(
            mids[lo:hi], leaves[lo:hi], model_domain.embeddings, model_domain.layers
        )
        out[lo:hi] = vals
    return out
