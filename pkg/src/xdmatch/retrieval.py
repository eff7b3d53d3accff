"""Precomputed top-K item index and six-channel candidate matching.

Offline, every anchor node (items, taxonomies, user groups) gets an exact
brute-force top-100 nearest-target-item list by cosine.  Online, a user's
behavior sequence scores candidates through six channels (user, item,
tag, category, media, word); each channel reads similarities from the
index only, never recomputing them, weights the terms by satisfaction and
an exponential recency decay, and the weighted channel sums are reranked
into the final top 500.

Each channel keeps at most 100*n candidates (n = sequence length), so a
match call touches at most 600*n candidate items in total.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import NodeKind

TOP_K = 100
TOP_N_OUT = 500
MAX_SEQUENCE = 200
RECENCY_DECAY = 0.95

CHANNELS = ("user", "item", "tag", "category", "media", "word")

CHANNEL_KIND = {
    "user": NodeKind.USER,
    "item": NodeKind.ITEM,
    "tag": NodeKind.TAG,
    "category": NodeKind.CATEGORY,
    "media": NodeKind.MEDIA,
    "word": NodeKind.WORD,
}


@dataclass
class BehaviorEvent:
    item: str
    satisf: float = 1.0
    tags: list[str] = field(default_factory=list)
    category: str | None = None
    media: str | None = None
    words: list[str] = field(default_factory=list)


@dataclass
class BehaviorSequence:
    """Clicked items oldest to newest, truncated to the 200 most recent."""

    user_group: str | None
    events: list[BehaviorEvent]

    def __post_init__(self):
        if len(self.events) > MAX_SEQUENCE:
            self.events = self.events[-MAX_SEQUENCE:]
        for e in self.events:
            if not 0.0 <= e.satisf <= 1.0:
                raise ValueError(f"satisf {e.satisf} outside [0, 1]")

    @staticmethod
    def from_json(record: dict) -> "BehaviorSequence":
        events = [
            BehaviorEvent(
                item=e["item"],
                satisf=float(e.get("satisf", 1.0)),
                tags=list(e.get("tags", [])),
                category=e.get("category"),
                media=e.get("media"),
                words=list(e.get("words", [])),
            )
            for e in record.get("events", [])
        ]
        return BehaviorSequence(user_group=record.get("user_group"), events=events)

    def to_json(self) -> dict:
        return {
            "user_group": self.user_group,
            "events": [
                {
                    "item": e.item,
                    "satisf": e.satisf,
                    "tags": e.tags,
                    "category": e.category,
                    "media": e.media,
                    "words": e.words,
                }
                for e in self.events
            ],
        }


def recency(j: int, n: int) -> float:
    """Exponential decay from the newest position: 0.95^(n-j), j 1-based."""
    return RECENCY_DECAY ** (n - j)


class RetrievalIndex:
    """Per-anchor exact top-K nearest target items with cosine scores."""

    def __init__(self, k: int = TOP_K):
        self.k = k
        self.entries: dict[tuple[NodeKind, str], list[tuple[str, float]]] = {}

    def add(self, kind: NodeKind, anchor_id: str, items: list[tuple[str, float]]):
        self.entries[(kind, anchor_id)] = items

    def get(self, kind: NodeKind, anchor_id: str) -> list[tuple[str, float]] | None:
        return self.entries.get((kind, anchor_id))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# top_k\t{self.k}\n")
            fh.write(f"# anchors\t{len(self.entries)}\n")
            for (kind, anchor_id), items in sorted(self.entries.items()):
                payload = ",".join(f"{i}:{s:.6f}" for i, s in items)
                fh.write(f"{kind.value}\t{anchor_id}\t{payload}\n")

    @staticmethod
    def load(path: str) -> "RetrievalIndex":
        idx = RetrievalIndex()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("# top_k"):
                    idx.k = int(line.split("\t")[1])
                    continue
                if line.startswith("#"):
                    continue
                kind_s, anchor_id, payload = line.split("\t")
                items = []
                if payload:
                    for tok in payload.split(","):
                        item_id, score = tok.rsplit(":", 1)
                        items.append((item_id, float(score)))
                idx.add(NodeKind(kind_s), anchor_id, items)
        return idx


def build_index(
    anchors: list[tuple[NodeKind, str]],
    anchor_vecs: np.ndarray,
    item_ids: list[str],
    item_vecs: np.ndarray,
    k: int = TOP_K,
    chunk: int = 512,
) -> RetrievalIndex:
    """Exact top-k by cosine over the full target corpus.

    Ties break by item id ascending.  Zero-norm anchors are skipped with
    a warning; zero-norm corpus items likewise.
    """
    order = np.argsort(np.array(item_ids, dtype=object), kind="stable")
    item_ids = [item_ids[i] for i in order]
    item_vecs = item_vecs[order]
    norms = np.linalg.norm(item_vecs, axis=1)
    bad = norms == 0
    if np.any(bad):
        warnings.warn(f"skipping {int(bad.sum())} zero-norm corpus items")
        keep = ~bad
        item_ids = [i for i, ok in zip(item_ids, keep) if ok]
        item_vecs = item_vecs[keep]
        norms = norms[keep]
    items_hat = item_vecs / norms[:, None]

    idx = RetrievalIndex(k=k)
    for lo in range(0, len(anchors), chunk):
        batch = anchors[lo : lo + chunk]
        vecs = anchor_vecs[lo : lo + chunk]
        anorms = np.linalg.norm(vecs, axis=1)
        scores = np.zeros((len(batch), len(item_ids)))
        ok = anorms > 0
        scores[ok] = (vecs[ok] / anorms[ok, None]) @ items_hat.T
        # stable argsort on -scores keeps id-ascending order among ties,
        # because the corpus is pre-sorted by id
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for row, (kind, anchor_id) in enumerate(batch):
            if not ok[row]:
                warnings.warn(f"zero-norm anchor {kind.value}/{anchor_id} skipped")
                continue
            idx.add(
                kind,
                anchor_id,
                [(item_ids[j], float(scores[row, j])) for j in top[row]],
            )
    return idx


@dataclass
class MatchResult:
    """Reranked top candidates with per-channel score breakdown."""

    entries: list[tuple[str, float, dict[str, float]]]
    candidates_touched: int

    def item_ids(self) -> list[str]:
        return [item for item, _, _ in self.entries]

    def to_json(self) -> dict:
        return {
            "candidates_touched": self.candidates_touched,
            "items": [
                {"item": item, "score": score, "channels": dict(sorted(br.items()))}
                for item, score, br in self.entries
            ],
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _cap_channel(scores: dict[str, float], limit: int) -> dict[str, float]:
    # enforce the per-channel candidate budget of the complexity contract
    if len(scores) <= limit:
        return scores
    kept = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]
    return dict(kept)


def item_channel(
    seq: BehaviorSequence, index: RetrievalIndex
) -> dict[str, float]:
    """Candidate scores from the clicked-item anchors (read off the index)."""
    n = len(seq.events)
    scores: dict[str, float] = {}
    for j, event in enumerate(seq.events, start=1):
        entry = index.get(NodeKind.ITEM, event.item)
        if entry is None:
            warnings.warn(f"sequence item {event.item!r} missing from index")
            continue
        factor = event.satisf * recency(j, n)
        for item_id, sim in entry:
            scores[item_id] = scores.get(item_id, 0.0) + sim * factor
    return _cap_channel(scores, TOP_K * max(n, 1))


def taxonomy_channel(
    seq: BehaviorSequence, index: RetrievalIndex, kind: NodeKind
) -> dict[str, float]:
    """Candidate scores from per-event attribute anchors of one kind."""
    n = len(seq.events)
    scores: dict[str, float] = {}
    for j, event in enumerate(seq.events, start=1):
        if kind == NodeKind.TAG:
            attrs = event.tags
        elif kind == NodeKind.CATEGORY:
            attrs = [event.category] if event.category else []
        elif kind == NodeKind.MEDIA:
            attrs = [event.media] if event.media else []
        elif kind == NodeKind.WORD:
            attrs = event.words
        else:
            raise ValueError(f"not a taxonomy channel kind: {kind}")
        factor = event.satisf * recency(j, n)
        for attr in attrs:
            entry = index.get(kind, attr)
            if entry is None:
                continue
            for item_id, sim in entry:
                scores[item_id] = scores.get(item_id, 0.0) + sim * factor
    return _cap_channel(scores, TOP_K * max(n, 1))


def user_channel(
    user_group: str | None, index: RetrievalIndex
) -> dict[str, float]:
    """Scores from the user-group anchor; empty when the group is unindexed."""
    if user_group is None:
        return {}
    entry = index.get(NodeKind.USER, user_group)
    if entry is None:
        return {}
    return dict(entry)


def match(
    seq: BehaviorSequence,
    index: RetrievalIndex,
    channel_weights: dict[str, float] | None = None,
    top_n: int = TOP_N_OUT,
    history_filter: bool = False,
) -> MatchResult:
    """Aggregate the six channels and rerank to the final top-N."""
    weights = {ch: 1.0 for ch in CHANNELS}
    if channel_weights:
        unknown = set(channel_weights) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels: {sorted(unknown)}")
        weights.update(channel_weights)

    maps = {
        "user": user_channel(seq.user_group, index),
        "item": item_channel(seq, index),
        "tag": taxonomy_channel(seq, index, NodeKind.TAG),
        "category": taxonomy_channel(seq, index, NodeKind.CATEGORY),
        "media": taxonomy_channel(seq, index, NodeKind.MEDIA),
        "word": taxonomy_channel(seq, index, NodeKind.WORD),
    }
    touched = sum(len(m) for m in maps.values())

    history = {e.item for e in seq.events} if history_filter else frozenset()
    totals: dict[str, float] = {}
    breakdowns: dict[str, dict[str, float]] = {}
    for ch in CHANNELS:
        w = weights[ch]
        if w == 0.0:
            continue
        for item_id, s in maps[ch].items():
            if item_id in history:
                continue
            contrib = w * s
            totals[item_id] = totals.get(item_id, 0.0) + contrib
            breakdowns.setdefault(item_id, {})[ch] = contrib

    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    entries = [(item, score, breakdowns[item]) for item, score in ranked]
    return MatchResult(entries=entries, candidates_touched=touched)
