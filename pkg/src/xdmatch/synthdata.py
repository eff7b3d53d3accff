"""Reproducible two-domain synthetic datasets with known latent structure.

Every user group, item, and taxonomy node carries a latent interest
vector; interaction probabilities follow a softmax of latent affinity
multiplied by a power-law item popularity.  Aligned users and taxonomies
share both ids and latents across the two domains, so cross-domain
signal exists by construction while item ids never collide.  Output is
exactly the ingestion TSV formats plus test_instances.jsonl.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from itertools import product

import numpy as np

GENDERS = ("M", "F")
AGE_BUCKETS = ("13_17", "18_24", "25_34", "35_44", "45_54", "55plus")

BEHAVIOR_WEIGHTS = {"click": 1.0, "like": 2.0, "share": 3.0}
BEHAVIOR_PROBS = {"click": 0.7, "like": 0.2, "share": 0.1}


@dataclass
class SynthConfig:
    seed: int = 0
    n_user_groups: int = 2000
    n_items: int = 5000
    n_tags: int = 200
    n_categories: int = 20
    n_medias: int = 100
    n_words: int = 1000
    latent_dim: int = 16
    user_overlap: float = 0.5
    taxonomy_overlap: float = 0.8
    users_per_group: int = 3
    source_behaviors_per_user: tuple[int, int] = (8, 16)
    target_behaviors_per_user: tuple[int, int] = (2, 5)
    popularity_skew: float = 0.8
    affinity_sharpness: float = 6.0
    train_fraction: float = 0.8
    tags_per_item: tuple[int, int] = (1, 3)
    words_per_item: tuple[int, int] = (3, 6)
    learnability_quantile: float = 0.9
    ks_bound: float = 0.05

    def __post_init__(self):
        for frac in (self.user_overlap, self.taxonomy_overlap):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("overlap fractions must lie in [0, 1]")
        for count in (
            self.n_user_groups, self.n_items, self.n_tags,
            self.n_categories, self.n_medias, self.n_words,
        ):
            if count < 1:
                raise ValueError("all counts must be >= 1")


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class _DomainData:
    name: str
    group_ids: list[str]
    group_latents: np.ndarray
    item_ids: list[str]
    item_latents: np.ndarray
    item_category: list[str]
    item_tags: list[list[str]]
    item_media: list[str]
    item_words: list[list[str]]
    tag_ids: list[str]
    category_ids: list[str]
    media_ids: list[str]
    word_ids: list[str]
    behaviors: list[tuple] = field(default_factory=list)
    # behavior tuple: (time, group_idx, item_idx, btype, satisf)


def _split_aligned(n: int, overlap: float, prefix: str, domain_suffixes=("s", "t")):
    """Id lists for two domains sharing the first round(overlap*n) entries."""
    n_aligned = int(round(overlap * n))
    shared = [f"{prefix}{i:05d}" for i in range(n_aligned)]
    ids = {}
    for suffix in domain_suffixes:
        own = [f"{prefix}{i:05d}{suffix}" for i in range(n_aligned, n)]
        ids[suffix] = shared + own
    return n_aligned, ids


def _group_triplets(n: int) -> list[str]:
    out = []
    loc = 0
    while len(out) < n:
        for g, a in product(GENDERS, AGE_BUCKETS):
            out.append(f"{g}-{a}-loc{loc:05d}")
            if len(out) == n:
                break
        loc += 1
    return out


class SynthDataset:
    """In-memory generated dataset; ``write`` emits the ingestion files."""

    def __init__(self, config: SynthConfig):
        self.config = config
        self.domains: dict[str, _DomainData] = {}
        self.test_instances: list[dict] = []
        self.profiles: list[tuple[str, str]] = []  # (raw_user_id, group_id)
        self.stats: dict = {}
        self._generate()

    # -- generation ----------------------------------------------------------

    def _generate(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d = cfg.latent_dim

        n_cat_aligned = int(round(cfg.taxonomy_overlap * cfg.n_categories))
        n_tag_aligned = int(round(cfg.taxonomy_overlap * cfg.n_tags))
        n_word_aligned = int(round(cfg.taxonomy_overlap * cfg.n_words))
        n_user_aligned = int(round(cfg.user_overlap * cfg.n_user_groups))

        # shared latents for aligned nodes, drawn once
        cat_shared = _unit(rng, (n_cat_aligned, d))
        _, cat_ids = _split_aligned(cfg.n_categories, cfg.taxonomy_overlap, "cat")

        triplets = _group_triplets(n_user_aligned + 2 * (cfg.n_user_groups - n_user_aligned))
        shared_groups = triplets[:n_user_aligned]
        extra = triplets[n_user_aligned:]
        group_ids = {
            "s": shared_groups + extra[: cfg.n_user_groups - n_user_aligned],
            "t": shared_groups + extra[cfg.n_user_groups - n_user_aligned :],
        }
        user_shared = None  # filled by first domain

        tag_shared_latent = None
        tag_shared_cat = None
        word_shared_latent = None
        _, tag_ids = _split_aligned(cfg.n_tags, cfg.taxonomy_overlap, "tag")
        _, word_ids = _split_aligned(cfg.n_words, cfg.taxonomy_overlap, "w")

        for suffix, name in (("s", "source"), ("t", "target")):
            # categories
            cats = cat_ids[suffix]
            cat_lat = np.vstack(
                [cat_shared, _unit(rng, (cfg.n_categories - n_cat_aligned, d))]
            )
            # tags: each belongs to a category; aligned tags reuse the
            # first domain's assignment and latent
            if tag_shared_latent is None:
                tag_cat_idx = rng.integers(0, cfg.n_categories, size=cfg.n_tags)
                # aligned tags must hang off aligned categories
                if n_cat_aligned > 0:
                    tag_cat_idx[:n_tag_aligned] = rng.integers(
                        0, n_cat_aligned, size=n_tag_aligned
                    )
                tag_lat = 0.75 * cat_lat[tag_cat_idx] + 0.45 * _unit(rng, (cfg.n_tags, d))
                tag_lat /= np.linalg.norm(tag_lat, axis=1, keepdims=True)
                tag_shared_latent = tag_lat[:n_tag_aligned].copy()
                tag_shared_cat = tag_cat_idx[:n_tag_aligned].copy()
            else:
                tag_cat_idx = rng.integers(0, cfg.n_categories, size=cfg.n_tags)
                tag_cat_idx[:n_tag_aligned] = tag_shared_cat
                tag_lat = 0.75 * cat_lat[tag_cat_idx] + 0.45 * _unit(rng, (cfg.n_tags, d))
                tag_lat /= np.linalg.norm(tag_lat, axis=1, keepdims=True)
                tag_lat[:n_tag_aligned] = tag_shared_latent

            # words
            if word_shared_latent is None:
                word_lat = 0.6 * cat_lat[rng.integers(0, cfg.n_categories, cfg.n_words)]
                word_lat = word_lat + 0.6 * _unit(rng, (cfg.n_words, d))
                word_lat /= np.linalg.norm(word_lat, axis=1, keepdims=True)
                word_shared_latent = word_lat[:n_word_aligned].copy()
            else:
                word_lat = 0.6 * cat_lat[rng.integers(0, cfg.n_categories, cfg.n_words)]
                word_lat = word_lat + 0.6 * _unit(rng, (cfg.n_words, d))
                word_lat /= np.linalg.norm(word_lat, axis=1, keepdims=True)
                word_lat[:n_word_aligned] = word_shared_latent

            media_ids = [f"m{i:04d}{suffix}" for i in range(cfg.n_medias)]

            # items derive from a primary tag
            item_ids = [f"i{i:05d}{suffix}" for i in range(cfg.n_items)]
            primary_tag = rng.integers(0, cfg.n_tags, size=cfg.n_items)
            item_lat = 0.8 * tag_lat[primary_tag] + 0.35 * _unit(rng, (cfg.n_items, d))
            item_lat /= np.linalg.norm(item_lat, axis=1, keepdims=True)
            item_category = [cats[tag_cat_idx[t]] for t in primary_tag]
            item_media = [media_ids[rng.integers(0, cfg.n_medias)] for _ in item_ids]

            tags_list = tag_ids[suffix]
            item_tags: list[list[str]] = []
            same_cat_tags: dict[int, np.ndarray] = {}
            for c in range(cfg.n_categories):
                same_cat_tags[c] = np.nonzero(tag_cat_idx == c)[0]
            lo_t, hi_t = cfg.tags_per_item
            for i in range(cfg.n_items):
                want = int(rng.integers(lo_t, hi_t + 1))
                chosen = [int(primary_tag[i])]
                pool = same_cat_tags[int(tag_cat_idx[primary_tag[i]])]
                while len(chosen) < want and len(pool) > len(chosen):
                    cand = int(pool[rng.integers(0, len(pool))])
                    if cand not in chosen:
                        chosen.append(cand)
                item_tags.append([tags_list[t] for t in chosen])

            # words sampled by latent affinity
            word_logits = cfg.affinity_sharpness * (item_lat @ word_lat.T)
            words_list = word_ids[suffix]
            lo_w, hi_w = cfg.words_per_item
            item_words: list[list[str]] = []
            for i in range(cfg.n_items):
                k = int(rng.integers(lo_w, hi_w + 1))
                p = np.exp(word_logits[i] - word_logits[i].max())
                p /= p.sum()
                picks = rng.choice(cfg.n_words, size=k, replace=False, p=p)
                item_words.append([words_list[w] for w in sorted(picks)])

            # user groups
            grp_cat = rng.integers(0, cfg.n_categories, size=cfg.n_user_groups)
            if n_cat_aligned > 0:
                grp_cat[:n_user_aligned] = rng.integers(0, n_cat_aligned, n_user_aligned)
            grp_lat = 0.7 * cat_lat[grp_cat] + 0.5 * _unit(rng, (cfg.n_user_groups, d))
            grp_lat /= np.linalg.norm(grp_lat, axis=1, keepdims=True)
            if user_shared is None:
                user_shared = grp_lat[:n_user_aligned].copy()
            else:
                grp_lat[:n_user_aligned] = user_shared

            dd = _DomainData(
                name=name,
                group_ids=group_ids[suffix],
                group_latents=grp_lat,
                item_ids=item_ids,
                item_latents=item_lat,
                item_category=item_category,
                item_tags=item_tags,
                item_media=item_media,
                item_words=item_words,
                tag_ids=tags_list,
                category_ids=cats,
                media_ids=media_ids,
                word_ids=words_list,
            )
            self._sample_behaviors(dd, rng)
            self.domains[name] = dd

        self.profiles = []
        seen_groups = sorted(
            set(self.domains["source"].group_ids) | set(self.domains["target"].group_ids)
        )
        for g, group in enumerate(seen_groups):
            for u in range(self.config.users_per_group):
                self.profiles.append((f"u{g:05d}_{u}", group))

        self._build_test_instances()
        self._check_learnability()
        self.stats["source_ks_distance"] = self.interaction_ks_distance("source")

    def _sample_behaviors(self, dd: _DomainData, rng: np.random.Generator) -> None:
        cfg = self.config
        n_items = cfg.n_items
        # power-law popularity over a random item permutation
        ranks = rng.permutation(n_items)
        pop = (1.0 + ranks).astype(np.float64) ** (-cfg.popularity_skew)
        log_pop = np.log(pop)
        self.stats.setdefault("popularity", {})[dd.name] = pop

        lo, hi = (
            cfg.source_behaviors_per_user
            if dd.name == "source"
            else cfg.target_behaviors_per_user
        )
        logits = cfg.affinity_sharpness * (dd.group_latents @ dd.item_latents.T) + log_pop
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        btypes = list(BEHAVIOR_PROBS)
        bprobs = np.array([BEHAVIOR_PROBS[b] for b in btypes])
        for g in range(cfg.n_user_groups):
            n_b = int(rng.integers(lo, hi + 1)) * cfg.users_per_group
            items = rng.choice(n_items, size=n_b, p=probs[g])
            times = rng.random(n_b)
            kinds = rng.choice(len(btypes), size=n_b, p=bprobs)
            satisf = 0.5 + 0.5 * rng.random(n_b)
            for t, i, k, s in zip(times, items, kinds, satisf):
                dd.behaviors.append((float(t), g, int(i), btypes[int(k)], float(s)))
        dd.behaviors.sort()

    def _train_behaviors(self, dd: _DomainData):
        cut = self.config.train_fraction
        return [b for b in dd.behaviors if b[0] < cut]

    def _test_behaviors(self, dd: _DomainData):
        cut = self.config.train_fraction
        return [b for b in dd.behaviors if b[0] >= cut]

    def _build_test_instances(self) -> None:
        src = self.domains["source"]
        tgt = self.domains["target"]
        per_group_events: dict[str, list[tuple]] = {}
        for dd in (src, tgt):
            for t, g, i, kind, s in self._train_behaviors(dd):
                per_group_events.setdefault(dd.group_ids[g], []).append((t, dd, i, s))
        truths: dict[str, set[str]] = {}
        for t, g, i, kind, s in self._test_behaviors(tgt):
            truths.setdefault(tgt.group_ids[g], set()).add(tgt.item_ids[i])

        self.test_instances = []
        for group in sorted(truths):
            events = sorted(per_group_events.get(group, []), key=lambda e: e[0])
            if not events:
                continue
            seq_events = [
                {
                    "item": dd.item_ids[i],
                    "satisf": round(s, 4),
                    "tags": dd.item_tags[i],
                    "category": dd.item_category[i],
                    "media": dd.item_media[i],
                    "words": dd.item_words[i],
                }
                for _, dd, i, s in events[-200:]
            ]
            self.test_instances.append(
                {
                    "user_group": group,
                    "truths": sorted(truths[group]),
                    "sequence": {"user_group": group, "events": seq_events},
                }
            )

    # -- generator sanity checks ---------------------------------------------

    def _check_learnability(self) -> None:
        """Truth items must sit above the corpus-median affinity for their user."""
        cfg = self.config
        tgt = self.domains["target"]
        group_index = {g: i for i, g in enumerate(tgt.group_ids)}
        item_index = {it: i for i, it in enumerate(tgt.item_ids)}
        affinity = tgt.group_latents @ tgt.item_latents.T
        medians = np.median(affinity, axis=1)
        total = hits = 0
        for inst in self.test_instances:
            gi = group_index[inst["user_group"]]
            for truth in inst["truths"]:
                total += 1
                if affinity[gi, item_index[truth]] > medians[gi]:
                    hits += 1
        frac = hits / total if total else 1.0
        self.stats["learnability"] = frac
        if frac < cfg.learnability_quantile:
            raise ValueError(
                f"generated ground truth not learnable: {frac:.3f} < "
                f"{cfg.learnability_quantile}"
            )

    def interaction_ks_distance(self, domain: str) -> float:
        """KS distance between empirical item picks and the exact marginal."""
        cfg = self.config
        dd = self.domains[domain]
        pop = self.stats["popularity"][domain]
        logits = cfg.affinity_sharpness * (dd.group_latents @ dd.item_latents.T)
        logits += np.log(pop)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        expected = probs.mean(axis=0)
        counts = np.zeros(cfg.n_items)
        for _, _, i, _, _ in dd.behaviors:
            counts[i] += 1
        empirical = counts / counts.sum()
        return float(np.abs(np.cumsum(empirical - expected)).max())

    # -- serialization -------------------------------------------------------

    def node_lines(self) -> list[str]:
        lines = []
        for name, dd in self.domains.items():
            for kind, ids in (
                ("user", dd.group_ids),
                ("item", dd.item_ids),
                ("tag", dd.tag_ids),
                ("category", dd.category_ids),
                ("media", dd.media_ids),
                ("word", dd.word_ids),
            ):
                lines += [f"{kind}\t{i}\t{name}" for i in ids]
        return sorted(lines)

    def edge_lines(self, include_target_behaviors: bool = True) -> list[str]:
        lines = []
        for name, dd in self.domains.items():
            behavioral = include_target_behaviors or name == "source"
            if behavioral:
                ui: dict[tuple[int, int], float] = {}
                sessions: dict[int, list[int]] = {}
                for t, g, i, kind, _ in self._train_behaviors(dd):
                    ui[(g, i)] = ui.get((g, i), 0.0) + BEHAVIOR_WEIGHTS[kind]
                    sessions.setdefault(g, []).append(i)
                for (g, i), w in sorted(ui.items()):
                    w_str = repr(w) if w != int(w) else str(int(w))
                    lines.append(
                        f"user\t{dd.group_ids[g]}\titem\t{dd.item_ids[i]}\t{w_str}\t{name}"
                    )
                ii: dict[tuple[int, int], int] = {}
                for seq in sessions.values():
                    for a, b in zip(seq, seq[1:]):
                        if a == b:
                            continue
                        key = (a, b) if a < b else (b, a)
                        ii[key] = ii.get(key, 0) + 1
                for (a, b), c in sorted(ii.items()):
                    lines.append(
                        f"item\t{dd.item_ids[a]}\titem\t{dd.item_ids[b]}\t{c}\t{name}"
                    )
            for i, item in enumerate(dd.item_ids):
                for tag in dd.item_tags[i]:
                    lines.append(f"tag\t{tag}\titem\t{item}\t1\t{name}")
                lines.append(f"category\t{dd.item_category[i]}\titem\t{item}\t1\t{name}")
                lines.append(f"media\t{dd.item_media[i]}\titem\t{item}\t1\t{name}")
                for w in dd.item_words[i]:
                    lines.append(f"word\t{w}\titem\t{item}\t1\t{name}")
        return lines

    def profile_lines(self) -> list[str]:
        lines = []
        for raw_id, group in self.profiles:
            gender, age, loc = group.split("-", 2)
            lines.append(f"{raw_id}\t{gender}\t{age}\t{loc}")
        return lines

    def write(self, out_dir: str, strict_cold_start: bool = False) -> None:
        os.makedirs(out_dir, exist_ok=True)
        instances = self.test_instances
        if strict_cold_start:
            instances = _strip_target_items(instances, set(self.domains["target"].item_ids))
        with open(os.path.join(out_dir, "nodes.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.node_lines()) + "\n")
        with open(os.path.join(out_dir, "edges.tsv"), "w", encoding="utf-8") as fh:
            fh.write(
                "\n".join(self.edge_lines(include_target_behaviors=not strict_cold_start))
                + "\n"
            )
        with open(os.path.join(out_dir, "profiles.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.profile_lines()) + "\n")
        with open(
            os.path.join(out_dir, "test_instances.jsonl"), "w", encoding="utf-8"
        ) as fh:
            for inst in instances:
                fh.write(json.dumps(inst, sort_keys=True) + "\n")
        meta = {
            "mode": "strict_cold_start" if strict_cold_start else "few_shot",
            "seed": self.config.seed,
            "learnability": self.stats["learnability"],
            "source_ks_distance": self.stats["source_ks_distance"],
        }
        with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _strip_target_items(instances: list[dict], target_items: set[str]) -> list[dict]:
    out = []
    for inst in instances:
        events = [
            e for e in inst["sequence"]["events"] if e["item"] not in target_items
        ]
        if not events:
            continue
        out.append(
            {
                "user_group": inst["user_group"],
                "truths": inst["truths"],
                "sequence": {"user_group": inst["user_group"], "events": events},
            }
        )
    return out


def generate(config: SynthConfig, out_dir: str | None = None) -> SynthDataset:
    """Build a few-shot dataset; optionally write the ingestion files."""
    ds = SynthDataset(config)
    if out_dir is not None:
        ds.write(out_dir)
    return ds


def strict_cold_start_transform(in_dir: str, out_dir: str) -> None:
    """Drop all target-domain behavioral edges and sequence events.

    Idempotent: target U-I and I-I edge lines are removed, sequence events
    referencing target items are filtered out, truths stay unchanged, and
    the source domain is untouched.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(in_dir, "nodes.tsv"), encoding="utf-8") as fh:
        nodes_text = fh.read()
    target_items = {
        line.split("\t")[1]
        for line in nodes_text.splitlines()
        if line and line.split("\t")[0] == "item" and line.split("\t")[2] == "target"
    }
    with open(os.path.join(out_dir, "nodes.tsv"), "w", encoding="utf-8") as fh:
        fh.write(nodes_text)

    kept = []
    with open(os.path.join(in_dir, "edges.tsv"), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            behavioral = {parts[0], parts[2]} in ({"user", "item"}, {"item"})
            if behavioral and parts[5] == "target":
                continue
            kept.append(line)
    with open(os.path.join(out_dir, "edges.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(kept) + "\n")

    for name in ("profiles.tsv", "meta.json"):
        path = os.path.join(in_dir, name)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                data = fh.read()
            if name == "meta.json":
                meta = json.loads(data)
                meta["mode"] = "strict_cold_start"
                data = json.dumps(meta, indent=2, sort_keys=True) + "\n"
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(data)

    instances = []
    with open(os.path.join(in_dir, "test_instances.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                instances.append(json.loads(line))
    instances = _strip_target_items(instances, target_items)
    with open(
        os.path.join(out_dir, "test_instances.jsonl"), "w", encoding="utf-8"
    ) as fh:
        for inst in instances:
            fh.write(json.dumps(inst, sort_keys=True) + "\n")
