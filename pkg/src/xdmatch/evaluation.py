"""Offline evaluation: HIT@N, item coverage, and the ablation matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .retrieval import BehaviorSequence, MatchResult, RetrievalIndex, match

HIT_NS = (50, 100, 200, 500)


class LeakageError(RuntimeError):
    """Strict cold-start sequence references a target-domain train item."""


@dataclass
class TestInstance:
    __test__ = False  # not a test class, despite the name

    sequence: BehaviorSequence
    truths: list[str]

    @staticmethod
    def from_json(record: dict) -> "TestInstance":
        return TestInstance(
            sequence=BehaviorSequence.from_json(record["sequence"]),
            truths=list(record["truths"]),
        )


@dataclass
class EvalReport:
    hit: dict[int, float]
    coverage: float
    instance_count: int
    rows: list[dict] = field(default_factory=list)  # per-ablation results

    def to_json(self) -> dict:
        return {
            "hit": {str(n): v for n, v in sorted(self.hit.items())},
            "item_coverage": self.coverage,
            "instances": self.instance_count,
            "ablation_rows": self.rows,
        }

    def to_text(self) -> str:
        lines = [f"instances  {self.instance_count}"]
        for n in sorted(self.hit):
            lines.append(f"HIT@{n:<4}  {self.hit[n]:.4f}")
        lines.append(f"coverage   {self.coverage:.4f}")
        if self.rows:
            lines.append("")
            header = ["variant"] + [f"HIT@{n}" for n in HIT_NS] + ["coverage"]
            lines.append("  ".join(f"{h:>10}" for h in header))
            for row in self.rows:
                cells = [row["variant"]]
                for n in HIT_NS:
                    v = row["hit"].get(str(n), row["hit"].get(n))
                    cells.append("N/A" if v is None else f"{v:.4f}")
                cov = row["item_coverage"]
                cells.append("N/A" if cov is None else f"{cov:.4f}")
                lines.append("  ".join(f"{c:>10}" for c in cells))
        return "\n".join(lines) + "\n"


def hit_at_n(results: list[MatchResult], truths: list[list[str]], n: int) -> float:
    """Micro-averaged over (instance, truth-item) pairs."""
    total = hits = 0
    for result, truth_items in zip(results, truths):
        top = set(result.item_ids()[:n])
        for item in truth_items:
            total += 1
            if item in top:
                hits += 1
    return hits / total if total else 0.0


def item_coverage(results: list[MatchResult], corpus_size: int) -> float:
    """Fraction of the target corpus appearing in any result list."""
    seen: set[str] = set()
    for result in results:
        seen.update(result.item_ids())
    return len(seen) / corpus_size if corpus_size else 0.0


def load_test_instances(path: str) -> list[TestInstance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                instances.append(TestInstance.from_json(json.loads(line)))
    return instances


def run_eval(
    index: RetrievalIndex,
    instances: list[TestInstance],
    corpus_ids: list[str],
    mode: str = "few_shot",
    target_item_ids: set[str] | None = None,
    channel_weights: dict[str, float] | None = None,
    top_ns: tuple[int, ...] = HIT_NS,
) -> tuple[EvalReport, list[MatchResult]]:
    """Match every instance and aggregate HIT@N and coverage.

    In strict cold-start mode any sequence event referencing a
    target-domain item is a train-set leak and aborts the run.
    """
    if mode not in ("few_shot", "strict_cold_start"):
        raise ValueError(f"unknown mode {mode!r}")
    if not instances:
        raise ValueError("empty test set")
    if mode == "strict_cold_start":
        if target_item_ids is None:
            raise ValueError("strict mode needs the target item id set")
        for inst in instances:
            for event in inst.sequence.events:
                if event.item in target_item_ids:
                    raise LeakageError(
                        f"target item {event.item!r} leaked into a strict "
                        f"cold-start sequence"
                    )
    results = [
        match(inst.sequence, index, channel_weights=channel_weights)
        for inst in instances
    ]
    truths = [inst.truths for inst in instances]
    report = EvalReport(
        hit={n: hit_at_n(results, truths, n) for n in top_ns},
        coverage=item_coverage(results, len(corpus_ids)),
        instance_count=len(instances),
    )
    return report, results


# Ablation variants: name -> loss-config overrides applied to the base run.
ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "no_intra": {"lambda3": 0.0},
    "no_inter": {"lambda4": 0.0},
    "no_inter_u": {"enable_inter_user": False},
    "no_inter_t": {"enable_inter_taxonomy": False},
    "no_inter_n": {"enable_inter_neighbor": False},
    "no_cl": {"lambda3": 0.0, "lambda4": 0.0},
}


def ablation_rows_to_csv(rows: list[dict]) -> str:
    header = ["variant", "mode", "seed"] + [f"hit@{n}" for n in HIT_NS] + ["item_coverage"]
    lines = [",".join(header)]
    for row in rows:
        cells = [row["variant"], row["mode"], str(row["seed"])]
        for n in HIT_NS:
            v = row["hit"].get(str(n), row["hit"].get(n))
            cells.append("" if v is None else f"{v:.6f}")
        cov = row["item_coverage"]
        cells.append("" if cov is None else f"{cov:.6f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
