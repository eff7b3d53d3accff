"""HIT@N / coverage metrics, leakage guard, and report formatting."""

import json

import pytest

from xdmatch.evaluation import (
    ABLATION_VARIANTS,
    HIT_NS,
    EvalReport,
    LeakageError,
    TestInstance,
    ablation_rows_to_csv,
    hit_at_n,
    item_coverage,
    load_test_instances,
    run_eval,
)
from xdmatch.graph import NodeKind
from xdmatch.retrieval import (
    BehaviorEvent,
    BehaviorSequence,
    MatchResult,
    RetrievalIndex,
)


def result_of(*items: str) -> MatchResult:
    return MatchResult(
        entries=[(i, 1.0 - 0.01 * j, {}) for j, i in enumerate(items)],
        candidates_touched=len(items),
    )


class TestMetrics:
    def test_hit_micro_average_oracle(self):
        # 3 truth pairs total: 2 hits in the first instance, 0 in the second
        results = [result_of("a", "b", "c"), result_of("x")]
        truths = [["a", "c"], ["q"]]
        assert hit_at_n(results, truths, 3) == pytest.approx(2 / 3)
        assert hit_at_n(results, truths, 1) == pytest.approx(1 / 3)

    def test_hit_counts_each_truth_item(self):
        # micro averaging weights instances by their truth count
        results = [result_of("a"), result_of("b")]
        truths = [["a", "z", "w"], ["b"]]
        assert hit_at_n(results, truths, 1) == pytest.approx(2 / 4)

    def test_hit_empty_is_zero(self):
        assert hit_at_n([], [], 10) == 0.0

    def test_coverage_oracle(self):
        results = [result_of("a", "b"), result_of("b", "c")]
        assert item_coverage(results, 6) == pytest.approx(3 / 6)
        assert item_coverage([], 5) == 0.0
        assert item_coverage(results, 0) == 0.0


def tiny_index() -> RetrievalIndex:
    idx = RetrievalIndex(k=2)
    idx.add(NodeKind.ITEM, "s1", [("t1", 0.9), ("t2", 0.5)])
    idx.add(NodeKind.ITEM, "s2", [("t2", 0.8), ("t3", 0.4)])
    return idx


def instance(items: list[str], truths: list[str]) -> TestInstance:
    return TestInstance(
        sequence=BehaviorSequence(
            user_group=None, events=[BehaviorEvent(item=i) for i in items]
        ),
        truths=truths,
    )


class TestRunEval:
    def test_end_to_end_hit(self):
        insts = [instance(["s1"], ["t1"]), instance(["s2"], ["t9"])]
        report, results = run_eval(tiny_index(), insts, ["t1", "t2", "t3"])
        assert report.hit[50] == pytest.approx(1 / 2)
        assert report.instance_count == 2
        assert report.coverage == pytest.approx(3 / 3)
        assert len(results) == 2

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            run_eval(tiny_index(), [instance(["s1"], ["t1"])], ["t1"], mode="online")

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            run_eval(tiny_index(), [], ["t1"])

    def test_strict_mode_needs_target_ids(self):
        with pytest.raises(ValueError, match="target item id"):
            run_eval(
                tiny_index(),
                [instance(["s1"], ["t1"])],
                ["t1"],
                mode="strict_cold_start",
            )

    def test_strict_mode_aborts_on_leak(self):
        insts = [instance(["s1", "t2"], ["t1"])]
        with pytest.raises(LeakageError, match="t2"):
            run_eval(
                tiny_index(),
                insts,
                ["t1", "t2"],
                mode="strict_cold_start",
                target_item_ids={"t1", "t2", "t3"},
            )

    def test_strict_mode_clean_sequences_pass(self):
        insts = [instance(["s1"], ["t1"])]
        report, _ = run_eval(
            tiny_index(),
            insts,
            ["t1", "t2", "t3"],
            mode="strict_cold_start",
            target_item_ids={"t1", "t2", "t3"},
        )
        assert report.hit[50] == 1.0


class TestInstanceIO:
    def test_load_jsonl(self, tmp_path):
        p = tmp_path / "insts.jsonl"
        rec = {
            "user_group": "g",
            "truths": ["t1"],
            "sequence": {"user_group": "g", "events": [{"item": "s1"}]},
        }
        p.write_text(json.dumps(rec) + "\n\n" + json.dumps(rec) + "\n")
        insts = load_test_instances(str(p))
        assert len(insts) == 2
        assert insts[0].truths == ["t1"]
        assert insts[0].sequence.events[0].item == "s1"


class TestReporting:
    def test_report_text_contains_all_ns(self):
        rep = EvalReport(
            hit={n: 0.5 for n in HIT_NS}, coverage=0.25, instance_count=7
        )
        text = rep.to_text()
        for n in HIT_NS:
            assert f"HIT@{n}" in text
        assert "0.2500" in text and "7" in text

    def test_report_json_keys_are_strings(self):
        rep = EvalReport(hit={50: 0.1}, coverage=0.2, instance_count=1)
        js = rep.to_json()
        assert js["hit"] == {"50": 0.1}

    def test_ablation_csv_layout(self):
        rows = [
            {
                "variant": "full",
                "mode": "few_shot",
                "seed": 0,
                "hit": {n: 0.125 for n in HIT_NS},
                "item_coverage": 0.5,
            },
            {
                "variant": "no_inter_u",
                "mode": "strict_cold_start",
                "seed": 1,
                "hit": {n: None for n in HIT_NS},
                "item_coverage": None,
            },
        ]
        csv = ablation_rows_to_csv(rows)
        lines = csv.splitlines()
        assert lines[0].split(",")[:3] == ["variant", "mode", "seed"]
        assert lines[1].split(",")[3] == "0.125000"
        assert lines[2].split(",")[3] == ""  # skipped variant stays blank

    def test_ablation_variant_table(self):
        assert set(ABLATION_VARIANTS) == {
            "full", "no_intra", "no_inter", "no_inter_u",
            "no_inter_t", "no_inter_n", "no_cl",
        }
        assert ABLATION_VARIANTS["no_cl"] == {"lambda3": 0.0, "lambda4": 0.0}
        assert ABLATION_VARIANTS["full"] == {}
