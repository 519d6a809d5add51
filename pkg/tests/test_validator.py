from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import pytest

from trajforge.metrics import exact_match
from trajforge.trajectory import Turn, deserialize
from trajforge.validator import (
    RULES,
    ValidatorSettings,
    Violation,
    audit_sample,
    behavioral_check,
    class_balance,
    content_length,
    dumps_reports,
    lint,
    lint_corpus,
    load_lexicon,
    meaningful_length,
    structural_check,
    yes_no_label,
)

FIX = Path(__file__).resolve().parent.parent / "fixtures"


def golden():
    return deserialize((FIX / "tool_calling" / "depth2_segment_ground.json").read_text("utf-8"))


def with_turns(t, turns):
    return replace(t, turns=tuple(turns))


def test_golden_passes_both_stages():
    rep = lint(golden(), ValidatorSettings(lexicon=load_lexicon()), matcher=exact_match, gold="right lower zone")
    assert rep.verdict == "pass" and rep.violations == ()


def test_correctness_uses_gold():
    rep = structural_check(golden(), matcher=exact_match, gold="no")
    assert rep.reject_rules == {"correctness"}


def test_repetition_loop_on_identical_calls():
    t = golden()
    turns = list(t.turns)
    dup = [turns[1], turns[2]]
    rep = behavioral_check(with_turns(t, turns[:3] + dup + turns[3:]))
    assert "repetition_loop" in rep.reject_rules


def test_missing_think():
    t = golden()
    turns = list(t.turns)
    turns[1] = Turn.call(replace(turns[1].action, think=""))
    assert behavioral_check(with_turns(t, turns)).reject_rules == {"missing_think"}


def test_truncation_signatures():
    t = golden()
    turns = list(t.turns)
    turns[1] = turns[1].with_think("The segmentation should show whether the")
    assert behavioral_check(with_turns(t, turns)).reject_rules == {"truncation"}
    turns = list(t.turns)
    turns[2] = Turn.observation(turns[2].content + "\n```python\nprint(1)")
    assert behavioral_check(with_turns(t, turns)).reject_rules == {"truncation"}


def test_hallucination_is_a_flag():
    rep = lint(deserialize((FIX / "validator" / "flag" / "hallucination_keyword.json").read_text("utf-8")),
               ValidatorSettings(lexicon=frozenset({"pneumothorax"})))
    assert rep.rule_ids == ["hallucination_keyword"] and rep.verdict == "flagged" and rep.reject_rules == set()
    # grounded terms are not flagged
    assert lint(golden(), ValidatorSettings(lexicon=frozenset({"effusion"}))).violations == ()


def test_short_content_spares_final_answer():
    t = golden()
    turns = list(t.turns)
    turns[-1] = Turn.gpt("[FINAL] yes", turns[-1].think)
    assert behavioral_check(with_turns(t, turns)).violations == ()
    turns[2] = Turn.observation("{ok: 1}")
    assert behavioral_check(with_turns(t, turns)).reject_rules == {"short_content"}


def test_meaningful_and_content_length():
    assert meaningful_length("<think> ** `a` </think> <image> {\"b\": [c]}") == 3
    t = golden()
    turns = list(t.turns)
    turns[2] = Turn.observation(turns[2].content + " data:image/png;base64," + "A" * 5000)
    assert content_length(with_turns(t, turns)) == content_length(t) + 1


def test_depth_bound_follows_settings():
    t = golden()
    assert lint(t, ValidatorSettings(depth_bounds={"tool_calling": 1})).reject_rules == {"depth_bound"}
    assert lint(t, ValidatorSettings(length_bound=100)).reject_rules == {"length_bound"}


def test_lint_is_idempotent_and_monotone():
    t = golden()
    assert lint(t) == lint(t)
    neg = deserialize((FIX / "validator" / "negative" / "grammar.json").read_text("utf-8"), strict=False)
    rep = lint(neg)
    extra = with_turns(neg, list(neg.turns) + [Turn.gpt("x")])
    assert rep.reject_rules <= lint(extra).reject_rules


def test_violation_rejects_unknown_rule():
    with pytest.raises(Exception):
        Violation("made_up", "x")
    assert set(RULES.values()) == {"reject", "flag"}


def test_lint_corpus_and_report_json():
    ts = [deserialize(p.read_text("utf-8"), strict=False) for p in sorted((FIX / "validator").rglob("*.json"))]
    reports = lint_corpus(ts, ValidatorSettings(lexicon=frozenset({"pneumothorax"})))
    assert [r.trajectory_id for r in reports] == sorted(r.trajectory_id for r in reports)
    summary = json.loads(dumps_reports(reports))["summary"]
    assert summary == {"pass": 5, "reject": 12, "flagged": 1}


def test_simulation_defaults_to_diagnosis_matcher():
    t = deserialize((FIX / "simulation" / "tb_depth4.json").read_text("utf-8"))
    assert t.final_answer == "Tuberculosis" and t.meta["gold_answer"] == "Pulmonary Tuberculosis"
    assert structural_check(t).violations == ()
    assert structural_check(t, matcher=exact_match).reject_rules == {"correctness"}


# ---------------------------------------------------------------------------
# balancing and audit

def test_yes_no_label():
    assert yes_no_label(" Yes. ") == "yes"
    assert yes_no_label("pleural effusion") is None


def test_class_balance_seeded():
    recs = ["yes"] * 300 + ["no"] * 100
    kept = class_balance(recs, yes_no_label, 1 / 3, seed=7)
    yes = kept.count("yes")
    assert 80 <= yes <= 120 and kept.count("no") == 100
    assert class_balance(recs, yes_no_label, 1 / 3, seed=7) == kept


def test_class_balance_trivial_cases():
    balanced = ["yes", "no"] * 50
    assert class_balance(balanced, yes_no_label, 1 / 3, seed=0) == balanced
    skewed = ["yes"] * 30 + ["no"]
    assert class_balance(skewed, yes_no_label, 1.0, seed=0) == skewed
    single = ["yes"] * 10
    assert class_balance(single, yes_no_label, 1 / 3, seed=0) == single


def test_audit_sample():
    corpus = list(range(100))
    picked = audit_sample(corpus, 0.10, seed=3)
    assert len(picked) == 10 and picked == audit_sample(corpus, 0.10, seed=3)
    assert audit_sample([42], 0.10) == [42]
    big = list(range(1000))
    assert set(audit_sample(big, seed=1)) != set(audit_sample(big, seed=2))
    assert audit_sample([], 0.5) == []
