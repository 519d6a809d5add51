from __future__ import annotations

import json
from fractions import Fraction

import pytest

from trajforge.environments import EnvironmentSuite, Sample
from trajforge.errors import InvariantViolation
from trajforge.pipeline import (
    EXHAUSTED,
    MISSING_INPUT,
    AgenticPair,
    DatasetRecord,
    PipelineSettings,
    TierPartition,
    assemble,
    attempt_seed,
    load_samples,
    run_pipeline,
    run_tier1,
    run_tier2,
    run_tier3,
    stats,
    temperature_for,
)
from trajforge.policy import PolicyHandle
from trajforge.synthetic import DATASET_ENVIRONMENTS, _matchers, expected_partition, make_world
from trajforge.trajectory import depth


def samples(n, ds="cxr", env_images=True):
    return [Sample(f"s{i}", ds, f"Question {i}: is there an effusion?", "yes",
                   ("images/cxr_001.png",) if env_images else ()) for i in range(n)]


def answering(correct_ids):
    """Direct policy that answers yes only for the given sample numbers."""
    def respond(req):
        qnum = int(req.messages[0].content.split("Question ")[1].split(":")[0])
        return "<think>Looked at it.</think>\n[FINAL] " + ("yes" if qnum in correct_ids else "no")
    return respond


RECAP_ZERO = json.dumps({"recap": [{"step": 0, "tool": "Terminate", "why": "The image answers it directly."}]})


def flaky_agent(fail_first: int):
    calls: dict[str, int] = {}

    def respond(req):
        q = req.messages[0].content
        calls[q] = calls.get(q, 0) + 1
        ans = "yes" if calls[q] > fail_first else "no"
        return f"<think>The image settles it.</think>\nClear on review.\n[FINAL] {ans}"
    return respond


# ---------------------------------------------------------------------------
# tiers

def test_attempt_seed_and_temperature():
    assert attempt_seed(0, "a", 1) == attempt_seed(0, "a", 1)
    assert len({attempt_seed(0, "a", k) for k in range(1, 9)}) == 8
    assert attempt_seed(0, "a", 1) != attempt_seed(1, "a", 1)
    assert [temperature_for((0.2, 0.7), k) for k in (1, 2, 8)] == [0.2, 0.7, 0.7]


def test_tier1_partition():
    direct, residual = run_tier1(samples(5), PolicyHandle.scripted("student", responder=answering({0, 2, 4})))
    assert len(direct) == 3 and [s.sample_id for s in residual] == ["s1", "s3"]
    assert all(r.tier == 1 and r.mode == "direct" and depth(r.trajectory) == 0 for r in direct)
    everyone, rest = run_tier1(samples(3), PolicyHandle.scripted("student", default="[FINAL] yes"))
    assert len(everyone) == 3 and rest == []


def test_tier2_partition():
    residual = samples(2)
    enhanced, residual2 = run_tier2(residual, PolicyHandle.scripted("teacher", responder=answering({1})))
    assert [r.sample_id for r in enhanced] == ["s1"] and [s.sample_id for s in residual2] == ["s0"]
    assert enhanced[0].trajectory.mode == "enhanced" and enhanced[0].tier == 2
    assert run_tier2([], PolicyHandle.scripted("teacher", default="x")) == ([], [])


def test_policy_failure_routes_to_residual():
    direct, residual = run_tier1(samples(2), PolicyHandle.scripted("student", {}))  # FixtureMiss on every call
    assert direct == [] and len(residual) == 2


def test_tier3_success_on_third_attempt():
    agent = PolicyHandle.scripted("agent", responder=flaky_agent(2))
    pairs, discard = run_tier3(samples(1), agent, {"cxr": "tool_calling"}, EnvironmentSuite(),
                               PolicyHandle.scripted("recap", default=RECAP_ZERO))
    assert discard == {} and len(pairs) == 1
    pair = pairs[0]
    assert pair.attempts == 3 and pair.prospective.trajectory.meta["attempts"] == 3
    assert pair.prospective.trajectory.actions == pair.retrospective.trajectory.actions
    assert pair.retrospective.trajectory.mode == "retrospective"


def test_tier3_exhausted_and_missing_input():
    agent = PolicyHandle.scripted("agent", responder=flaky_agent(99))
    recap = PolicyHandle.scripted("recap", default=RECAP_ZERO)
    pairs, discard = run_tier3(samples(1), agent, {"cxr": "tool_calling"}, EnvironmentSuite(), recap,
                               settings=PipelineSettings(retries=8))
    assert pairs == [] and discard == {"s0": EXHAUSTED}
    pairs, discard = run_tier3(samples(1, env_images=False), agent, {"cxr": "tool_calling"}, EnvironmentSuite(),
                               recap)
    assert discard == {"s0": MISSING_INPUT}
    with pytest.raises(InvariantViolation):
        run_tier3(samples(1), agent, {}, EnvironmentSuite(), recap)


# ---------------------------------------------------------------------------
# assembly

def _partition(n_direct, n_enhanced, n_agentic):
    student = PolicyHandle.scripted("student", default="<think>Plain.</think>\n[FINAL] yes")
    ss = samples(n_direct + n_enhanced + n_agentic)
    p = TierPartition()
    for s in ss[:n_direct]:
        p.direct.append(run_tier1([s], student)[0][0])
    for s in ss[n_direct:n_direct + n_enhanced]:
        p.enhanced.append(run_tier2([s], PolicyHandle.scripted("teacher", default="[FINAL] yes"))[0][0])
    if n_agentic:
        pairs, _ = run_tier3(ss[n_direct + n_enhanced:], PolicyHandle.scripted("agent", responder=flaky_agent(0)),
                             {"cxr": "tool_calling"}, EnvironmentSuite(),
                             PolicyHandle.scripted("recap", default=RECAP_ZERO))
        p.agentic.extend(pairs)
    for s in ss:
        p.datasets[s.sample_id] = s.dataset_id
    return p


def test_assemble_counts(tmp_path):
    a = assemble(_partition(3, 2, 4), tmp_path, majority_rate=1.0)
    assert len(a.corpus) == 13
    assert a.stats["by_tier"] == {"1": 3, "2": 2, "3": 8}
    assert a.stats["by_mode"] == {"direct": 3, "enhanced": 2, "prospective": 4, "retrospective": 4}
    assert a.stats["depth_histogram"] == {"0": 13}
    assert len((tmp_path / "corpus.jsonl").read_text("utf-8").splitlines()) == 13
    assert json.loads((tmp_path / "stats.json").read_text("utf-8")) == a.stats


def test_assemble_empty(tmp_path):
    a = assemble(TierPartition(), tmp_path)
    assert a.corpus == [] and a.discard == []
    assert a.stats["records"] == 0 and a.stats["samples"]["total"] == 0
    assert set(a.stats["by_tier"].values()) == {0}
    assert (tmp_path / "corpus.jsonl").read_text() == ""


def test_class_balance_single_label_is_untouched():
    a = assemble(_partition(10, 0, 10), majority_rate=0.0)  # every record is "yes": one label, no majority
    assert len(a.corpus) == 30


def test_class_balance_drops_pairs_whole():
    # samples s0..s9 direct, s10..s19 agentic; label 2/3 of them "yes" so "yes" is the majority
    label = lambda u: "no" if int(u.sample_id[1:]) % 3 == 0 else "yes"  # noqa: E731
    a = assemble(_partition(10, 0, 10), majority_rate=0.0, label=label)
    kept = [t.sample_id for t in a.corpus]
    assert kept and all(int(sid[1:]) % 3 == 0 for sid in kept)
    agentic = [sid for sid in kept if int(sid[1:]) >= 10]
    assert all(agentic.count(sid) == 2 for sid in agentic)
    dropped = {d["sample_id"] for d in a.discard if d["reason"] == "class_balance"}
    assert len(dropped) == 20 - len(set(kept))


def test_pair_invariant():
    p = _partition(1, 0, 1)
    pair = p.agentic[0]
    with pytest.raises(InvariantViolation):
        AgenticPair(pair.prospective, pair.prospective, 1)
    with pytest.raises(InvariantViolation):
        DatasetRecord(pair.prospective.sample, pair.prospective.trajectory, 1, "prospective")


# ---------------------------------------------------------------------------
# full runs over the synthetic world

def _run(world, workers=1):
    policies, _ = world.policies()
    return run_pipeline(world.samples, policies, DATASET_ENVIRONMENTS, world.suite(),
                        matchers=_matchers(), settings=PipelineSettings(global_seed=world.global_seed, workers=workers))


def test_tier_fractions_match_rates_exactly():
    world = make_world(1000, ("cxr_tools",), student_rate=0.6, teacher_rate=0.5)
    part = _run(world, workers=8)
    fr = assemble(part, majority_rate=1.0).stats["tier_fractions"]
    s, t = Fraction(3, 5), Fraction(1, 2)
    assert fr["1"] == float(s)
    assert fr["2"] == float((1 - s) * t)
    assert fr["3"] == float(1 - s - (1 - s) * t)


def test_partition_matches_plans_and_workers_agree():
    world = make_world(60, ("cxr_tools", "osce_sim"), recap_failures=2)
    p1, p4 = _run(world), _run(world, workers=4)
    assert p1.sample_ids() == p4.sample_ids() and p1.discard == p4.discard
    expected = expected_partition(world)
    got = {sid: kind for kind, ids in p1.sample_ids().items() for sid in ids}
    got.update({sid: f"discard:{r}" for sid, r in p1.discard.items()})
    assert got == expected
    a1, a4 = assemble(p1), assemble(p4)
    assert a1.corpus == a4.corpus and a1.stats == a4.stats


def test_stats_from_corpus_alone():
    a = assemble(_partition(2, 1, 1), majority_rate=1.0)
    again = stats(a.corpus, a.discard)
    assert again == a.stats and again["samples"]["total"] == 4


def test_load_samples(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"sample_id": "a", "question": "q?", "gold_answer": "yes"}) + "\n\n", "utf-8")
    (s,) = load_samples(path, "ds")
    assert s.dataset_id == "ds" and s.gold_answer == "yes"
