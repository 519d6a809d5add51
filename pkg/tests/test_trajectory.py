from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from trajforge.errors import InvariantViolation, ParseError
from trajforge.trajectory import (
    Action,
    ParamSpec,
    ToolSchema,
    Turn,
    build_trajectory,
    canonical_json,
    depth,
    deserialize,
    grammar_error_index,
    grammar_ok,
    invariant_problems,
    parse_action_body,
    read_jsonl,
    serialize,
    split_think,
    write_jsonl,
)

FIX = Path(__file__).resolve().parent.parent / "fixtures"


def call(name="ChestXRayClassifier", think="Check the classifier.", **args):
    return Turn.call(Action(name, args or {"image_path": "a.png"}, think))


def traj(turns, env="tool_calling", answer="yes", mode="prospective", **kw):
    return build_trajectory(sample_id="s1", environment_id=env, turns=turns, final_answer=answer, mode=mode, **kw)


def test_depth_examples():
    direct = traj([Turn.human("q"), Turn.gpt("[FINAL] yes")], env="direct", mode="direct")
    assert depth(direct) == 0
    three = traj([Turn.human("q")] + [call(), Turn.observation("o")] * 3 + [Turn.gpt("[FINAL] yes")])
    assert depth(three) == 3


def test_minimal_direct_document():
    t = traj([Turn.human("q"), Turn.gpt("[FINAL] yes")], env="direct", mode="direct")
    doc = json.loads(serialize(t))
    assert len(doc["conversations"]) == 2 and doc["images"] == []


def test_two_call_document_order():
    t = traj([Turn.human("q"), call(), Turn.observation("a"), call("ChestXRayReportGen"), Turn.observation("b"),
              Turn.gpt("[FINAL] yes")])
    doc = json.loads(serialize(t))
    assert [c["from"] for c in doc["conversations"]] == [
        "human", "function_call", "observation", "function_call", "observation", "gpt"]


def test_serialize_is_canonical():
    t = traj([Turn.human("q é"), Turn.gpt("[FINAL] yes")], env="direct", mode="direct")
    text = serialize(t)
    assert text.endswith("\n") and text.count("\n") == 1
    assert text[:-1] == canonical_json(json.loads(text))
    assert "é" in text  # UTF-8, not escaped


def test_golden_tool_calling_depth2():
    t = deserialize((FIX / "tool_calling" / "depth2_segment_ground.json").read_text(encoding="utf-8"))
    assert t.environment_id == "tool_calling" and depth(t) == 2
    assert [a.name for a in t.actions] == ["ChestXRaySegmentation", "XRayPhraseGrounding"]
    assert t.images == ("images/cxr_001.png",)


def test_parse_error_on_observation_before_call():
    doc = canonical_json({"conversations": [{"from": "human", "value": "q"}, {"from": "observation", "value": "o"},
                                            {"from": "gpt", "value": "a"}], "images": []})
    with pytest.raises(ParseError) as exc:
        deserialize(doc)
    assert exc.value.turn_index == 1
    assert exc.value.byte_offset is not None and exc.value.byte_offset > 0


def test_parse_error_on_image_misalignment():
    doc = canonical_json({"conversations": [{"from": "human", "value": "<image><image><image> q"},
                                            {"from": "gpt", "value": "a"}], "images": ["a", "b"]})
    with pytest.raises(ParseError, match="image"):
        deserialize(doc)


def test_parse_error_on_malformed_json_reports_offset():
    with pytest.raises(ParseError) as exc:
        deserialize('{"conversations": [}')
    assert exc.value.byte_offset == 19


def test_lenient_deserialize_accepts_broken_grammar():
    doc = canonical_json({"conversations": [{"from": "human", "value": "q"}, {"from": "gpt", "value": "a"},
                                            {"from": "gpt", "value": "b"}], "images": []})
    with pytest.raises(ParseError):
        deserialize(doc)
    assert len(deserialize(doc, strict=False).turns) == 3


def test_serialize_refuses_invariant_violations():
    t = traj([Turn.human("q"), Turn.gpt("[FINAL] yes")], env="tool_calling")
    bad = replace(t, turns=(Turn.human("q"), call(), Turn.gpt("[FINAL] yes")))
    with pytest.raises(InvariantViolation, match="turn order"):
        serialize(bad)
    over = traj([Turn.human("q")] + [call(), Turn.observation("o")] * 5 + [Turn.gpt("[FINAL] yes")])
    assert any("exceeds T_max" in p for p in invariant_problems(over))
    wrong = replace(t, final_answer="no")
    assert any("final_answer" in p for p in invariant_problems(wrong))


def test_grammar():
    assert grammar_ok(["human", "gpt"])
    assert grammar_ok(["human", "function_call", "observation", "gpt"])
    assert not grammar_ok(["human"])
    assert grammar_error_index(["human", "function_call", "gpt"]) == 2
    assert grammar_error_index(["gpt"]) == 0
    assert grammar_error_index(["human", "function_call", "observation"]) == 3


def test_think_split_and_turn_helpers():
    assert split_think("<think>a</think>\nbody") == ("a", "body")
    assert split_think("no think") == (None, "no think")
    turn = Turn.gpt("answer", "why")
    assert turn.think == "why" and turn.body == "answer"
    new = turn.with_think("because")
    assert new.body == turn.body and new.think == "because"
    c = call(think="t", image_path="x.png")
    assert c.action == Action("ChestXRayClassifier", {"image_path": "x.png"}, "t")


def test_parse_action_body_rejects_bad_shapes():
    assert parse_action_body('{"name": "A", "arguments": {}}').name == "A"
    for body in ("{}", "[]", '{"name": 3}', '{"name": "A", "arguments": []}', "not json"):
        with pytest.raises(ValueError):
            parse_action_body(body)


def test_tool_schema_argument_check():
    schema = ToolSchema("Zoom", "crop", {"image": ParamSpec("string", "", True), "param": ParamSpec("array", "", True)})
    assert schema.check_arguments({"image": "img_original", "param": [0, 0, 1, 1]}) == []
    assert schema.check_arguments({"image": "x"})
    assert schema.check_arguments({"image": 3, "param": []})
    assert schema.check_arguments({"image": "x", "param": [], "extra": 1})
    assert ToolSchema.from_json(schema.to_json()) == schema


def test_jsonl_round_trip(tmp_path):
    ts = [deserialize(p.read_text(encoding="utf-8")) for p in sorted((FIX / "simulation").glob("*.json"))]
    path = tmp_path / "c.jsonl"
    write_jsonl(path, ts)
    assert read_jsonl(path) == ts


_text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="<"), max_size=40)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(_text, _text), max_size=4), _text, st.sampled_from(["yes", "no", "maybe"]))
def test_round_trip_property(steps, question, answer):
    turns = [Turn.human(question)]
    for think, obs in steps:
        turns += [Turn.call(Action("ChestXRayClassifier", {"image_path": "a.png"}, think)), Turn.observation(obs)]
    turns.append(Turn.gpt(f"[FINAL] {answer}"))
    t = traj(turns, answer=answer, meta={"k": question})
    text = serialize(t)
    assert deserialize(text) == t
    assert serialize(deserialize(text)) == text
