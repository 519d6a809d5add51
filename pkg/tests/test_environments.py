from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from trajforge.environments import (
    EnvironmentSuite,
    ImageStore,
    PatientVignette,
    Reply,
    Sample,
    Terminal,
    ToolFixtures,
    VignetteStore,
    get_spec,
    majority_vote,
    parse_policy_output,
    reset,
    run_collaboration,
    run_episode,
    step,
)
from trajforge.environments.collaboration import parse_difficulty, parse_expert_answer, parse_recruits
from trajforge.environments.engine import FORCED_PROMPT, answer_from_turn, extract_answer
from trajforge.environments.images import crop_normalized
from trajforge.environments.simulation import NOT_AVAILABLE
from trajforge.errors import (
    DepthExceeded,
    EpisodeTerminated,
    InvariantViolation,
    MarkerMissing,
    MissingImage,
    MissingVignette,
    ProtocolViolation,
    SchemaViolation,
    ToolFailure,
    UnknownAction,
)
from trajforge.policy import PolicyHandle
from trajforge.trajectory import Action, Turn, depth, serialize

FIX = Path(__file__).resolve().parent.parent / "fixtures"


def tb() -> PatientVignette:
    return PatientVignette.from_dict(json.loads((FIX / "vignettes" / "mimic" / "tb_cough.json").read_text("utf-8")))


def cxr(sid="s1"):
    return Sample(sid, "d", "Is there an effusion?", "yes", ("images/cxr_001.png",))


# ---------------------------------------------------------------------------
# reset

def test_reset_tool_calling():
    st = reset(get_spec("tool_calling"), cxr())
    assert st.actions_taken == 0 and len(st.turns) == 1 and not st.terminated
    assert st.turns[0].images == ("images/cxr_001.png",)
    assert "Image path: images/cxr_001.png" in st.turns[0].content


def test_reset_interleaved_registry():
    st = reset(get_spec("interleaved"), cxr())
    assert st.image_registry == {"img_original": "images/cxr_001.png"}
    assert st.img_last == "img_original"


def test_reset_errors():
    with pytest.raises(MissingVignette):
        reset(get_spec("simulation"), Sample("s", "d", "q", "a"))
    with pytest.raises(MissingImage):
        reset(get_spec("tool_calling"), Sample("s", "d", "q", "a"))


def test_simulation_prompt_and_presentation_hide_findings():
    v = tb()
    st = reset(get_spec("simulation"), Sample("tb", "mimic", "Diagnosis?", "TB"), v)
    assert "Vital_Signs" in st.system_prompt and "Sputum Analysis" in st.system_prompt
    assert "55-year-old male" in st.turns[0].content
    assert "AFB" not in st.turns[0].content


# ---------------------------------------------------------------------------
# step

def test_simulation_exam_and_unavailable_test():
    st = reset(get_spec("simulation"), Sample("tb", "mimic", "Diagnosis?", "TB"), tb())
    obs = step(st, Action("RequestPhysicalExam", {"exam": "Vital_Signs"}, "vitals"))
    assert obs.content == "Temperature 36.8°C, BP 130/80, HR 82, RR 18."
    obs = step(st, Action("RequestTest", {"test": "MRI"}, "imaging"))
    assert obs.content == NOT_AVAILABLE and not st.terminated
    res = step(st, Action("Terminate", {"diagnosis": "Tuberculosis"}, "done"))
    assert isinstance(res, Terminal) and res.final_answer == "Tuberculosis"
    with pytest.raises(EpisodeTerminated):
        step(st, Action("RequestTest", {"test": "MRI"}, "again"))


def test_vignette_lookup_normalizes_and_nests():
    v = PatientVignette.from_dict(json.loads((FIX / "vignettes" / "mimic" / "dka.json").read_text("utf-8")))
    assert v.lookup("exam", "vital signs") == v.physical_examination_findings["Vital_Signs"]
    assert v.lookup("test", "pH") == "7.08"
    assert json.loads(v.lookup("test", "Arterial_Blood_Gas")) == {"pH": "7.08", "Bicarbonate": "8 mmol/L"}
    assert v.lookup("test", "Biopsy") == NOT_AVAILABLE


def test_vignette_leak_is_rejected():
    with pytest.raises(InvariantViolation):
        PatientVignette.from_dict({"Patient_Actor": {"Vital_Signs": "x"},
                                   "Physical_Examination_Findings": {"Vital_Signs": "y"}, "Correct_Diagnosis": "z"})


def test_zoom_full_frame_is_identity(tmp_path):
    st = reset(get_spec("interleaved"), cxr(), images=ImageStore(FIX, tmp_path))
    obs = step(st, Action("ZoomInSubfigure", {"image": "img_original", "param": [0, 0, 1000, 1000]}, "zoom"))
    assert st.img_last == "img_round_0"
    assert "[Output Image ID: img_round_0]" in obs.content and obs.image_count == 1
    original = np.asarray(Image.open(FIX / "images" / "cxr_001.png").convert("RGB"))
    assert np.array_equal(st.images.get(st.image_registry["img_round_0"]), original)
    assert (tmp_path / obs.images[0]).exists()
    # img_last aliases the newest crop
    step(st, Action("ZoomInSubfigure", {"image": "img_last", "param": [0, 0, 500, 500]}, "zoom"))
    assert st.img_last == "img_round_1"
    assert st.images.get(st.image_registry["img_round_1"]).shape[:2] == (48, 40)


def test_empty_crop_becomes_error_observation():
    st = reset(get_spec("interleaved"), cxr(), images=ImageStore(FIX))
    obs = step(st, Action("ZoomInSubfigure", {"image": "img_original", "param": [500, 500, 500, 900]}, "zoom"))
    assert obs.content.startswith("Error:") and st.actions_taken == 1
    with pytest.raises(ToolFailure):
        crop_normalized(np.zeros((10, 10)), [10, 10, 5, 5])


def test_unknown_tool_and_schema_violation_leave_state():
    st = reset(get_spec("tool_calling"), cxr())
    with pytest.raises(UnknownAction):
        step(st, Action("LungNoduleDetector", {}, ""))
    with pytest.raises(SchemaViolation):
        step(st, Action("ChestXRayClassifier", {}, ""))
    assert len(st.turns) == 1 and st.actions_taken == 0


def test_depth_exceeded_sets_forced():
    st = reset(get_spec("tool_calling", 1), cxr(), fixtures=ToolFixtures())
    step(st, Action("ChestXRayClassifier", {"image_path": "images/cxr_001.png"}, ""))
    with pytest.raises(DepthExceeded):
        step(st, Action("ChestXRayClassifier", {"image_path": "images/cxr_001.png"}, ""))
    assert st.forced and st.actions_taken == 1


def test_scripted_tool_lookup_prefers_exact_keys():
    fx = ToolFixtures()
    fx.add("*", "ChestXRayClassifier", "*", "generic")
    fx.add("s1", "ChestXRayClassifier", {"image_path": "images/cxr_001.png"}, "exact")
    st = reset(get_spec("tool_calling"), cxr(), fixtures=fx)
    assert step(st, Action("ChestXRayClassifier", {"image_path": "images/cxr_001.png"}, "")).content == "exact"
    assert step(st, Action("ChestXRayClassifier", {"image_path": "other.png"}, "")).content == "generic"


def test_tool_fixture_file_round_trip(tmp_path):
    fx = ToolFixtures()
    fx.add("s1", "OCR", {"image": "img_last"}, "text", "masks/a.png")
    fx.dump(tmp_path / "t.jsonl")
    back = ToolFixtures.from_jsonl(tmp_path / "t.jsonl")
    assert back.lookup("s1", "OCR", {"image": "img_last"}).image_ref == "masks/a.png"


# ---------------------------------------------------------------------------
# answers

def test_answer_extraction():
    assert answer_from_turn("tool_calling", Turn.gpt("reasoning ... [FINAL] yes")) == "yes"
    assert answer_from_turn("tool_calling", Turn.gpt("[FINAL] Yes.")) == "yes"
    body = json.dumps({"name": "Terminate", "arguments": {"ans": "Pleural effusion"}})
    assert answer_from_turn("interleaved", Turn.gpt(body, "t")) == "Pleural effusion"
    assert answer_from_turn("collaboration", Turn.gpt("Answer: no")) == "no"
    assert answer_from_turn("tool_calling", Turn.gpt("no marker")) is None


def test_marker_missing():
    st = reset(get_spec("tool_calling"), cxr())
    res = step(st, Reply("I think it is an effusion.", "t"))
    assert res.failure == "marker_missing" and st.final_answer is None
    with pytest.raises(MarkerMissing):
        extract_answer(st)


def test_parse_policy_output_formats():
    a = parse_policy_output('<think>x</think>\n```json\n{"name": "OCR", "arguments": {"image": "img_last"}}\n```')
    assert a == Action("OCR", {"image": "img_last"}, "x")
    b = parse_policy_output('{"thought": "look", "actions": [{"name": "Terminate", "arguments": {"ans": "A"}}]}')
    assert b == Action("Terminate", {"ans": "A"}, "look")
    c = parse_policy_output('{"thought": "done", "actions": []}')
    assert isinstance(c, Reply)
    assert isinstance(parse_policy_output("[FINAL] yes"), Reply)


# ---------------------------------------------------------------------------
# run_episode

def test_forced_answer_not_recorded():
    def respond(req):
        if req.messages[-1].content.startswith(FORCED_PROMPT):
            return "<think>Out of actions.</think>\n[FINAL] yes"
        return '<think>Classify.</think>\n{"name": "ChestXRayClassifier", "arguments": {"image_path": "a.png"}}'

    fx = ToolFixtures()
    fx.add("*", "ChestXRayClassifier", "*", "Effusion 0.9.")
    suite = EnvironmentSuite(fixtures=fx)
    r = suite.run("tool_calling", cxr(), PolicyHandle.scripted("agent", responder=respond), t_cap=2)
    assert r.ok and r.forced and r.depth == 2
    assert all(FORCED_PROMPT not in t.content for t in r.trajectory.turns)
    assert depth(r.trajectory) == 2
    serialize(r.trajectory)


def test_policy_calling_tool_after_forcing_fails():
    tool = '{"name": "ChestXRayClassifier", "arguments": {"image_path": "a.png"}}'
    r = EnvironmentSuite().run("tool_calling", cxr(), PolicyHandle.scripted("agent", default=tool), t_cap=0)
    assert r.failure == "depth_exceeded" and r.trajectory is None


def test_unknown_action_in_episode():
    bad = '{"name": "Teleport", "arguments": {}}'
    r = EnvironmentSuite().run("tool_calling", cxr(), PolicyHandle.scripted("agent", default=bad))
    assert r.failure == "unknown_action"


def test_first_choice_is_recorded():
    r = EnvironmentSuite().run("tool_calling", cxr(), PolicyHandle.scripted("agent", default="[FINAL] yes"))
    assert r.first_choice == "direct" and r.depth == 0 and r.final_answer == "yes"


def test_simulation_suite_reads_store():
    suite = EnvironmentSuite(vignettes=VignetteStore(FIX / "vignettes"))
    s = Sample("tb_cough", "mimic", "Diagnosis?", "Pulmonary Tuberculosis")
    call = '{"name": "Terminate", "arguments": {"diagnosis": "Tuberculosis"}}'
    r = suite.run("simulation", s, PolicyHandle.scripted("agent", default=f"<think>Classic.</think>\n{call}"))
    assert r.ok and r.final_answer == "Tuberculosis"
    with pytest.raises(MissingVignette):
        suite.run("simulation", Sample("nobody", "mimic", "q", "a"), PolicyHandle.scripted("agent", default=call))


# ---------------------------------------------------------------------------
# collaboration

def panel(level, answers, recruits="1. Cardiologist\n2. Neurologist\n3. Nephrologist"):
    state = {"i": 0}

    def respond(req):
        sp = req.system_prompt
        if sp.startswith("Rate how hard"):
            return level
        if sp.startswith("Recruit"):
            return recruits
        if sp.startswith("Summarize"):
            return "Summary of the panel."
        ans = answers[state["i"] % len(answers)]
        state["i"] += 1
        return f"Reasoning.\nAnswer: {ans}"

    return PolicyHandle.scripted("agent", responder=respond)


def test_basic_path_depth_two():
    t = run_collaboration(Sample("c", "q", "Q?", "yes"), panel("1) basic", ["yes"]))
    assert depth(t) == 2 and t.turns[-1].role == "gpt" and t.final_answer == "yes"


def test_unanimous_and_split_votes():
    assert run_collaboration(Sample("c", "q", "Q?", "yes"), panel("2) intermediate", ["yes"])).final_answer == "yes"
    assert run_collaboration(Sample("c", "q", "Q?", "no"), panel("2) intermediate", ["no", "no", "yes"])).final_answer \
        == "no"


def test_majority_vote_rules():
    assert majority_vote(["Yes.", "yes", "no"]) == "Yes."  # first speaker's wording wins
    assert majority_vote(["A", "B", "C"]) == "A"  # tie goes to the earliest
    assert majority_vote(["b", "A", "a"]) == "A"


def test_parsers():
    assert parse_difficulty("2) intermediate") == "intermediate"
    assert parse_difficulty("3") == "advanced"
    assert parse_difficulty("<think>hmm</think>\n1) Basic") == "basic"
    assert parse_difficulty("hard to say") is None
    assert [e.specialty for e in parse_recruits("1. A - x\n2. B\n3. C")] == ["A", "B", "C"]
    assert parse_recruits("1. A\n2. B") is None
    assert parse_expert_answer("text\nAnswer: Yes.") == "Yes"
    assert parse_expert_answer("first\nfallback line.") == "fallback line"
    assert parse_expert_answer("<think>x</think>") is None


def test_unparseable_panel_output_raises():
    h = PolicyHandle.scripted("agent", default="I refuse to rate this.")
    with pytest.raises(ProtocolViolation):
        run_collaboration(Sample("c", "q", "Q?", "yes"), h)
