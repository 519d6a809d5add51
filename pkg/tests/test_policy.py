from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from trajforge.errors import FixtureMiss, InvariantViolation, MalformedResponse, RecapInvalid, TransportError
from trajforge.policy import (
    DecodingHints,
    FixtureRecorder,
    Message,
    PolicyHandle,
    PolicyRequest,
    load_fixtures,
    narrate,
    parse_recap,
    recap,
    token_estimate,
)
from trajforge.trajectory import Action


def req(text="q1", role="student", system="", images=()):
    return PolicyRequest(role, system, (Message("human", text, images),))


def test_scripted_fixture_lookup():
    r = req()
    h = PolicyHandle.scripted("student", {r.fingerprint(): "yes"})
    resp = h.complete(r)
    assert resp.content == "yes"
    assert resp.usage.total > 0 and resp.latency_ms >= 0


def test_fixture_miss_and_default():
    h = PolicyHandle.scripted("student", {})
    with pytest.raises(FixtureMiss):
        h.complete(req())
    assert PolicyHandle.scripted("student", {}, default="no").complete(req()).content == "no"


def test_fingerprint_keys():
    assert req().fingerprint() == req().fingerprint()
    assert req().fingerprint() != req(role="teacher").fingerprint()
    assert req().fingerprint() != req(images=("a.png",)).fingerprint()
    # decoding hints do not change the key
    a = PolicyRequest("student", "", (Message("human", "q"),), DecodingHints(seed=1))
    b = PolicyRequest("student", "", (Message("human", "q"),), DecodingHints(seed=2))
    assert a.fingerprint() == b.fingerprint()


def test_request_invariants():
    with pytest.raises(InvariantViolation):
        PolicyRequest("student", "", ())
    with pytest.raises(InvariantViolation):
        PolicyRequest("student", "", (Message("gpt", "x"),))
    with pytest.raises(InvariantViolation):
        PolicyHandle.scripted("student")
    with pytest.raises(InvariantViolation):
        PolicyHandle("nobody", "scripted", default="x")
    with pytest.raises(InvariantViolation):
        PolicyHandle("student", "remote")


def test_empty_scripted_response_is_malformed():
    with pytest.raises(MalformedResponse):
        PolicyHandle.scripted("student", default="   ").complete(req())


def test_token_estimate():
    assert token_estimate("") == 0
    assert token_estimate("one two three four five six seven eight nine ten") == 13
    assert token_estimate("a b") == 3  # 2.6 rounds half-up


def test_recorder_round_trip(tmp_path):
    rec = FixtureRecorder(lambda r: r.messages[0].content.upper())
    h = PolicyHandle.scripted("student", responder=rec)
    for q in ("a", "b"):
        h.complete(req(q))
    path = tmp_path / "f.jsonl"
    rec.dump(path)
    replay = PolicyHandle.scripted("student", load_fixtures(path))
    assert replay.complete(req("b")).content == "B"


class _Stub(BaseHTTPRequestHandler):
    failures = 0
    status = 200

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        cls = type(self)
        if cls.failures > 0:
            cls.failures -= 1
            self.send_response(503)
            self.end_headers()
            return
        self.send_response(cls.status)
        self.end_headers()
        if cls.status == 200:
            payload = {"content": "echo:" + body["messages"][-1]["content"], "usage": {"prompt_tokens": 5,
                                                                                        "completion_tokens": 2}}
            self.wfile.write(json.dumps(payload).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def stub():
    server = HTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Stub.failures, _Stub.status = 0, 200
    yield f"http://127.0.0.1:{server.server_port}/"
    server.shutdown()


def test_remote_echo(stub):
    h = PolicyHandle.remote("agent", stub, backoff_s=0.001)
    resp = h.complete(req("hello", role="agent"))
    assert resp.content == "echo:hello"
    assert resp.latency_ms > 0
    assert (resp.usage.prompt_token_estimate, resp.usage.completion_token_estimate) == (5, 2)


def test_remote_retries_5xx(stub):
    _Stub.failures = 2
    assert PolicyHandle.remote("agent", stub, backoff_s=0.001).complete(req(role="agent")).content == "echo:q1"


def test_remote_gives_up(stub):
    _Stub.failures = 10
    with pytest.raises(TransportError) as exc:
        PolicyHandle.remote("agent", stub, backoff_s=0.001, max_retries=2).complete(req(role="agent"))
    assert exc.value.retries == 2


def test_remote_4xx_not_retried(stub):
    _Stub.status = 400
    with pytest.raises(TransportError) as exc:
        PolicyHandle.remote("agent", stub, backoff_s=0.001).complete(req(role="agent"))
    assert exc.value.retries == 0


def test_remote_unreachable():
    with pytest.raises(TransportError):
        PolicyHandle.remote("agent", "http://127.0.0.1:9/", backoff_s=0.001, max_retries=1,
                            timeout=0.5).complete(req(role="agent"))


# ---------------------------------------------------------------------------
# recap

ACTIONS = [Action("ChestXRayClassifier", {"image_path": "a"}, ""), Action("XRayPhraseGrounding", {"phrase": "x"}, "")]


def _entry(step, tool, **over):
    e = {"step": step, "tool": tool, "why": "Needed to decide.", "got": "a result", "update": "increase",
         "evidence": "the observation", "inference": "It supports yes.", "confidence": 80}
    e.update(over)
    return e


def _payload(entries):
    return json.dumps({"recap": entries})


def test_recap_two_actions_gives_three_entries():
    content = _payload([_entry(1, "ChestXRayClassifier"), _entry(2, "XRayPhraseGrounding"),
                        {"step": 3, "tool": "Terminate", "why": "Done."}])
    h = PolicyHandle.scripted("recap", default=content)
    rc = recap(h, "q", "yes", ACTIONS, ["o1", "o2"])
    assert len(rc.entries) == 3 and rc.entries[-1].tool == "Terminate"
    assert len(rc.thoughts) == 3
    assert rc.thoughts[1].startswith("It supports yes.")


def test_recap_zero_actions():
    entries, _ = parse_recap(_payload([{"step": 0, "tool": "Terminate", "why": "Obvious."}]), [])
    assert len(entries) == 1 and entries[0].tool == "Terminate"
    assert narrate(entries) == ("Obvious.",)


@pytest.mark.parametrize("bad", [
    [_entry(1, "ChestXRayClassifier", confidence=140), _entry(2, "XRayPhraseGrounding"),
     {"step": 3, "tool": "Terminate", "why": "x"}],
    [_entry(1, "ChestXRayClassifier"), {"step": 2, "tool": "Terminate", "why": "x"}],
    [_entry(1, "XRayPhraseGrounding"), _entry(2, "ChestXRayClassifier"), {"step": 3, "tool": "Terminate", "why": "x"}],
    [_entry(1, "ChestXRayClassifier", update="up"), _entry(2, "XRayPhraseGrounding"),
     {"step": 3, "tool": "Terminate", "why": "x"}],
    [_entry(1, "ChestXRayClassifier"), _entry(3, "XRayPhraseGrounding"), {"step": 4, "tool": "Terminate", "why": "x"}],
    [_entry(1, "ChestXRayClassifier"), _entry(2, "XRayPhraseGrounding"),
     {"step": 3, "tool": "Terminate", "why": "x", "confidence": 50}],
])
def test_recap_schema_violations(bad):
    with pytest.raises(RecapInvalid):
        parse_recap(_payload(bad), ACTIONS)


def test_recap_without_json():
    with pytest.raises(RecapInvalid):
        parse_recap("I could not summarize.", ACTIONS)
