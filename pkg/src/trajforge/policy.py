"""Policy gateway: one interface for scripted fixtures and remote models.

Remote wire protocol (one POST per turn)::

    request  {"role", "system", "messages": [{"role", "content", "images"}], "decoding"}
    response {"content", "usage"?}

Retries happen only on transport failures.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import FixtureMiss, InvariantViolation, MalformedResponse, RecapInvalid, TransportError
from .trajectory import Action, canonical_json

POLICY_ROLES = ("student", "teacher", "agent", "recap", "expert", "moderator", "patient")
HUMAN_SIDE = ("human",)
TOKEN_FACTOR = 1.3


def token_estimate(text: str) -> int:
    """Whitespace word count x 1.3, rounded half up. A cost proxy, not a tokenizer."""
    return int(math.floor(len(text.split()) * TOKEN_FACTOR + 0.5))


@dataclass(frozen=True)
class Message:
    role: str
    content: str
    images: tuple[str, ...] = ()


@dataclass(frozen=True)
class DecodingHints:
    max_length: int = 2048
    temperature: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class PolicyRequest:
    role: str
    system_prompt: str
    messages: tuple[Message, ...]
    decoding: DecodingHints = field(default_factory=DecodingHints)

    def __post_init__(self):
        if not self.messages:
            raise InvariantViolation("a policy request needs at least one message")
        if self.messages[0].role not in HUMAN_SIDE:
            raise InvariantViolation("the first message must come from the human side")

    def fingerprint(self) -> str:
        # image ids are part of the key, image bytes never are
        key = [self.role, self.system_prompt, [[m.role, m.content, list(m.images)] for m in self.messages]]
        return hashlib.sha256(canonical_json(key).encode("utf-8")).hexdigest()

    def prompt_text(self) -> str:
        return "\n".join([self.system_prompt, *(m.content for m in self.messages)])

    def to_wire(self) -> dict:
        return {
            "role": self.role,
            "system": self.system_prompt,
            "messages": [{"role": m.role, "content": m.content, "images": list(m.images)} for m in self.messages],
            "decoding": {
                "max_length": self.decoding.max_length,
                "temperature": self.decoding.temperature,
                "seed": self.decoding.seed,
            },
        }


@dataclass(frozen=True)
class Usage:
    prompt_token_estimate: int
    completion_token_estimate: int

    @property
    def total(self) -> int:
        return self.prompt_token_estimate + self.completion_token_estimate


@dataclass(frozen=True)
class PolicyResponse:
    content: str
    usage: Usage
    latency_ms: float

    def to_wire(self) -> dict:
        return {
            "content": self.content,
            "usage": {
                "prompt_token_estimate": self.usage.prompt_token_estimate,
                "completion_token_estimate": self.usage.completion_token_estimate,
            },
            "latency_ms": self.latency_ms,
        }


Responder = Callable[[PolicyRequest], "str | None"]


@dataclass
class PolicyHandle:
    """A configured policy. Build with :meth:`scripted` or :meth:`remote`."""

    role: str
    backend: str
    endpoint: str | None = None
    seed: int = 0
    fixtures: Mapping[str, str] | None = None
    default: str | None = None
    responder: Responder | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_s: float = 0.25
    max_in_flight: int = 8
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self):
        if self.role not in POLICY_ROLES:
            raise InvariantViolation(f"unknown policy role {self.role!r}")
        if self.backend == "remote":
            if not self.endpoint:
                raise InvariantViolation("remote backend requires an endpoint")
        elif self.backend == "scripted":
            if self.fixtures is None and self.responder is None and self.default is None:
                raise InvariantViolation("scripted backend requires fixtures, a responder or a default")
        else:
            raise InvariantViolation(f"unknown backend {self.backend!r}")
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    @classmethod
    def scripted(cls, role: str, fixtures: Mapping[str, str] | None = None, *, default: str | None = None,
                 responder: Responder | None = None, seed: int = 0) -> "PolicyHandle":
        return cls(role, "scripted", fixtures=dict(fixtures) if fixtures is not None else None,
                   default=default, responder=responder, seed=seed)

    @classmethod
    def from_fixture_file(cls, role: str, path: str | os.PathLike, *, default: str | None = None,
                          seed: int = 0) -> "PolicyHandle":
        return cls.scripted(role, load_fixtures(path), default=default, seed=seed)

    @classmethod
    def remote(cls, role: str, endpoint: str, **kwargs) -> "PolicyHandle":
        return cls(role, "remote", endpoint=endpoint, **kwargs)

    def complete(self, req: PolicyRequest) -> PolicyResponse:
        start = time.perf_counter()
        if self.backend == "scripted":
            content, usage = self._scripted(req), None
        else:
            with self._slots:
                content, usage = self._remote(req)
        latency_ms = (time.perf_counter() - start) * 1000.0
        if usage is None:
            usage = Usage(token_estimate(req.prompt_text()), token_estimate(content))
        return PolicyResponse(content, usage, latency_ms)

    def _scripted(self, req: PolicyRequest) -> str:
        content = None
        if self.fixtures is not None:
            content = self.fixtures.get(req.fingerprint())
        if content is None and self.responder is not None:
            content = self.responder(req)
        if content is None:
            content = self.default
        if content is None:
            raise FixtureMiss(f"no scripted response for {req.role} request {req.fingerprint()[:12]}")
        if not isinstance(content, str) or not content.strip():
            raise MalformedResponse("scripted response is empty")
        return content

    def _remote(self, req: PolicyRequest) -> tuple[str, Usage | None]:
        body = json.dumps(req.to_wire(), ensure_ascii=False).encode("utf-8")
        attempt = 0
        while True:
            try:
                http_req = urllib.request.Request(self.endpoint, data=body,
                                                  headers={"Content-Type": "application/json"}, method="POST")
                with urllib.request.urlopen(http_req, timeout=self.timeout) as resp:
                    raw = resp.read()
                break
            except urllib.error.HTTPError as exc:
                if exc.code < 500 or attempt >= self.max_retries:
                    raise TransportError(f"HTTP {exc.code} from {self.endpoint}", attempt) from None
            except (urllib.error.URLError, OSError) as exc:
                if attempt >= self.max_retries:
                    raise TransportError(f"{exc} talking to {self.endpoint}", attempt) from None
            time.sleep(self.backoff_s * (2 ** attempt))
            attempt += 1
        return _parse_wire_response(raw)


def _parse_wire_response(raw: bytes) -> tuple[str, Usage | None]:
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise MalformedResponse("response body is not JSON") from None
    if not isinstance(payload, dict):
        raise MalformedResponse("response body must be a JSON object")
    content = payload.get("content")
    if not isinstance(content, str) or not content.strip():
        raise MalformedResponse("response has no content")
    usage = payload.get("usage")
    if isinstance(usage, dict):
        p = usage.get("prompt_token_estimate", usage.get("prompt_tokens"))
        c = usage.get("completion_token_estimate", usage.get("completion_tokens"))
        if isinstance(p, int) and isinstance(c, int):
            return content, Usage(p, c)
    return content, None


def complete(h: PolicyHandle, req: PolicyRequest) -> PolicyResponse:
    return h.complete(req)


def load_fixtures(path: str | os.PathLike) -> dict[str, str]:
    """Read ``{fingerprint, role, content}`` JSONL into a fingerprint map."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["fingerprint"]] = row["content"]
    return out


class FixtureRecorder:
    """Wraps a responder and remembers every answer so it can be replayed from JSONL."""

    def __init__(self, responder: Responder):
        self.responder = responder
        self.entries: dict[str, tuple[str, str]] = {}
        self._lock = threading.Lock()

    def __call__(self, req: PolicyRequest) -> str | None:
        content = self.responder(req)
        if content is not None:
            with self._lock:
                self.entries[req.fingerprint()] = (req.role, content)
        return content

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for fp in sorted(self.entries):
                role, content = self.entries[fp]
                fh.write(canonical_json({"fingerprint": fp, "role": role, "content": content}) + "\n")


# ---------------------------------------------------------------------------
# recap

UPDATE_VALUES = ("increase", "decrease", "no_change")
TOOL_ENTRY_KEYS = {"step", "tool", "why", "got", "update", "evidence", "inference", "confidence"}
TERMINATE_ENTRY_KEYS = {"step", "tool", "why"}
TERMINATE = "Terminate"

RECAP_SYSTEM = """You write hindsight summaries of solved agent episodes.
You are given the question, the correct answer, and each action with its observation.
Return JSON {"recap": [...]} with one entry per action in order plus a final Terminate entry.
Tool entries: {"step", "tool", "why", "got", "update": "increase"|"decrease"|"no_change",
"evidence", "inference", "confidence": 0-100}. The Terminate entry has only {"step", "tool", "why"}.
Ground evidence in the observations. Do not describe plans or alternatives."""


@dataclass(frozen=True)
class RecapEntry:
    step: int
    tool: str
    why: str
    got: str | None = None
    update: str | None = None
    evidence: str | None = None
    inference: str | None = None
    confidence: int | None = None

    def to_json(self) -> dict:
        if self.tool == TERMINATE:
            return {"step": self.step, "tool": self.tool, "why": self.why}
        return {
            "step": self.step, "tool": self.tool, "why": self.why, "got": self.got, "update": self.update,
            "evidence": self.evidence, "inference": self.inference or "", "confidence": self.confidence,
        }


@dataclass(frozen=True)
class RecapResult:
    thoughts: tuple[str, ...]
    entries: tuple[RecapEntry, ...]
    actions: tuple[Action, ...]


def recap_request(question: str, answer: str, actions: Sequence[Action], observations: Sequence[str],
                  seed: int = 0) -> PolicyRequest:
    lines = [f"Question: {question}", f"Correct answer: {answer}"]
    for i, (a, o) in enumerate(zip(actions, observations)):
        lines.append(f"Step {i}: {a.name} {canonical_json(a.arguments)}")
        lines.append(f"Observation {i}: {o}")
    lines.append(f"Step {len(actions)}: {TERMINATE}")
    return PolicyRequest("recap", RECAP_SYSTEM, (Message("human", "\n".join(lines)),), DecodingHints(seed=seed))


def _extract_json(text: str) -> Any:
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                return decoder.raw_decode(text, i)[0]
            except json.JSONDecodeError:
                continue
    raise RecapInvalid("recap output holds no JSON")


def _sentence(text: str) -> str:
    text = " ".join(text.split())
    return text if text.endswith((".", "!", "?")) else text + "."


def parse_recap(content: str, actions: Sequence[Action]) -> tuple[tuple[RecapEntry, ...], tuple[str, ...] | None]:
    """Validate a recap payload against the action list; raises :class:`RecapInvalid`."""
    obj = _extract_json(content)
    thoughts = None
    if isinstance(obj, dict):
        thoughts = obj.get("thoughts")
        obj = obj.get("recap")
    if not isinstance(obj, list):
        raise RecapInvalid("recap must be a list")
    if len(obj) != len(actions) + 1:
        raise RecapInvalid(f"expected {len(actions) + 1} recap entries, got {len(obj)}")
    entries = []
    first_step = None
    for i, raw in enumerate(obj):
        if not isinstance(raw, dict):
            raise RecapInvalid(f"entry {i} is not an object")
        step = raw.get("step")
        if not isinstance(step, int) or isinstance(step, bool):
            raise RecapInvalid(f"entry {i} has a non-integer step")
        if first_step is None:
            if step not in (0, 1):
                raise RecapInvalid("steps must start at 0 or 1")
            first_step = step
        if step != first_step + i:
            raise RecapInvalid(f"entry {i} is out of order")
        expected = actions[i].name if i < len(actions) else TERMINATE
        if raw.get("tool") != expected:
            raise RecapInvalid(f"entry {i} names {raw.get('tool')!r}, action was {expected!r}")
        why = raw.get("why")
        if not isinstance(why, str) or not why.strip():
            raise RecapInvalid(f"entry {i} needs a reason")
        if i == len(actions):
            if set(raw) != TERMINATE_ENTRY_KEYS:
                raise RecapInvalid("the Terminate entry carries only step, tool and why")
            entries.append(RecapEntry(step, TERMINATE, why))
            continue
        if not set(raw) <= TOOL_ENTRY_KEYS or not TOOL_ENTRY_KEYS - {"inference"} <= set(raw):
            raise RecapInvalid(f"entry {i} does not follow the tool-entry schema")
        if raw["update"] not in UPDATE_VALUES:
            raise RecapInvalid(f"entry {i} has update {raw['update']!r}")
        conf = raw["confidence"]
        if not isinstance(conf, int) or isinstance(conf, bool) or not 0 <= conf <= 100:
            raise RecapInvalid(f"entry {i} confidence {conf!r} is outside 0-100")
        for key in ("got", "evidence"):
            if not isinstance(raw[key], str):
                raise RecapInvalid(f"entry {i} field {key} must be text")
        inference = raw.get("inference", "")
        if not isinstance(inference, str):
            raise RecapInvalid(f"entry {i} field inference must be text")
        entries.append(RecapEntry(step, raw["tool"], why, raw["got"], raw["update"], raw["evidence"], inference, conf))
    if thoughts is not None:
        if not (isinstance(thoughts, list) and len(thoughts) == len(entries)
                and all(isinstance(t, str) and t.strip() for t in thoughts)):
            raise RecapInvalid("thoughts must hold one nonempty string per recap entry")
        thoughts = tuple(thoughts)
    return tuple(entries), thoughts


def narrate(entries: Sequence[RecapEntry]) -> tuple[str, ...]:
    """Think text placed before each action, built from hindsight entries."""
    out = []
    for i, entry in enumerate(entries):
        parts = []
        if i > 0:
            prev = entries[i - 1]
            parts.append(_sentence(prev.inference or f"The {prev.tool} result showed {prev.got}"))
        parts.append(_sentence(entry.why))
        out.append(" ".join(parts))
    return tuple(out)


def recap(h: PolicyHandle, question: str, answer: str, actions: Sequence[Action],
          observations: Sequence[str]) -> RecapResult:
    if len(actions) != len(observations):
        raise ValueError("actions and observations must be aligned")
    resp = h.complete(recap_request(question, answer, actions, observations, seed=h.seed))
    entries, thoughts = parse_recap(resp.content, actions)
    return RecapResult(thoughts or narrate(entries), entries, tuple(actions))


def recap_entries_json(result: RecapResult) -> list[dict]:
    return [e.to_json() for e in result.entries]


def build_messages(turns: Iterable[Any]) -> tuple[Message, ...]:
    return tuple(Message(t.role, t.content, tuple(t.images)) for t in turns)
