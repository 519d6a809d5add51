"""Unified trajectory model and the ShareGPT-style interchange format.

A trajectory is a ``human`` turn, zero or more ``function_call``/``observation``
pairs, and a closing ``gpt`` turn. Reasoning lives inside ``<think>`` tags in
the turn content; images are referenced by ``<image>`` placeholders whose
count must line up with the conversation-level ``images`` list.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping

from .errors import InvariantViolation, ParseError

ROLES = ("human", "function_call", "observation", "gpt")
ENVIRONMENTS = ("tool_calling", "interleaved", "collaboration", "simulation", "direct")
MODES = ("direct", "enhanced", "prospective", "retrospective")

# Depth caps per environment; direct trajectories never call tools.
T_MAX = {"tool_calling": 4, "interleaved": 6, "collaboration": 12, "simulation": 12, "direct": 0}

IMAGE_TOKEN = "<image>"
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"

_THINK_RE = re.compile(r"\A\s*<think>(.*?)</think>[ \t]*\n?", re.DOTALL)
_ROLE_CODE = {"human": "h", "function_call": "c", "observation": "o", "gpt": "g"}
_GRAMMAR_RE = re.compile(r"h(co)*g")


def canonical_json(obj: Any) -> str:
    """UTF-8 friendly, sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def split_think(content: str) -> tuple[str | None, str]:
    """Return ``(think, body)``; ``think`` is None when no leading block exists."""
    m = _THINK_RE.match(content)
    if not m:
        return None, content
    return m.group(1).strip(), content[m.end():]


def render_action_body(name: str, arguments: Mapping[str, Any]) -> str:
    return json.dumps({"name": name, "arguments": dict(arguments)}, ensure_ascii=False)


def parse_action_body(body: str) -> "Action":
    """Parse the JSON part of a call turn. Raises ``ValueError`` on bad input."""
    obj = json.loads(body)
    if not isinstance(obj, dict):
        raise ValueError("action must be a JSON object")
    name = obj.get("name")
    args = obj.get("arguments", {})
    if not isinstance(name, str) or not name:
        raise ValueError("action name must be a nonempty string")
    if not isinstance(args, dict):
        raise ValueError("action arguments must be a JSON object")
    return Action(name=name, arguments=args)


@dataclass(frozen=True)
class Action:
    name: str
    arguments: dict = field(default_factory=dict)
    think: str = ""

    def __post_init__(self):
        if not self.name:
            raise InvariantViolation("action name must be nonempty")
        if not isinstance(self.arguments, dict):
            raise InvariantViolation("action arguments must be a JSON object")

    def key(self) -> tuple[str, str]:
        """Structural identity used for pair-symmetry and repetition checks."""
        return self.name, canonical_json(self.arguments)


@dataclass(frozen=True)
class ParamSpec:
    type: str
    description: str = ""
    required: bool = False


def _type_ok(type_tag: str, value: Any) -> bool:
    if type_tag == "string":
        return isinstance(value, str)
    if type_tag == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if type_tag == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if type_tag == "boolean":
        return isinstance(value, bool)
    if type_tag == "array":
        return isinstance(value, list)
    if type_tag == "object":
        return isinstance(value, dict)
    return True


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: Mapping[str, ParamSpec] = field(default_factory=dict)

    def to_json(self) -> dict:
        props = {k: {"type": p.type, "description": p.description} for k, p in self.parameters.items()}
        required = sorted(k for k, p in self.parameters.items() if p.required)
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {"type": "object", "properties": props, "required": required},
        }

    def check_arguments(self, args: Mapping[str, Any]) -> list[str]:
        """Problems with ``args`` against this schema; empty when valid."""
        problems = []
        for name, spec in self.parameters.items():
            if spec.required and name not in args:
                problems.append(f"missing required argument {name!r}")
        for name, value in args.items():
            spec = self.parameters.get(name)
            if spec is None:
                problems.append(f"unexpected argument {name!r}")
            elif not _type_ok(spec.type, value):
                problems.append(f"argument {name!r} should be {spec.type}")
        return problems

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ToolSchema":
        params = obj.get("parameters") or {}
        required = set(params.get("required", []))
        props = params.get("properties", {})
        return cls(
            name=obj["name"],
            description=obj.get("description", ""),
            parameters={
                k: ParamSpec(type=v.get("type", "string"), description=v.get("description", ""), required=k in required)
                for k, v in props.items()
            },
        )


@dataclass(frozen=True)
class Turn:
    role: str
    content: str
    images: tuple[str, ...] = ()

    @cached_property
    def _split(self) -> tuple[str | None, str]:
        return split_think(self.content)

    @property
    def think(self) -> str | None:
        return self._split[0]

    @property
    def body(self) -> str:
        return self._split[1]

    @property
    def image_count(self) -> int:
        return self.content.count(IMAGE_TOKEN)

    @property
    def action(self) -> Action | None:
        """The JSON action in a call turn (or a Terminate-style gpt turn), if any."""
        if self.role not in ("function_call", "gpt"):
            return None
        try:
            act = parse_action_body(self.body.strip())
        except ValueError:
            return None
        return Action(act.name, act.arguments, self.think or "")

    @classmethod
    def human(cls, text: str, images: Iterable[str] = ()) -> "Turn":
        return cls("human", text, tuple(images))

    @classmethod
    def call(cls, action: Action) -> "Turn":
        return cls("function_call", f"{THINK_OPEN}{action.think}{THINK_CLOSE}\n{render_action_body(action.name, action.arguments)}")

    @classmethod
    def observation(cls, text: str, images: Iterable[str] = ()) -> "Turn":
        return cls("observation", text, tuple(images))

    @classmethod
    def gpt(cls, text: str, think: str | None = None) -> "Turn":
        if think is None:
            return cls("gpt", text)
        return cls("gpt", f"{THINK_OPEN}{think}{THINK_CLOSE}\n{text}")

    def with_think(self, think: str) -> "Turn":
        """Same body, new reasoning block; the body is kept byte-for-byte."""
        return Turn(self.role, f"{THINK_OPEN}{think}{THINK_CLOSE}\n{self.body}", self.images)


@dataclass(frozen=True)
class Trajectory:
    sample_id: str
    environment_id: str
    system_prompt: str
    tool_schemas: tuple[ToolSchema, ...]
    turns: tuple[Turn, ...]
    images: tuple[str, ...]
    mode: str
    final_answer: str
    tier: int | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def actions(self) -> list[Action]:
        return [t.action for t in self.turns if t.role == "function_call"]

    @property
    def observations(self) -> list[str]:
        return [t.content for t in self.turns if t.role == "observation"]

    @property
    def question(self) -> str:
        return self.turns[0].content if self.turns else ""


def depth(t: Trajectory) -> int:
    """Number of function_call turns; the closing gpt turn is not counted."""
    return sum(1 for turn in t.turns if turn.role == "function_call")


def build_trajectory(
    *,
    sample_id: str,
    environment_id: str,
    turns: Iterable[Turn],
    final_answer: str,
    mode: str,
    system_prompt: str = "",
    tool_schemas: Iterable[ToolSchema] = (),
    tier: int | None = None,
    meta: Mapping[str, Any] | None = None,
) -> Trajectory:
    """Convenience constructor that derives the conversation-level image list."""
    turns = tuple(turns)
    return Trajectory(
        sample_id=sample_id,
        environment_id=environment_id,
        system_prompt=system_prompt,
        tool_schemas=tuple(tool_schemas),
        turns=turns,
        images=tuple(img for t in turns for img in t.images),
        mode=mode,
        final_answer=final_answer,
        tier=tier,
        meta=dict(meta or {}),
    )


def grammar_error_index(roles: list[str]) -> int | None:
    """Index of the first turn that breaks human -> (call -> obs)* -> gpt, else None."""
    expect = {"h"}
    codes = [_ROLE_CODE.get(r, "?") for r in roles]
    for i, c in enumerate(codes):
        if c not in expect:
            return i
        if c == "h":
            expect = {"c", "g"}
        elif c == "c":
            expect = {"o"}
        elif c == "o":
            expect = {"c", "g"}
        else:
            expect = set()
    if not codes or codes[-1] != "g":
        return len(codes)
    return None


def grammar_ok(roles: list[str]) -> bool:
    return _GRAMMAR_RE.fullmatch("".join(_ROLE_CODE.get(r, "?") for r in roles)) is not None


def invariant_problems(t: Trajectory) -> list[str]:
    problems = []
    if t.environment_id not in ENVIRONMENTS:
        problems.append(f"unknown environment_id {t.environment_id!r}")
    if t.mode not in MODES:
        problems.append(f"unknown mode {t.mode!r}")
    if t.tier not in (None, 1, 2, 3):
        problems.append(f"tier must be 1, 2, 3 or absent, got {t.tier!r}")
    names = [s.name for s in t.tool_schemas]
    if len(set(names)) != len(names):
        problems.append("tool schema names are not unique")
    roles = [turn.role for turn in t.turns]
    bad = [r for r in roles if r not in ROLES]
    if bad:
        problems.append(f"unknown roles {bad}")
    elif not grammar_ok(roles):
        problems.append("turn order violates human -> (function_call -> observation)* -> gpt")
    for i, turn in enumerate(t.turns):
        if turn.image_count != len(turn.images):
            problems.append(f"turn {i} has {turn.image_count} image tokens but {len(turn.images)} images")
        if turn.role == "observation" and THINK_OPEN in turn.content:
            problems.append(f"observation turn {i} carries a think block")
        if turn.role == "function_call" and turn.action is None:
            problems.append(f"function_call turn {i} does not hold a JSON action")
    if sum(turn.image_count for turn in t.turns) != len(t.images):
        problems.append("image placeholder count does not match images list")
    if tuple(img for turn in t.turns for img in turn.images) != tuple(t.images):
        problems.append("per-turn images do not concatenate to the images list")
    cap = T_MAX.get(t.environment_id)
    if cap is not None and depth(t) > cap:
        problems.append(f"depth {depth(t)} exceeds T_max {cap}")
    if t.turns and t.turns[-1].role == "gpt":
        last = t.turns[-1].content
        ans = t.final_answer
        if ans and ans.lower() not in last.lower() and json.dumps(ans, ensure_ascii=False)[1:-1].lower() not in last.lower():
            problems.append("final gpt turn does not contain final_answer")
    return problems


def to_document(t: Trajectory) -> dict:
    return {
        "conversations": [{"from": turn.role, "value": turn.content} for turn in t.turns],
        "images": list(t.images),
        "metadata": {
            "environment_id": t.environment_id,
            "extra": dict(t.meta),
            "final_answer": t.final_answer,
            "mode": t.mode,
            "sample_id": t.sample_id,
            "tier": t.tier,
        },
        "system": t.system_prompt,
        "tools": [s.to_json() for s in t.tool_schemas],
    }


def serialize(t: Trajectory, *, check: bool = True) -> str:
    """Canonical one-line JSON document terminated by LF.

    ``check=False`` skips the invariant gate; it exists for writing deliberately
    broken fixtures and should not be used by producers.
    """
    if check:
        problems = invariant_problems(t)
        if problems:
            raise InvariantViolation("; ".join(problems))
    return canonical_json(to_document(t)) + "\n"


def _byte_offset(doc: str, char_pos: int) -> int:
    return len(doc[:char_pos].encode("utf-8"))


def _turn_offset(doc: str, entry: Any) -> int | None:
    pos = doc.find(canonical_json(entry))
    return _byte_offset(doc, pos) if pos >= 0 else None


def deserialize(doc: str, *, strict: bool = True) -> Trajectory:
    """Parse a document produced by :func:`serialize`.

    With ``strict=False`` the grammar, alignment and action-JSON checks are
    skipped so that linters can inspect malformed trajectories.
    """
    try:
        obj = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", byte_offset=_byte_offset(doc, exc.pos)) from None
    if not isinstance(obj, dict):
        raise ParseError("document must be a JSON object", byte_offset=0)
    convs = obj.get("conversations")
    if not isinstance(convs, list):
        raise ParseError("missing conversations list", byte_offset=0)
    images = obj.get("images", [])
    meta = obj.get("metadata") or {}
    if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
        raise ParseError("images must be a list of strings", byte_offset=0)

    roles, contents = [], []
    for i, entry in enumerate(convs):
        if not isinstance(entry, dict) or not isinstance(entry.get("value"), str):
            raise ParseError("conversation entry needs a string value", turn_index=i, byte_offset=_turn_offset(doc, entry))
        role = entry.get("from")
        if role not in ROLES:
            raise ParseError(f"unknown role {role!r}", turn_index=i, byte_offset=_turn_offset(doc, entry))
        roles.append(role)
        contents.append(entry["value"])

    if strict:
        bad = grammar_error_index(roles)
        if bad is not None:
            entry = convs[bad] if bad < len(convs) else None
            raise ParseError(
                "turn order violates human -> (function_call -> observation)* -> gpt",
                turn_index=bad,
                byte_offset=_turn_offset(doc, entry) if entry is not None else len(doc.encode("utf-8")),
            )
        total = sum(c.count(IMAGE_TOKEN) for c in contents)
        if total != len(images):
            raise ParseError(f"{total} image placeholders but {len(images)} images listed", byte_offset=0)

    turns, cursor = [], 0
    for i, (role, content) in enumerate(zip(roles, contents)):
        k = content.count(IMAGE_TOKEN)
        turn = Turn(role, content, tuple(images[cursor:cursor + k]))
        cursor += k
        if strict and role == "function_call" and turn.action is None:
            raise ParseError("function_call turn does not hold a valid JSON action", turn_index=i,
                             byte_offset=_turn_offset(doc, convs[i]))
        if strict and role == "observation" and THINK_OPEN in content:
            raise ParseError("observation turn carries a think block", turn_index=i,
                             byte_offset=_turn_offset(doc, convs[i]))
        turns.append(turn)

    try:
        tools = tuple(ToolSchema.from_json(s) for s in obj.get("tools", []))
    except (KeyError, AttributeError, TypeError):
        raise ParseError("malformed tools field", byte_offset=0) from None

    return Trajectory(
        sample_id=str(meta.get("sample_id", "")),
        environment_id=meta.get("environment_id", ""),
        system_prompt=obj.get("system", ""),
        tool_schemas=tools,
        turns=tuple(turns),
        images=tuple(images),
        mode=meta.get("mode", ""),
        final_answer=meta.get("final_answer", ""),
        tier=meta.get("tier"),
        meta=dict(meta.get("extra") or {}),
    )


def read_jsonl(path, *, strict: bool = True) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [deserialize(line, strict=strict) for line in fh if line.strip()]


def write_jsonl(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajectories:
            fh.write(serialize(t))
