"""Steppable episode state machine shared by all environments.

``reset`` builds the opening human turn, ``step`` advances one action, and
``run_episode`` drives a policy through an episode until it terminates.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..errors import (
    DepthExceeded,
    EpisodeTerminated,
    InvariantViolation,
    MarkerMissing,
    MissingImage,
    MissingVignette,
    SchemaViolation,
    ToolFailure,
    UnknownAction,
)
from ..policy import DecodingHints, Message, PolicyHandle, PolicyRequest
from ..trajectory import IMAGE_TOKEN, Action, Trajectory, Turn, build_trajectory, render_action_body, split_think
from .executors import Executor, ToolContext, ToolFixtures, default_executors
from .images import ImageStore
from .simulation import PatientVignette
from .specs import EnvironmentSpec

FINAL_MARKER = "[FINAL]"
ANSWER_ARGUMENTS = ("ans", "diagnosis", "answer")
IMAGE_ENVIRONMENTS = ("tool_calling", "interleaved")

FORCED_PROMPT = "You have used all available actions. Give your final answer now without calling another tool."
FORCED_HINT = {
    "tool_calling": " End with [FINAL] <answer>.",
    "direct": " End with [FINAL] <answer>.",
    "interleaved": " Call Terminate with your answer.",
    "simulation": " Call Terminate with the diagnosis.",
}


@dataclass(frozen=True)
class Sample:
    sample_id: str
    dataset_id: str
    question: str
    gold_answer: str
    images: tuple[str, ...] = ()
    category: str | None = None

    def __post_init__(self):
        if not self.question.strip():
            raise InvariantViolation(f"sample {self.sample_id} has an empty question")
        if not self.gold_answer.strip():
            raise InvariantViolation(f"sample {self.sample_id} has an empty gold answer")
        object.__setattr__(self, "images", tuple(self.images))

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Sample":
        return cls(
            sample_id=str(obj["sample_id"]),
            dataset_id=str(obj["dataset_id"]),
            question=obj["question"],
            gold_answer=str(obj["gold_answer"]),
            images=tuple(obj.get("images") or ()),
            category=obj.get("category"),
        )

    def to_json(self) -> dict:
        out = {
            "sample_id": self.sample_id,
            "dataset_id": self.dataset_id,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "images": list(self.images),
        }
        if self.category is not None:
            out["category"] = self.category
        return out


@dataclass(frozen=True)
class Reply:
    """A policy turn that is plain text rather than a tool call."""

    text: str
    think: str = ""


@dataclass(frozen=True)
class Terminal:
    final_answer: str | None
    failure: str | None = None


@dataclass
class EpisodeState:
    spec: EnvironmentSpec
    sample: Sample
    system_prompt: str
    turns: list[Turn] = field(default_factory=list)
    actions_taken: int = 0
    image_registry: dict[str, str] = field(default_factory=dict)
    img_last: str | None = None
    stage: str = "start"
    terminated: bool = False
    final_answer: str | None = None
    failure: str | None = None
    forced: bool = False
    vignette: PatientVignette | None = None
    executors: Mapping[str, Executor] = field(default_factory=dict)
    images: ImageStore = field(default_factory=ImageStore)
    rounds: int = 0

    @property
    def environment_id(self) -> str:
        return self.spec.environment_id

    def resolve_image(self, image_id: str) -> str:
        if image_id == "img_last":
            if self.img_last is None:
                raise ToolFailure("img_last is not defined yet")
            image_id = self.img_last
        if image_id in self.image_registry:
            return self.image_registry[image_id]
        if image_id in self.sample.images:
            return image_id
        raise ToolFailure(f"unknown image id {image_id!r}")

    def register_image(self, ref: str) -> str:
        image_id = f"img_round_{self.rounds}"
        self.image_registry[image_id] = ref
        self.img_last = image_id
        self.rounds += 1
        return image_id


def render_question(spec: EnvironmentSpec, sample: Sample, vignette: PatientVignette | None = None) -> Turn:
    parts = []
    if sample.images:
        parts.append("\n".join(IMAGE_TOKEN for _ in sample.images))
    if spec.environment_id == "tool_calling":
        parts.append("\n".join(f"Image path: {ref}" for ref in sample.images))
    parts.append(sample.question)
    if vignette is not None:
        parts.append("Patient presentation:\n" + vignette.presentation())
    return Turn.human("\n".join(parts), sample.images)


def render_system_prompt(spec: EnvironmentSpec, vignette: PatientVignette | None = None) -> str:
    prompt = spec.system_prompt
    if vignette is not None:
        # the template holds literal JSON braces, so no str.format here
        prompt = prompt.replace("{available_exams}", ", ".join(vignette.available_exams))
        prompt = prompt.replace("{available_tests}", ", ".join(vignette.available_tests))
    return prompt


def reset(
    env: EnvironmentSpec,
    sample: Sample,
    vignette: PatientVignette | None = None,
    *,
    executors: Mapping[str, Executor] | None = None,
    images: ImageStore | None = None,
    fixtures: ToolFixtures | None = None,
) -> EpisodeState:
    if env.environment_id == "simulation" and vignette is None:
        raise MissingVignette(f"simulation sample {sample.sample_id} has no vignette")
    if env.environment_id in IMAGE_ENVIRONMENTS and not sample.images:
        raise MissingImage(f"{env.environment_id} sample {sample.sample_id} has no image")
    state = EpisodeState(
        spec=env,
        sample=sample,
        system_prompt=render_system_prompt(env, vignette),
        turns=[render_question(env, sample, vignette)],
        vignette=vignette,
        executors=executors if executors is not None else default_executors(env.environment_id, fixtures),
        images=images or ImageStore(),
        stage="assess" if env.environment_id == "collaboration" else "act",
    )
    if env.environment_id == "interleaved":
        state.image_registry["img_original"] = sample.images[0]
        state.img_last = "img_original"
    return state


def _check_arguments(spec: EnvironmentSpec, action: Action) -> None:
    schema = spec.schema(action.name)
    if schema is None:
        raise UnknownAction(f"{action.name!r} is not a tool of {spec.environment_id}")
    problems = schema.check_arguments(action.arguments)
    if problems:
        raise SchemaViolation(f"{action.name}: " + "; ".join(problems))


def append_stage(state: EpisodeState, action: Action, text: str, images: tuple[str, ...] = ()) -> Turn:
    """Record one (function_call, observation) pair and count it toward the cap."""
    if state.actions_taken >= state.spec.t_max:
        state.forced = True
        raise DepthExceeded(f"{state.environment_id} allows {state.spec.t_max} actions")
    obs = Turn.observation(text, images)
    state.turns.append(Turn.call(action))
    state.turns.append(obs)
    state.actions_taken += 1
    return obs


def _finish(state: EpisodeState, turn: Turn) -> Terminal:
    state.turns.append(turn)
    state.terminated = True
    state.stage = "done"
    try:
        state.final_answer = extract_answer(state)
    except MarkerMissing:
        state.failure = "marker_missing"
    return Terminal(state.final_answer, state.failure)


def step(state: EpisodeState, action: Action | Reply) -> Turn | Terminal:
    """Advance the episode by one policy output.

    Tool calls return the observation turn; terminal outputs return a
    :class:`Terminal`. Errors leave the state unchanged, except that
    :class:`DepthExceeded` marks the episode as forced.
    """
    if state.terminated:
        raise EpisodeTerminated(f"episode {state.sample.sample_id} already ended")
    spec = state.spec
    if isinstance(action, Reply):
        return _finish(state, Turn.gpt(action.text, action.think or None))

    if action.name in spec.terminal_actions:
        _check_arguments(spec, action)
        body = render_action_body(action.name, action.arguments)
        return _finish(state, Turn.gpt(body, action.think))
    if action.name not in spec.step_tools:
        raise UnknownAction(f"{action.name!r} is not a tool of {spec.environment_id}")
    _check_arguments(spec, action)
    if state.actions_taken >= spec.t_max:
        state.forced = True
        raise DepthExceeded(f"{spec.environment_id} allows {spec.t_max} actions")

    executor = state.executors.get(action.name)
    ctx = ToolContext(state.sample.sample_id, state.resolve_image, state.images, state.rounds, state.vignette)
    try:
        if executor is None:
            raise ToolFailure(f"{action.name} has no executor")
        result = executor(dict(action.arguments), ctx)
    except ToolFailure as exc:
        return append_stage(state, action, f"Error: {exc}")
    text, images = result.text, ()
    if result.image_ref is not None:
        if result.image_array is not None:
            state.images.put(result.image_ref, result.image_array)
        image_id = state.register_image(result.image_ref)
        text = f"{text}\n[Output Image ID: {image_id}]\n{IMAGE_TOKEN}"
        images = (result.image_ref,)
    return append_stage(state, action, text, images)


_FENCE_RE = re.compile(r"^```[a-zA-Z]*\s*\n?(.*?)\n?```\s*$", re.DOTALL)


def _strip_fence(body: str) -> str:
    m = _FENCE_RE.match(body.strip())
    return m.group(1).strip() if m else body.strip()


def _load_json_object(text: str) -> dict | None:
    text = text.strip()
    if not text.startswith("{"):
        return None
    try:
        obj, end = json.JSONDecoder().raw_decode(text)
    except json.JSONDecodeError:
        return None
    if text[end:].strip():
        return None
    return obj if isinstance(obj, dict) else None


def parse_policy_output(text: str) -> Action | Reply:
    """Interpret a raw policy completion as a tool call or a plain reply.

    Accepts ``{"name", "arguments"}`` objects and the ``{"thought", "actions"}``
    layout, optionally inside a code fence, after an optional think block.
    """
    think, body = split_think(text)
    obj = _load_json_object(_strip_fence(body))
    if obj is not None:
        if think is None and isinstance(obj.get("thought"), str):
            think = obj["thought"].strip()
        if "actions" in obj and isinstance(obj["actions"], list):
            if not obj["actions"]:
                return Reply(body.strip(), think or "")
            obj = obj["actions"][0] if isinstance(obj["actions"][0], dict) else {}
        name = obj.get("name")
        args = obj.get("arguments", {})
        if isinstance(name, str) and name and isinstance(args, dict):
            return Action(name, args, think or "")
    return Reply(body.strip(), think or "")


def _final_text(body: str) -> str | None:
    if FINAL_MARKER not in body:
        return None
    ans = body.rsplit(FINAL_MARKER, 1)[1].strip()
    if not ans:
        return None
    if ans.rstrip(".").lower() in ("yes", "no"):
        return ans.rstrip(".").lower()
    return ans


_ANSWER_PREFIX = re.compile(r"^\s*(?:final\s+)?answer\s*:\s*", re.IGNORECASE)


def answer_from_turn(environment_id: str, turn: Turn) -> str | None:
    """Final answer held by a closing gpt turn, or None."""
    act = turn.action
    if act is not None:
        for key in ANSWER_ARGUMENTS:
            value = act.arguments.get(key)
            if isinstance(value, str) and value.strip():
                return value.strip()
        return None
    body = turn.body
    found = _final_text(body)
    if found is not None:
        return found
    if environment_id == "collaboration":
        lines = [ln for ln in body.splitlines() if ln.strip()]
        if lines:
            ans = _ANSWER_PREFIX.sub("", lines[-1]).strip()
            return ans or None
    return None


def extract_answer(state: EpisodeState) -> str:
    if not state.terminated:
        raise InvariantViolation("extract_answer needs a terminated episode")
    if not state.turns or state.turns[-1].role != "gpt":
        raise MarkerMissing("episode did not end with a gpt turn")
    ans = answer_from_turn(state.environment_id, state.turns[-1])
    if ans is None:
        raise MarkerMissing("closing turn has neither a final marker nor a Terminate answer")
    return ans


@dataclass
class EpisodeResult:
    trajectory: Trajectory | None
    final_answer: str | None
    failure: str | None
    forced: bool
    depth: int
    latency_ms: float = 0.0
    tokens: int = 0
    first_choice: str = "direct"

    @property
    def ok(self) -> bool:
        return self.failure is None and self.trajectory is not None


def to_trajectory(state: EpisodeState, mode: str = "prospective", meta: Mapping[str, Any] | None = None) -> Trajectory:
    extra = {"dataset_id": state.sample.dataset_id}
    if state.forced:
        extra["forced_answer"] = True
    extra.update(meta or {})
    return build_trajectory(
        sample_id=state.sample.sample_id,
        environment_id=state.environment_id,
        turns=state.turns,
        final_answer=state.final_answer or "",
        mode=mode,
        system_prompt=state.system_prompt,
        tool_schemas=state.spec.tool_schemas,
        meta=extra,
    )


def policy_messages(state: EpisodeState) -> tuple[Message, ...]:
    msgs = [Message(t.role, t.content, t.images) for t in state.turns]
    if state.forced:
        msgs.append(Message("human", FORCED_PROMPT + FORCED_HINT.get(state.environment_id, "")))
    return tuple(msgs)


def run_episode(
    state: EpisodeState,
    policy: PolicyHandle,
    *,
    seed: int = 0,
    temperature: float = 0.0,
    max_length: int = 2048,
    role: str = "agent",
) -> EpisodeResult:
    """Drive ``policy`` until the episode terminates or fails."""
    if state.environment_id == "collaboration":
        from .collaboration import collaborate

        return collaborate(state, policy, seed=seed, temperature=temperature, max_length=max_length)

    latency, tokens, first_choice = 0.0, 0, None
    decoding = DecodingHints(max_length=max_length, temperature=temperature, seed=seed)
    # each iteration either adds an action, terminates or sets the forced flag
    for _ in range(state.spec.t_max + 2):
        resp = policy.complete(PolicyRequest(role, state.system_prompt, policy_messages(state), decoding))
        latency += resp.latency_ms
        tokens += resp.usage.total
        out = parse_policy_output(resp.content)
        is_tool = isinstance(out, Action) and out.name not in state.spec.terminal_actions
        if first_choice is None:
            first_choice = "agentic" if is_tool else "direct"
        if state.forced and is_tool:
            state.terminated, state.failure = True, "depth_exceeded"
            break
        try:
            res = step(state, out)
        except DepthExceeded:
            continue
        except UnknownAction:
            state.terminated, state.failure = True, "unknown_action"
            break
        except SchemaViolation:
            state.terminated, state.failure = True, "schema_violation"
            break
        if isinstance(res, Terminal):
            break
    else:
        state.terminated, state.failure = True, "no_answer"

    traj = None
    if state.failure is None and state.final_answer is not None:
        traj = to_trajectory(state)
    return EpisodeResult(traj, state.final_answer, state.failure, state.forced, state.actions_taken,
                         latency, tokens, first_choice or "direct")
