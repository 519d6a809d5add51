"""Structural and behavioral trajectory filters, class balancing and audit sampling."""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Iterable, Mapping, Sequence

from .environments.engine import answer_from_turn
from .environments.specs import EnvironmentSpec, get_spec
from .metrics import Matcher, diagnosis_match, exact_match
from .trajectory import IMAGE_TOKEN, T_MAX, Trajectory, Turn, depth, grammar_error_index, parse_action_body

REJECT, FLAG = "reject", "flag"

RULES = {
    # structural
    "correctness": REJECT,
    "grammar": REJECT,
    "unknown_tool": REJECT,
    "bad_arguments": REJECT,
    "missing_terminate": REJECT,
    "image_alignment": REJECT,
    "length_bound": REJECT,
    "depth_bound": REJECT,
    # behavioral
    "hallucination_keyword": FLAG,
    "repetition_loop": REJECT,
    "truncation": REJECT,
    "missing_think": REJECT,
    "short_content": REJECT,
}

DEFAULT_LENGTH_BOUND = 10_000
DEFAULT_DEPTH_BOUNDS = {k: v for k, v in T_MAX.items() if k != "direct"}
MIN_MEANINGFUL = 10

_BASE64_RE = re.compile(r"data:[\w/+.-]+;base64,[A-Za-z0-9+/=]+|[A-Za-z0-9+/]{256,}={0,2}")
_NOISE_RE = re.compile(r"[\s*_`#>~|\-{}\[\]\":,]+")
_THINK_TAGS = re.compile(r"</?think>")


@dataclass(frozen=True)
class Violation:
    rule_id: str
    message: str
    turn_index: int | None = None

    def __post_init__(self):
        if self.rule_id not in RULES:
            raise ValueError(f"unregistered rule {self.rule_id!r}")

    @property
    def severity(self) -> str:
        return RULES[self.rule_id]

    def to_json(self) -> dict:
        return {"rule_id": self.rule_id, "severity": self.severity, "turn_index": self.turn_index,
                "message": self.message}


@dataclass(frozen=True)
class LintReport:
    trajectory_id: str
    violations: tuple[Violation, ...] = ()

    @property
    def verdict(self) -> str:
        if any(v.severity == REJECT for v in self.violations):
            return "reject"
        if self.violations:
            return "flagged"
        return "pass"

    @property
    def rule_ids(self) -> list[str]:
        return [v.rule_id for v in self.violations]

    @property
    def reject_rules(self) -> set[str]:
        return {v.rule_id for v in self.violations if v.severity == REJECT}

    def merge(self, other: "LintReport") -> "LintReport":
        return LintReport(self.trajectory_id, self.violations + other.violations)

    def to_json(self) -> dict:
        return {"trajectory_id": self.trajectory_id, "verdict": self.verdict,
                "violations": [v.to_json() for v in self.violations]}


# ---------------------------------------------------------------------------
# helpers

def _spec_for(t: Trajectory, env: EnvironmentSpec | None) -> EnvironmentSpec | None:
    if env is not None:
        return env
    try:
        return get_spec(t.environment_id)
    except ValueError:
        return None


def _brackets_balanced(text: str) -> bool:
    """Bracket balance of JSON-ish text, ignoring characters inside strings."""
    stack, in_str, esc = [], False, False
    pairs = {"}": "{", "]": "["}
    for ch in text:
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            stack.append(ch)
        elif ch in "}]":
            if not stack or stack.pop() != pairs[ch]:
                return False
    return not stack and not in_str


def meaningful_length(text: str) -> int:
    """Characters left after dropping think tags, image tokens, whitespace, markdown and JSON syntax."""
    text = _THINK_TAGS.sub("", text).replace(IMAGE_TOKEN, "")
    return len(_NOISE_RE.sub("", text))


def content_length(t: Trajectory) -> int:
    return sum(len(_BASE64_RE.sub("", turn.content)) for turn in t.turns)


def _ends_sentence(text: str) -> bool:
    return text.rstrip().rstrip("\"')]*").endswith((".", "!", "?"))


def terminate_problem(t: Trajectory) -> str | None:
    """Why the closing turn does not end the episode the way its environment requires."""
    last = t.turns[-1]
    env = t.environment_id
    if env in ("interleaved", "simulation"):
        act = last.action
        if act is None or act.name != "Terminate":
            return "closing turn is not a Terminate action"
        if answer_from_turn(env, last) is None:
            return "Terminate carries no answer"
        return None
    if env == "tool_calling":
        if "[FINAL]" not in last.body or answer_from_turn(env, last) is None:
            return "closing turn has no [FINAL] answer"
        return None
    if env == "collaboration":
        names = {a.name for a in t.actions if a is not None}
        if names & {"ExpertAnalysis", "Debate"} and "Synthesize" not in names:
            return "panel discussion ended without a synthesis stage"
    if not last.body.strip():
        return "closing turn is empty"
    return None


# ---------------------------------------------------------------------------
# structural

def structural_check(
    t: Trajectory,
    env: EnvironmentSpec | None = None,
    matcher: Matcher | None = None,
    gold: str | None = None,
    *,
    length_bound: int = DEFAULT_LENGTH_BOUND,
    depth_bounds: Mapping[str, int] | None = None,
) -> LintReport:
    out: list[Violation] = []
    spec = _spec_for(t, env)
    gold = gold if gold is not None else t.meta.get("gold_answer")
    if matcher is None:
        # free-text diagnoses need the staged matcher; everything else defaults to exact
        matcher = diagnosis_match if t.environment_id == "simulation" else exact_match
    if gold is not None:
        if not t.final_answer or not matcher(t.final_answer, gold):
            out.append(Violation("correctness", f"answer {t.final_answer!r} does not match gold {gold!r}"))

    bad = grammar_error_index([turn.role for turn in t.turns])
    if bad is not None:
        out.append(Violation("grammar", "turn order breaks human -> (function_call -> observation)* -> gpt", bad))

    tools = spec.tool_names if spec is not None else {s.name for s in t.tool_schemas}
    for i, turn in enumerate(t.turns):
        if turn.role != "function_call" and not (turn.role == "gpt" and i == len(t.turns) - 1):
            continue
        body = turn.body.strip()
        if turn.role == "gpt" and not body.startswith("{"):
            continue
        if not _brackets_balanced(body):
            continue  # reported as truncation
        try:
            act = parse_action_body(body)
        except ValueError as exc:
            if turn.role == "function_call":
                out.append(Violation("bad_arguments", f"action is not valid JSON: {exc}", i))
            continue
        if act.name not in tools:
            out.append(Violation("unknown_tool", f"{act.name!r} is not available here", i))
            continue
        schema = spec.schema(act.name) if spec is not None else None
        problems = schema.check_arguments(act.arguments) if schema is not None else []
        if problems:
            out.append(Violation("bad_arguments", f"{act.name}: " + "; ".join(problems), i))

    if t.turns and t.turns[-1].role == "gpt":
        problem = terminate_problem(t)
        if problem:
            out.append(Violation("missing_terminate", problem, len(t.turns) - 1))

    for i, turn in enumerate(t.turns):
        if turn.image_count != len(turn.images):
            out.append(Violation("image_alignment", f"{turn.image_count} image tokens, {len(turn.images)} images", i))
    total = sum(turn.image_count for turn in t.turns)
    if total != len(t.images):
        out.append(Violation("image_alignment", f"{total} image tokens but {len(t.images)} images listed"))

    length = content_length(t)
    if length > length_bound:
        out.append(Violation("length_bound", f"{length} characters exceeds {length_bound}"))

    bounds = dict(DEFAULT_DEPTH_BOUNDS, **(depth_bounds or {}))
    bounds["direct"] = 0
    cap = bounds.get(t.environment_id)
    if cap is not None and depth(t) > cap:
        out.append(Violation("depth_bound", f"depth {depth(t)} exceeds {cap}"))
    return LintReport(t.sample_id, tuple(out))


# ---------------------------------------------------------------------------
# behavioral

def load_lexicon(path=None) -> frozenset[str]:
    if path is None:
        text = resources.files("trajforge.data").joinpath("lexicon.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    terms = (ln.split("#", 1)[0].strip().lower() for ln in text.splitlines())
    return frozenset(t for t in terms if t)


def _term_re(term: str) -> re.Pattern:
    return re.compile(rf"\b{re.escape(term)}\b", re.IGNORECASE)


def behavioral_check(t: Trajectory, lexicon: Iterable[str] = ()) -> LintReport:
    out: list[Violation] = []
    last = len(t.turns) - 1
    grounding = "\n".join([t.question, *t.observations])
    for term in sorted(set(lexicon)):
        pat = _term_re(term)
        if pat.search(grounding):
            continue
        for i, turn in enumerate(t.turns):
            if turn.think and pat.search(turn.think):
                out.append(Violation("hallucination_keyword", f"{term!r} appears in reasoning but not in the inputs", i))
                break

    prev = None
    for i, turn in enumerate(t.turns):
        if turn.role != "function_call":
            continue
        act = turn.action
        if act is not None and prev is not None and act.key() == prev.key():
            out.append(Violation("repetition_loop", f"{act.name} repeated with identical arguments", i))
        prev = act

    for i, turn in enumerate(t.turns):
        if turn.content.count("```") % 2:
            out.append(Violation("truncation", "unclosed code fence", i))
        elif turn.role == "function_call" and not _brackets_balanced(turn.body.strip()):
            out.append(Violation("truncation", "unbalanced brackets in action JSON", i))
        elif turn.think and not _ends_sentence(turn.think):
            out.append(Violation("truncation", "reasoning stops without terminal punctuation", i))

    for i, turn in enumerate(t.turns):
        if turn.role == "function_call" and not turn.think:
            out.append(Violation("missing_think", "tool call without reasoning", i))

    for i, turn in enumerate(t.turns):
        if i == last and turn.role == "gpt":
            continue  # short final answers such as "yes" are legitimate
        n = meaningful_length(turn.content)
        if n < MIN_MEANINGFUL:
            out.append(Violation("short_content", f"only {n} meaningful characters", i))
    return LintReport(t.sample_id, tuple(out))


# ---------------------------------------------------------------------------
# combined

@dataclass(frozen=True)
class ValidatorSettings:
    length_bound: int = DEFAULT_LENGTH_BOUND
    depth_bounds: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_DEPTH_BOUNDS))
    lexicon: frozenset[str] = field(default_factory=frozenset)


def lint(t: Trajectory, settings: ValidatorSettings | None = None, *, env: EnvironmentSpec | None = None,
         matcher: Matcher | None = None, gold: str | None = None) -> LintReport:
    settings = settings or ValidatorSettings()
    rep = structural_check(t, env, matcher, gold, length_bound=settings.length_bound,
                           depth_bounds=settings.depth_bounds)
    return rep.merge(behavioral_check(t, settings.lexicon))


def lint_corpus(trajectories: Iterable[Trajectory], settings: ValidatorSettings | None = None,
                matcher: Matcher | None = None) -> list[LintReport]:
    reports = [lint(t, settings, matcher=matcher) for t in trajectories]
    return sorted(reports, key=lambda r: r.trajectory_id)


# ---------------------------------------------------------------------------
# balancing and audit

def yes_no_label(answer: str) -> str | None:
    a = answer.strip().rstrip(".").lower()
    return a if a in ("yes", "no") else None


def class_balance(records: Sequence[Any], label: Callable[[Any], str | None], majority_rate: float,
                  seed: int) -> list[Any]:
    """Keep majority-label records with probability ``majority_rate``; others are kept.

    The majority must be a unique most frequent label; otherwise the input is
    returned unchanged. Records whose label is None are always kept.
    """
    if majority_rate >= 1.0:
        return list(records)
    labels = [label(r) for r in records]
    counts: dict[str, int] = {}
    for lab in labels:
        if lab is not None:
            counts[lab] = counts.get(lab, 0) + 1
    if not counts:
        return list(records)
    top = max(counts.values())
    leaders = [k for k, v in counts.items() if v == top]
    if len(leaders) != 1 or len(counts) < 2:
        return list(records)
    majority = leaders[0]
    rng = random.Random(seed)
    return [r for r, lab in zip(records, labels) if lab != majority or rng.random() < majority_rate]


def audit_sample(corpus: Sequence[Any], fraction: float = 0.10, seed: int = 0) -> list[Any]:
    if not corpus:
        return []
    k = min(len(corpus), math.ceil(fraction * len(corpus)))
    picked = sorted(random.Random(seed).sample(range(len(corpus)), k))
    return [corpus[i] for i in picked]


def dumps_reports(reports: Sequence[LintReport]) -> str:
    summary: dict[str, int] = {}
    for r in reports:
        summary[r.verdict] = summary.get(r.verdict, 0) + 1
    return json.dumps({"summary": summary, "reports": [r.to_json() for r in reports]},
                      sort_keys=True, indent=2, ensure_ascii=False) + "\n"
