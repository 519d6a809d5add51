"""Staged multi-expert protocol: assess, recruit, analyse, debate, synthesize, vote.

Every stage is one (function_call, observation) pair authored by the engine;
the policy only supplies the observation text. The closing gpt turn is the
moderator, computed here as a deterministic majority vote.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass

from ..errors import ProtocolViolation
from ..policy import DecodingHints, Message, PolicyHandle, PolicyRequest
from ..trajectory import Action, Trajectory, Turn, split_think
from .engine import EpisodeResult, EpisodeState, Sample, _finish, append_stage, reset, to_trajectory
from .specs import COLLABORATION

EXPERT_COUNT = 3
DEBATE_ROUNDS = 2
LEVELS = ("basic", "intermediate", "advanced")

ASSESS_PROMPT = """Rate how hard the medical query is:
1) basic: one expert can answer it.
2) intermediate: several specialists should discuss it.
3) advanced: it needs a multidisciplinary team.
Reply with the number and the level."""

RECRUIT_PROMPT = f"""Recruit {EXPERT_COUNT} medical experts with different specialties for this query.
Reply with a numbered list, one expert per line, e.g. "1. Radiologist - reads the imaging"."""

EXPERT_PROMPT = """You are a {specialty}. Analyse the query and end with a line "Answer: <answer>"."""

DEBATE_PROMPT = """You are a {specialty}. Read the other experts' latest opinions, then restate or revise your view.
End with a line "Answer: <answer>"."""

SYNTH_PROMPT = """Summarize the experts' opinions into one report that lists points of agreement and disagreement."""

_LEVEL_NUM = {"1": "basic", "2": "intermediate", "3": "advanced"}
_LIST_ITEM = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*(.+?)\s*$")
_ANSWER_LINE = re.compile(r"^\s*\**\s*(?:final\s+)?answer\s*\**\s*:\s*\**\s*(.+?)\s*\**\s*$", re.IGNORECASE)
_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def parse_difficulty(text: str) -> str | None:
    body = split_think(text)[1].lower()
    for level in LEVELS:
        if re.search(rf"\b{level}\b", body):
            return level
    m = re.search(r"\b([123])\s*\)", body) or re.fullmatch(r"\s*([123])\s*\.?\s*", body)
    return _LEVEL_NUM[m.group(1)] if m else None


@dataclass(frozen=True)
class Expert:
    specialty: str
    description: str = ""


def parse_recruits(text: str) -> list[Expert] | None:
    """Numbered or bulleted list; text after " - " or ":" is the description."""
    experts = []
    for line in split_think(text)[1].splitlines():
        m = _LIST_ITEM.match(line)
        if not m:
            continue
        item = m.group(1).strip("* ")
        specialty, description = re.split(r"\s+-\s+|:\s*|\s*\(", item, maxsplit=1)[0], ""
        if len(specialty) < len(item):
            description = item[len(specialty):].strip(" -:()")
        specialty = specialty.strip(" *")
        if specialty:
            experts.append(Expert(specialty, description))
    return experts[:EXPERT_COUNT] if len(experts) >= EXPERT_COUNT else None


def parse_expert_answer(text: str) -> str | None:
    """Last "Answer: X" line, else the last nonempty line."""
    lines = [ln for ln in split_think(text)[1].splitlines() if ln.strip()]
    if not lines:
        return None
    for line in reversed(lines):
        m = _ANSWER_LINE.match(line)
        if m and m.group(1).strip():
            return m.group(1).strip().rstrip(".")
    return lines[-1].strip().rstrip(".")


def normalize_vote(answer: str) -> str:
    return " ".join(answer.lower().translate(_PUNCT).split())


def majority_vote(answers: list[str]) -> str:
    """Most common normalized answer; ties go to the group whose first member spoke first."""
    if not answers:
        raise ValueError("no answers to vote on")
    groups: dict[str, list[int]] = {}
    for i, ans in enumerate(answers):
        groups.setdefault(normalize_vote(ans), []).append(i)
    best = max(groups.values(), key=lambda idx: (len(idx), -idx[0]))
    return answers[best[0]]


def _clean(text: str) -> str:
    return split_think(text)[1].strip()


class _Runner:
    def __init__(self, state: EpisodeState, policy: PolicyHandle, decoding: DecodingHints):
        self.state = state
        self.policy = policy
        self.decoding = decoding
        self.latency = 0.0
        self.tokens = 0

    def ask(self, role: str, system: str, content: str, parse, reminder: str):
        msgs = (Message("human", content, self.state.sample.images),)
        for attempt in range(2):
            resp = self.policy.complete(PolicyRequest(role, system, msgs, self.decoding))
            self.latency += resp.latency_ms
            self.tokens += resp.usage.total
            parsed = parse(resp.content)
            if parsed is not None:
                return resp.content, parsed
            msgs = msgs + (Message("gpt", resp.content), Message("human", reminder))
        raise ProtocolViolation(f"{self.state.stage}: policy output could not be parsed after one re-ask")

    def stage(self, stage: str, action: Action, text: str) -> None:
        self.state.stage = stage
        append_stage(self.state, action, text)


def collaborate(state: EpisodeState, policy: PolicyHandle, *, seed: int = 0, temperature: float = 0.0,
                max_length: int = 2048) -> EpisodeResult:
    run = _Runner(state, policy, DecodingHints(max_length=max_length, temperature=temperature, seed=seed))
    question = state.sample.question

    raw, level = run.ask("agent", ASSESS_PROMPT, question, parse_difficulty,
                         "Reply with one of: 1) basic, 2) intermediate, 3) advanced.")
    run.stage("assess", Action("AssessDifficulty", {}, "The query needs a difficulty rating before choosing a protocol."),
              f"Difficulty assessment: {_clean(raw)}")
    meta = {"difficulty": level}

    if level == "basic":
        raw, answer = run.ask("expert", EXPERT_PROMPT.format(specialty="medical expert"), question,
                              parse_expert_answer, 'End with a line "Answer: <answer>".')
        run.stage("expert", Action("ExpertAnswer", {}, "The query is basic, so one expert answers it."),
                  f"Expert answer:\n{_clean(raw)}")
        closing = Turn.gpt(f"Answer: {answer}", "The single expert answer is final.")
    else:
        raw, experts = run.ask("agent", RECRUIT_PROMPT, question, parse_recruits,
                               f"List exactly {EXPERT_COUNT} experts as a numbered list.")
        roster = "\n".join(f"{i + 1}. {e.specialty}" + (f" - {e.description}" if e.description else "")
                           for i, e in enumerate(experts))
        run.stage("recruit", Action("RecruitExperts", {"count": EXPERT_COUNT},
                                    f"The query is {level}, so a panel of {EXPERT_COUNT} specialists is recruited."),
                  f"Recruited experts:\n{roster}")
        meta["experts"] = [e.specialty for e in experts]

        opinions: list[str] = []
        answers: list[str] = []
        for e in experts:
            raw, ans = run.ask("expert", EXPERT_PROMPT.format(specialty=e.specialty), question,
                               parse_expert_answer, 'End with a line "Answer: <answer>".')
            run.stage("analysis", Action("ExpertAnalysis", {"expert": e.specialty},
                                         f"The {e.specialty} analyses the query independently."),
                      f"{e.specialty} analysis:\n{_clean(raw)}")
            opinions.append(_clean(raw))
            answers.append(ans)

        for r in range(1, DEBATE_ROUNDS + 1):
            for i, e in enumerate(experts):
                others = "\n\n".join(f"{experts[j].specialty}:\n{opinions[j]}" for j in range(len(experts)) if j != i)
                content = f"{question}\n\nOther experts' latest opinions:\n{others}"
                raw, ans = run.ask("expert", DEBATE_PROMPT.format(specialty=e.specialty), content,
                                   parse_expert_answer, 'End with a line "Answer: <answer>".')
                run.stage("debate", Action("Debate", {"round": r, "expert": e.specialty},
                                           f"The {e.specialty} responds to the panel in round {r}."),
                          f"Debate round {r}, {e.specialty}:\n{_clean(raw)}")
                opinions[i] = _clean(raw)
                answers[i] = ans

        summary = "\n\n".join(f"{e.specialty}:\n{o}" for e, o in zip(experts, opinions))
        raw, _ = run.ask("agent", SYNTH_PROMPT, f"{question}\n\nExpert opinions:\n{summary}",
                         lambda t: _clean(t) or None, "Write the synthesis report.")
        run.stage("synthesize", Action("Synthesize", {}, "The debate is over, so the opinions are summarized."),
                  f"Synthesis report:\n{_clean(raw)}")
        answer = majority_vote(answers)
        meta["votes"] = list(answers)
        closing = Turn.gpt(f"Answer: {answer}", f"The moderator takes the majority of the {EXPERT_COUNT} final answers.")

    _finish(state, closing)
    traj = to_trajectory(state, meta=meta) if state.failure is None else None
    return EpisodeResult(traj, state.final_answer, state.failure, False, state.actions_taken,
                         run.latency, run.tokens, "agentic")


def run_collaboration(sample: Sample, policy: PolicyHandle, *, seed: int = 0, temperature: float = 0.0,
                      t_max: int | None = None) -> Trajectory:
    spec = COLLABORATION if t_max is None else COLLABORATION.with_t_max(t_max)
    result = collaborate(reset(spec, sample), policy, seed=seed, temperature=temperature)
    if result.trajectory is None:
        raise ProtocolViolation(f"collaboration on {sample.sample_id} produced no answer")
    return result.trajectory
