"""Tiered trajectory distillation: student, teacher, then agent environments.

Each sample walks the tiers in order and stops at the first one that answers
it correctly. Tier-3 successes are paired with a hindsight re-narration that
keeps the action sequence and rewrites only the reasoning.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .environments import EnvironmentSuite, Sample
from .environments.engine import answer_from_turn, render_question
from .environments.specs import DIRECT
from .errors import EnvironmentError_, ForgeError, InvariantViolation, MissingImage, MissingVignette, PolicyError, RecapInvalid
from .metrics import Matcher, exact_match
from .policy import DecodingHints, Message, PolicyHandle, PolicyRequest, recap, recap_entries_json
from .trajectory import Trajectory, Turn, build_trajectory, canonical_json, depth, serialize
from .validator import ValidatorSettings, class_balance, lint, yes_no_label

log = logging.getLogger("trajforge.pipeline")

TIER_MODES = {1: ("direct",), 2: ("enhanced",), 3: ("prospective", "retrospective")}
DEFAULT_RETRIES = 8
DEFAULT_SCHEDULE = (0.2, 0.7)

EXHAUSTED = "exhausted_retries"
RECAP_FILTERED = "recap_filtered"
MISSING_INPUT = "missing_input"
UNSOLVED = "unsolved"
BALANCED_OUT = "class_balance"


def attempt_seed(global_seed: int, sample_id: str, attempt: int) -> int:
    """Seed for one attempt; stable across runs, distinct across attempts."""
    digest = hashlib.sha256(f"{global_seed}:{sample_id}:{attempt}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def temperature_for(schedule: Sequence[float], attempt: int) -> float:
    """Attempt 1 uses the first entry; the last entry repeats."""
    return schedule[min(attempt - 1, len(schedule) - 1)]


@dataclass(frozen=True)
class DatasetRecord:
    sample: Sample
    trajectory: Trajectory
    tier: int
    mode: str

    def __post_init__(self):
        if self.mode not in TIER_MODES.get(self.tier, ()):
            raise InvariantViolation(f"tier {self.tier} cannot hold mode {self.mode!r}")
        if self.trajectory.sample_id != self.sample.sample_id:
            raise InvariantViolation("record trajectory belongs to another sample")

    @property
    def sample_id(self) -> str:
        return self.sample.sample_id


@dataclass(frozen=True)
class AgenticPair:
    prospective: DatasetRecord
    retrospective: DatasetRecord
    attempts: int

    def __post_init__(self):
        if (self.prospective.mode, self.retrospective.mode) != ("prospective", "retrospective"):
            raise InvariantViolation("a pair needs one prospective and one retrospective record")
        p, r = self.prospective.trajectory, self.retrospective.trajectory
        if p.sample_id != r.sample_id or p.environment_id != r.environment_id:
            raise InvariantViolation("pair halves disagree on sample or environment")
        if [a.key() for a in p.actions] != [a.key() for a in r.actions]:
            raise InvariantViolation("pair halves disagree on the action sequence")

    @property
    def sample_id(self) -> str:
        return self.prospective.sample_id


@dataclass
class TierPartition:
    direct: list[DatasetRecord] = field(default_factory=list)
    enhanced: list[DatasetRecord] = field(default_factory=list)
    agentic: list[AgenticPair] = field(default_factory=list)
    discard: dict[str, str] = field(default_factory=dict)
    # prospective halves whose recap failed; kept for audit, never assembled
    recap_filtered: list[DatasetRecord] = field(default_factory=list)
    attempts: dict[str, int] = field(default_factory=dict)
    datasets: dict[str, str] = field(default_factory=dict)

    def sample_ids(self) -> dict[str, list[str]]:
        return {
            "direct": [r.sample_id for r in self.direct],
            "enhanced": [r.sample_id for r in self.enhanced],
            "agentic": [p.sample_id for p in self.agentic],
            "discard": list(self.discard),
        }

    def check(self, expected: Iterable[str] | None = None) -> None:
        seen: dict[str, str] = {}
        for part, ids in self.sample_ids().items():
            for sid in ids:
                if sid in seen:
                    raise InvariantViolation(f"sample {sid} is in both {seen[sid]} and {part}")
                seen[sid] = part
        if expected is not None and set(seen) != set(expected):
            raise InvariantViolation("partition does not cover the dataset exactly")

    def __len__(self) -> int:
        return len(self.direct) + len(self.enhanced) + len(self.agentic) + len(self.discard)


@dataclass
class PipelineSettings:
    retries: int = DEFAULT_RETRIES
    temperature_schedule: tuple[float, ...] = DEFAULT_SCHEDULE
    global_seed: int = 0
    workers: int = 1
    tiers: tuple[int, ...] = (1, 2, 3)
    validator: ValidatorSettings = field(default_factory=ValidatorSettings)
    majority_rate: float = 1 / 3


MatcherMap = Mapping[str, Matcher] | Matcher


def _matcher(matchers: MatcherMap | None, dataset_id: str) -> Matcher:
    if matchers is None:
        return exact_match
    if callable(matchers):
        return matchers
    return matchers.get(dataset_id, exact_match)


# ---------------------------------------------------------------------------
# tiers 1 and 2

def _direct_answer(content: str) -> str:
    ans = answer_from_turn("direct", Turn.gpt(content))
    if ans is not None:
        return ans
    lines = [ln.strip() for ln in Turn.gpt(content).body.splitlines() if ln.strip()]
    return lines[-1] if lines else ""


def direct_attempt(sample: Sample, policy: PolicyHandle, tier: int, matcher: Matcher,
                   seed: int) -> DatasetRecord | None:
    """One tool-free answer. Returns a record when it matches gold."""
    question = render_question(DIRECT, sample)
    req = PolicyRequest(policy.role, DIRECT.system_prompt, (Message("human", question.content, question.images),),
                        DecodingHints(seed=seed))
    try:
        content = policy.complete(req).content
    except PolicyError as exc:
        log.warning("tier %d policy failure on %s: %s", tier, sample.sample_id, exc)
        return None
    answer = _direct_answer(content)
    if not answer or not matcher(answer, sample.gold_answer):
        return None
    mode = TIER_MODES[tier][0]
    traj = build_trajectory(
        sample_id=sample.sample_id, environment_id="direct", turns=(question, Turn.gpt(content)),
        final_answer=answer, mode=mode, system_prompt=DIRECT.system_prompt, tier=tier,
        meta={"dataset_id": sample.dataset_id, "gold_answer": sample.gold_answer},
    )
    return DatasetRecord(sample, traj, tier, mode)


def run_tier1(dataset: Sequence[Sample], student: PolicyHandle, matcher: MatcherMap | None = None,
              global_seed: int = 0) -> tuple[list[DatasetRecord], list[Sample]]:
    return _run_direct_tier(dataset, student, 1, matcher, global_seed)


def run_tier2(residual: Sequence[Sample], teacher: PolicyHandle, matcher: MatcherMap | None = None,
              global_seed: int = 0) -> tuple[list[DatasetRecord], list[Sample]]:
    return _run_direct_tier(residual, teacher, 2, matcher, global_seed)


def _run_direct_tier(samples, policy, tier, matcher, global_seed):
    records, residual = [], []
    for s in samples:
        rec = direct_attempt(s, policy, tier, _matcher(matcher, s.dataset_id),
                             attempt_seed(global_seed, s.sample_id, 0))
        (records.append(rec) if rec is not None else residual.append(s))
    return records, residual


# ---------------------------------------------------------------------------
# tier 3

@dataclass
class AgenticOutcome:
    sample: Sample
    pair: AgenticPair | None = None
    prospective: DatasetRecord | None = None
    discard_reason: str | None = None
    attempts: int = 0


def retrospective_of(prospective: Trajectory, thoughts: Sequence[str], entries: list[dict]) -> Trajectory:
    """Same turns and actions, reasoning replaced by the hindsight thoughts."""
    turns, k, last = [], 0, len(prospective.turns) - 1
    for i, turn in enumerate(prospective.turns):
        if turn.role == "function_call" or i == last:
            turn = turn.with_think(thoughts[k])
            k += 1
        turns.append(turn)
    meta = dict(prospective.meta, recap=entries)
    return build_trajectory(
        sample_id=prospective.sample_id, environment_id=prospective.environment_id, turns=turns,
        final_answer=prospective.final_answer, mode="retrospective", system_prompt=prospective.system_prompt,
        tool_schemas=prospective.tool_schemas, tier=3, meta=meta,
    )


def agentic_attempts(sample: Sample, environment_id: str, suite: EnvironmentSuite, agent: PolicyHandle,
                     recap_policy: PolicyHandle, matcher: Matcher, settings: PipelineSettings) -> AgenticOutcome:
    prospective = None
    attempt = 0
    for attempt in range(1, settings.retries + 1):
        seed = attempt_seed(settings.global_seed, sample.sample_id, attempt)
        temp = temperature_for(settings.temperature_schedule, attempt)
        try:
            result = suite.run(environment_id, sample, agent, seed=seed, temperature=temp)
        except (MissingVignette, MissingImage) as exc:
            log.warning("tier 3 cannot start %s: %s", sample.sample_id, exc)
            return AgenticOutcome(sample, discard_reason=MISSING_INPUT, attempts=attempt)
        except ForgeError as exc:
            log.info("attempt %d on %s failed: %s", attempt, sample.sample_id, exc)
            continue
        if not result.ok or not matcher(result.final_answer, sample.gold_answer):
            continue
        t = result.trajectory
        t = build_trajectory(
            sample_id=t.sample_id, environment_id=t.environment_id, turns=t.turns, final_answer=t.final_answer,
            mode="prospective", system_prompt=t.system_prompt, tool_schemas=t.tool_schemas, tier=3,
            meta=dict(t.meta, gold_answer=sample.gold_answer, attempts=attempt),
        )
        if lint(t, settings.validator, matcher=matcher).verdict == "reject":
            continue
        prospective = DatasetRecord(sample, t, 3, "prospective")
        break
    if prospective is None:
        return AgenticOutcome(sample, discard_reason=EXHAUSTED, attempts=attempt)

    t = prospective.trajectory
    try:
        rc = recap(recap_policy, sample.question, sample.gold_answer, t.actions, t.observations)
        retro = retrospective_of(t, rc.thoughts, recap_entries_json(rc))
        if lint(retro, settings.validator, matcher=matcher).verdict == "reject":
            raise RecapInvalid("re-narrated trajectory fails validation")
    except (RecapInvalid, PolicyError) as exc:
        log.info("recap filtered %s: %s", sample.sample_id, exc)
        return AgenticOutcome(sample, prospective=prospective, discard_reason=RECAP_FILTERED, attempts=attempt)
    pair = AgenticPair(prospective, DatasetRecord(sample, retro, 3, "retrospective"), attempt)
    return AgenticOutcome(sample, pair=pair, attempts=attempt)


def run_tier3(residual2: Sequence[Sample], agent: PolicyHandle, env_map: Mapping[str, str], suite: EnvironmentSuite,
              recap_policy: PolicyHandle, matcher: MatcherMap | None = None,
              settings: PipelineSettings | None = None) -> tuple[list[AgenticPair], dict[str, str]]:
    settings = settings or PipelineSettings()
    missing = sorted({s.dataset_id for s in residual2} - set(env_map))
    if missing:
        raise InvariantViolation(f"no environment mapped for datasets {missing}")
    pairs, discard = [], {}
    for s in residual2:
        out = agentic_attempts(s, env_map[s.dataset_id], suite, agent, recap_policy,
                               _matcher(matcher, s.dataset_id), settings)
        if out.pair is not None:
            pairs.append(out.pair)
        else:
            discard[s.sample_id] = out.discard_reason
    return pairs, discard


# ---------------------------------------------------------------------------
# full run

@dataclass
class Policies:
    student: PolicyHandle | None
    teacher: PolicyHandle | None
    agent: PolicyHandle | None
    recap: PolicyHandle | None


def _process(sample: Sample, policies: Policies, env_map, suite, matchers, settings) -> AgenticOutcome | DatasetRecord:
    matcher = _matcher(matchers, sample.dataset_id)
    for tier, policy in ((1, policies.student), (2, policies.teacher)):
        if tier in settings.tiers and policy is not None:
            rec = direct_attempt(sample, policy, tier, matcher, attempt_seed(settings.global_seed, sample.sample_id, 0))
            if rec is not None:
                return rec
    if 3 not in settings.tiers or policies.agent is None:
        return AgenticOutcome(sample, discard_reason=UNSOLVED)
    return agentic_attempts(sample, env_map[sample.dataset_id], suite, policies.agent, policies.recap, matcher,
                            settings)


def run_pipeline(dataset: Sequence[Sample], policies: Policies, env_map: Mapping[str, str],
                 suite: EnvironmentSuite | None = None, matchers: MatcherMap | None = None,
                 settings: PipelineSettings | None = None) -> TierPartition:
    settings = settings or PipelineSettings()
    suite = suite or EnvironmentSuite()
    ids = [s.sample_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise InvariantViolation("sample ids must be unique")
    if 3 in settings.tiers:
        missing = sorted({s.dataset_id for s in dataset} - set(env_map))
        if missing:
            raise InvariantViolation(f"no environment mapped for datasets {missing}")
        if policies.agent is not None and policies.recap is None:
            raise InvariantViolation("tier 3 needs a recap policy")

    def work(s: Sample):
        return _process(s, policies, env_map, suite, matchers, settings)

    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            outcomes = list(pool.map(work, dataset))
    else:
        outcomes = [work(s) for s in dataset]

    part = TierPartition()
    # single-writer merge in canonical order
    for out in sorted(outcomes, key=lambda o: o.sample.sample_id):
        part.datasets[out.sample.sample_id] = out.sample.dataset_id
        if isinstance(out, DatasetRecord):
            (part.direct if out.tier == 1 else part.enhanced).append(out)
            continue
        part.attempts[out.sample.sample_id] = out.attempts
        if out.pair is not None:
            part.agentic.append(out.pair)
        else:
            part.discard[out.sample.sample_id] = out.discard_reason
            if out.prospective is not None:
                part.recap_filtered.append(out.prospective)
    part.check(ids)
    return part


# ---------------------------------------------------------------------------
# assembly and statistics

@dataclass(frozen=True)
class _Unit:
    sample_id: str
    dataset_id: str
    tier: int
    records: tuple[Trajectory, ...]

    @property
    def label(self) -> str | None:
        return yes_no_label(self.records[0].final_answer)


def _dataset_seed(seed: int, dataset_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{dataset_id}".encode("utf-8")).digest()[:4], "big")


@dataclass
class Assembly:
    corpus: list[Trajectory]
    discard: list[dict]
    stats: dict


def assemble(partition: TierPartition, out_dir: str | os.PathLike | None = None, *, majority_rate: float = 1 / 3,
             seed: int = 0, label: Callable[[_Unit], str | None] | None = None) -> Assembly:
    """Concatenate direct, enhanced and paired agentic records into one corpus.

    Yes/no class balancing runs per dataset over samples, so both halves of an
    agentic pair are kept or dropped together. Writes ``corpus.jsonl``,
    ``discard.jsonl`` and ``stats.json`` when ``out_dir`` is given.
    """
    partition.check()
    units = [_Unit(r.sample_id, r.sample.dataset_id, r.tier, (r.trajectory,))
             for r in partition.direct + partition.enhanced]
    units += [_Unit(p.sample_id, p.prospective.sample.dataset_id, 3,
                    (p.prospective.trajectory, p.retrospective.trajectory)) for p in partition.agentic]
    label = label or (lambda u: u.label)
    kept: list[_Unit] = []
    dropped: list[_Unit] = []
    by_dataset: dict[str, list[_Unit]] = {}
    for u in units:
        by_dataset.setdefault(u.dataset_id, []).append(u)
    for ds in sorted(by_dataset):
        group = sorted(by_dataset[ds], key=lambda u: u.sample_id)
        keep = class_balance(group, label, majority_rate, _dataset_seed(seed, ds))
        keep_ids = {u.sample_id for u in keep}
        kept += keep
        dropped += [u for u in group if u.sample_id not in keep_ids]

    kept.sort(key=lambda u: (u.tier, u.sample_id))
    corpus = [t for u in kept for t in u.records]
    discard = [
        {"dataset_id": partition.datasets.get(sid, ""), "reason": reason, "sample_id": sid,
         "tier": None if reason == UNSOLVED else 3}
        for sid, reason in partition.discard.items()
    ]
    discard += [{"dataset_id": u.dataset_id, "reason": BALANCED_OUT, "sample_id": u.sample_id, "tier": u.tier}
                for u in dropped]
    discard.sort(key=lambda d: d["sample_id"])
    report = stats(corpus, discard)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "corpus.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for t in corpus:
                fh.write(serialize(t))
        with open(out / "discard.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for d in discard:
                fh.write(canonical_json(d) + "\n")
        (out / "stats.json").write_text(dumps_stats(report), encoding="utf-8")
    return Assembly(corpus, discard, report)


def _inc(d: dict, key, by: int = 1) -> None:
    d[key] = d.get(key, 0) + by


def stats(corpus: Sequence[Trajectory], discard: Sequence[Mapping[str, Any]] = ()) -> dict:
    """Counts by tier, mode, environment and dataset; see docs/stats.md."""
    by_tier, by_mode, by_env, depth_hist = {}, {}, {}, {}
    cells: dict[tuple[str, str, str], int] = {}
    sample_tier: dict[str, int] = {}
    for t in corpus:
        tier = str(t.tier)
        _inc(by_tier, tier)
        _inc(by_mode, t.mode)
        _inc(by_env, t.environment_id)
        _inc(depth_hist, str(depth(t)))
        _inc(cells, (str(t.meta.get("dataset_id", "")), tier, t.environment_id))
        sample_tier[t.sample_id] = t.tier
    disc_reason, disc_dataset = {}, {}
    for d in discard:
        _inc(disc_reason, d["reason"])
        _inc(disc_dataset, d.get("dataset_id", ""))
        if d.get("tier") is not None:
            sample_tier.setdefault(d["sample_id"], d["tier"])
    seen = set(sample_tier) | {d["sample_id"] for d in discard}
    total = len(seen)
    tier_samples = {str(k): 0 for k in (1, 2, 3)}
    for tier in sample_tier.values():
        _inc(tier_samples, str(tier))
    corpus_samples = {str(k): len({t.sample_id for t in corpus if t.tier == k}) for k in (1, 2, 3)}
    return {
        "records": len(corpus),
        "samples": {"total": total, "in_corpus": sum(corpus_samples.values()), "by_tier": corpus_samples},
        "by_tier": {k: by_tier.get(k, 0) for k in ("1", "2", "3")},
        "by_mode": {m: by_mode.get(m, 0) for m in ("direct", "enhanced", "prospective", "retrospective")},
        "by_environment": dict(sorted(by_env.items())),
        "cells": [{"dataset_id": ds, "environment_id": env, "records": n, "tier": int(tier)}
                  for (ds, tier, env), n in sorted(cells.items())],
        "depth_histogram": dict(sorted(depth_hist.items(), key=lambda kv: int(kv[0]))),
        "discard": {"total": len(discard), "by_reason": dict(sorted(disc_reason.items())),
                    "by_dataset": dict(sorted(disc_dataset.items()))},
        "tier_fractions": {k: (v / total if total else 0.0) for k, v in sorted(tier_samples.items())},
    }


def dumps_stats(report: Mapping[str, Any]) -> str:
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_samples(path: str | os.PathLike, dataset_id: str | None = None) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                if dataset_id is not None:
                    obj.setdefault("dataset_id", dataset_id)
                out.append(Sample.from_json(obj))
    return out
