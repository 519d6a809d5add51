"""Answer matching, decontamination, run evaluation and routing analysis."""

from __future__ import annotations

import json
import math
import os
import string
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import IncompleteRecord, InvariantViolation

STOPWORDS = frozenset(
    "a an the of in on at to and or with is are was were be been for by from as this that there it its".split()
)
_PUNCT_ASCII = set(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _PUNCT_ASCII or unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """NFC, lowercase, punctuation to spaces, collapsed whitespace."""
    text = unicodedata.normalize("NFC", text).lower()
    return " ".join("".join(" " if _is_punct(c) else c for c in text).split())


def content_tokens(tokens: Sequence[str]) -> list[str]:
    """Drop stopwords, unless that would leave nothing."""
    kept = [t for t in tokens if t not in STOPWORDS]
    return kept or list(tokens)


# ---------------------------------------------------------------------------
# synonyms

@dataclass(frozen=True)
class SynonymTable:
    """Groups of equivalent terms. Each group maps to a single canonical token."""

    groups: tuple[tuple[str, ...], ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)
    _longest: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[tuple[str, ...], str] = {}
        for gi, group in enumerate(self.groups):
            # "_" never survives normalize, so canonical tokens cannot collide with text
            canon = "_".join(normalize(group[0]).split()) + f"_{gi}"
            for term in group:
                key = tuple(normalize(term).split())
                if not key:
                    continue
                if key in index and index[key] != canon:
                    raise InvariantViolation(f"synonym term {' '.join(key)!r} appears in two groups")
                index[key] = canon
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_longest", max((len(k) for k in index), default=0))

    @classmethod
    def parse(cls, text: str) -> "SynonymTable":
        groups = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                terms = tuple(t.strip() for t in line.split("|") if t.strip())
                if terms:
                    groups.append(terms)
        return cls(tuple(groups))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SynonymTable":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @classmethod
    def default(cls) -> "SynonymTable":
        return cls.parse(resources.files("trajforge.data").joinpath("synonyms.txt").read_text(encoding="utf-8"))

    def canonical_tokens(self, normalized: str) -> list[str]:
        """Replace synonym phrases by their group token, longest match first."""
        toks = normalized.split()
        out, i = [], 0
        while i < len(toks):
            for size in range(min(self._longest, len(toks) - i), 0, -1):
                canon = self._index.get(tuple(toks[i:i + size]))
                if canon is not None:
                    out.append(canon)
                    i += size
                    break
            else:
                out.append(toks[i])
                i += 1
        return out


EMPTY_TABLE = SynonymTable()


# ---------------------------------------------------------------------------
# matchers

def exact_match(prediction: str, gold: str) -> bool:
    a, b = normalize(prediction), normalize(gold)
    return bool(a) and a == b


def soft_match(prediction: str, gold: str, syn: SynonymTable | None = None, threshold: float = 0.8) -> bool:
    """Equality, token-set containment, or bidirectional overlap >= ``threshold``."""
    syn = syn or EMPTY_TABLE
    a = syn.canonical_tokens(normalize(prediction))
    b = syn.canonical_tokens(normalize(gold))
    if not a or not b:
        return False
    if a == b:
        return True
    sa, sb = set(content_tokens(a)), set(content_tokens(b))
    if sa <= sb or sb <= sa:
        return True
    inter = len(sa & sb)
    return inter / len(sa) >= threshold and inter / len(sb) >= threshold


def diagnosis_match(prediction: str, gold: str, threshold: float = 0.8) -> bool:
    """Exact, then word-boundary containment either way, then overlap over the larger set."""
    a, b = normalize(prediction), normalize(gold)
    if not a or not b:
        return False
    if a == b:
        return True
    if f" {a} " in f" {b} " or f" {b} " in f" {a} ":
        return True
    sa, sb = set(content_tokens(a.split())), set(content_tokens(b.split()))
    return len(sa & sb) / max(len(sa), len(sb)) >= threshold


Matcher = Callable[[str, str], bool]
MATCHERS = ("exact", "soft", "diagnosis")


def get_matcher(name: str, syn: SynonymTable | None = None, threshold: float = 0.8) -> Matcher:
    if name == "exact":
        return exact_match
    if name == "soft":
        table = syn if syn is not None else SynonymTable.default()
        return lambda p, g: soft_match(p, g, table, threshold)
    if name == "diagnosis":
        return lambda p, g: diagnosis_match(p, g, threshold)
    raise ValueError(f"unknown matcher {name!r}; expected one of {MATCHERS}")


# ---------------------------------------------------------------------------
# decontamination

def ngrams(text: str, n: int) -> set[tuple[str, ...]]:
    toks = normalize(text).split()
    return {tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)}


@dataclass(frozen=True)
class Overlap:
    train_id: str
    test_ids: tuple[str, ...]
    ngrams: tuple[str, ...]

    def to_json(self) -> dict:
        return {"train_id": self.train_id, "test_ids": list(self.test_ids), "ngrams": list(self.ngrams)}


def _items(texts: Mapping[str, str] | Iterable[tuple[str, str]]) -> list[tuple[str, str]]:
    return list(texts.items()) if isinstance(texts, Mapping) else list(texts)


def decontaminate(train_texts, test_texts, n: int = 8) -> list[Overlap]:
    """Train texts sharing at least one word n-gram with any test text.

    Both inputs are ``{id: text}`` maps or ``(id, text)`` pairs. The report is
    sorted by train id; each entry lists the matching test ids and n-grams.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    index: dict[tuple[str, ...], set[str]] = {}
    for tid, text in _items(test_texts):
        for g in ngrams(text, n):
            index.setdefault(g, set()).add(tid)
    report = []
    for rid, text in _items(train_texts):
        hits = {g for g in ngrams(text, n) if g in index}
        if hits:
            tests = sorted(set().union(*(index[g] for g in hits)))
            report.append(Overlap(rid, tuple(tests), tuple(sorted(" ".join(g) for g in hits))))
    report.sort(key=lambda o: o.train_id)
    return report


# ---------------------------------------------------------------------------
# routing

STRATEGIES = ("always_direct", "always_agentic", "oracle", "learned")


@dataclass(frozen=True)
class Cost:
    actions: float
    tokens: float
    latency_ms: float

    def __post_init__(self):
        if min(self.actions, self.tokens, self.latency_ms) < 0:
            raise InvariantViolation("costs must be nonnegative")


@dataclass(frozen=True)
class RoutingRecord:
    sample_id: str
    correct_direct: bool
    correct_agentic: bool
    cost_direct: Cost
    cost_agentic: Cost
    learned_choice: str

    def __post_init__(self):
        if self.learned_choice not in ("direct", "agentic"):
            raise InvariantViolation(f"learned_choice must be direct or agentic, got {self.learned_choice!r}")

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RoutingRecord":
        try:
            cd, ca = obj["cost_direct"], obj["cost_agentic"]
            return cls(
                sample_id=str(obj["sample_id"]),
                correct_direct=bool(obj["correct_direct"]),
                correct_agentic=bool(obj["correct_agentic"]),
                # a direct answer is one emission
                cost_direct=Cost(cd.get("actions", 1), cd["tokens"], cd["latency_ms"]),
                cost_agentic=Cost(ca["actions"], ca["tokens"], ca["latency_ms"]),
                learned_choice=obj["learned_choice"],
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise IncompleteRecord(f"routing record {obj.get('sample_id', '?')} is missing {exc}") from None

    def correct(self, choice: str) -> bool:
        return self.correct_direct if choice == "direct" else self.correct_agentic

    def cost(self, choice: str) -> Cost:
        return self.cost_direct if choice == "direct" else self.cost_agentic


def oracle_choice(r: RoutingRecord) -> str:
    """Pick a correct strategy if exactly one is; otherwise the one with fewer actions (direct on ties)."""
    if r.correct_direct != r.correct_agentic:
        return "direct" if r.correct_direct else "agentic"
    return "agentic" if r.cost_agentic.actions < r.cost_direct.actions else "direct"


@dataclass(frozen=True)
class StrategyStats:
    accuracy: float
    mean_actions: float
    mean_tokens: float
    mean_latency_ms: float
    direct_fraction: float
    agentic_fraction: float

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy, "mean_actions": self.mean_actions, "mean_tokens": self.mean_tokens,
            "mean_latency_ms": self.mean_latency_ms, "direct_fraction": self.direct_fraction,
            "agentic_fraction": self.agentic_fraction,
        }


@dataclass(frozen=True)
class StrategyReport:
    n: int
    strategies: Mapping[str, StrategyStats]

    def to_json(self) -> dict:
        return {"n": self.n, "strategies": {k: self.strategies[k].to_json() for k in STRATEGIES}}


def _aggregate(records: Sequence[RoutingRecord], choices: Sequence[str]) -> StrategyStats:
    n = len(records)
    if n == 0:
        return StrategyStats(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    correct = sum(r.correct(c) for r, c in zip(records, choices))
    costs = [r.cost(c) for r, c in zip(records, choices)]
    direct = sum(c == "direct" for c in choices)
    return StrategyStats(
        correct / n,
        sum(c.actions for c in costs) / n,
        sum(c.tokens for c in costs) / n,
        sum(c.latency_ms for c in costs) / n,
        direct / n,
        (n - direct) / n,
    )


def routing_report(records: Sequence[RoutingRecord | Mapping[str, Any]]) -> StrategyReport:
    recs = [r if isinstance(r, RoutingRecord) else RoutingRecord.from_json(r) for r in records]
    recs.sort(key=lambda r: r.sample_id)
    choices = {
        "always_direct": ["direct"] * len(recs),
        "always_agentic": ["agentic"] * len(recs),
        "oracle": [oracle_choice(r) for r in recs],
        "learned": [r.learned_choice for r in recs],
    }
    return StrategyReport(len(recs), {k: _aggregate(recs, v) for k, v in choices.items()})


# ---------------------------------------------------------------------------
# run evaluation

LATENCY_BUCKETS_MS = (0.0, 1000.0, 2000.0, 5000.0, 10000.0, 30000.0, 60000.0, math.inf)


@dataclass(frozen=True)
class EpisodeRecord:
    sample_id: str
    prediction: str
    gold: str
    category: str | None = None
    depth: int = 0
    latency_ms: float = 0.0
    tokens: int = 0

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], category_field: str = "category") -> "EpisodeRecord":
        try:
            return cls(
                sample_id=str(obj["sample_id"]),
                prediction=str(obj.get("prediction") or ""),
                gold=str(obj["gold"]),
                category=obj.get(category_field),
                depth=int(obj.get("depth", 0)),
                latency_ms=float(obj.get("latency_ms", 0.0)),
                tokens=int(obj.get("tokens", 0)),
            )
        except KeyError as exc:
            raise IncompleteRecord(f"episode record is missing {exc}") from None


def _bucket_label(lo: float, hi: float) -> str:
    hi_s = "inf" if math.isinf(hi) else f"{hi / 1000:g}s"
    return f"[{lo / 1000:g}s,{hi_s})"


def latency_histogram(latencies: Iterable[float]) -> dict[str, int]:
    edges = LATENCY_BUCKETS_MS
    hist = {_bucket_label(edges[i], edges[i + 1]): 0 for i in range(len(edges) - 1)}
    for x in latencies:
        for i in range(len(edges) - 1):
            if edges[i] <= x < edges[i + 1]:
                hist[_bucket_label(edges[i], edges[i + 1])] += 1
                break
    return hist


def _pct(correct: int, n: int) -> float:
    return round(100.0 * correct / n, 4) if n else 0.0


def evaluate_run(episodes: Sequence[EpisodeRecord | Mapping[str, Any]], matcher: Matcher,
                 category_field: str = "category", backend: str = "unknown") -> dict:
    eps = [e if isinstance(e, EpisodeRecord) else EpisodeRecord.from_json(e, category_field) for e in episodes]
    eps.sort(key=lambda e: e.sample_id)
    hits = [bool(e.prediction) and matcher(e.prediction, e.gold) for e in eps]
    cats: dict[str, list[bool]] = {}
    for e, ok in zip(eps, hits):
        if e.category is not None:
            cats.setdefault(str(e.category), []).append(ok)
    depth_hist: dict[str, int] = {}
    for e in eps:
        depth_hist[str(e.depth)] = depth_hist.get(str(e.depth), 0) + 1
    n = len(eps)
    return {
        "n": n,
        "correct": sum(hits),
        "accuracy": _pct(sum(hits), n),
        "per_category": {c: {"n": len(v), "correct": sum(v), "accuracy": _pct(sum(v), len(v))}
                         for c, v in sorted(cats.items())},
        "mean_depth": sum(e.depth for e in eps) / n if n else 0.0,
        "depth_histogram": dict(sorted(depth_hist.items(), key=lambda kv: int(kv[0]))),
        "mean_latency_ms": sum(e.latency_ms for e in eps) / n if n else 0.0,
        "latency_histogram": latency_histogram(e.latency_ms for e in eps),
        "mean_tokens": sum(e.tokens for e in eps) / n if n else 0.0,
        "backend": backend,
    }


def render_table(report: Mapping[str, Any]) -> str:
    lines = [f"{'category':<32}{'n':>6}{'acc %':>10}"]
    for cat, row in report["per_category"].items():
        lines.append(f"{cat:<32}{row['n']:>6}{row['accuracy']:>10.1f}")
    lines.append(f"{'overall':<32}{report['n']:>6}{report['accuracy']:>10.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# depth-constrained execution

@dataclass
class DepthRunReport:
    t_cap: int | None
    results: list
    correct: list[bool]

    @property
    def accuracy(self) -> float:
        return sum(self.correct) / len(self.correct) if self.correct else 0.0

    @property
    def mean_depth(self) -> float:
        return sum(r.depth for r in self.results) / len(self.results) if self.results else 0.0

    @property
    def mean_tokens(self) -> float:
        return sum(r.tokens for r in self.results) / len(self.results) if self.results else 0.0

    @property
    def forced(self) -> int:
        return sum(r.forced for r in self.results)


def depth_constrained_run(policy, suite, environment_id: str, samples: Sequence, t_cap: int | None,
                          matcher: Matcher = exact_match, seed: int = 0) -> DepthRunReport:
    """Run every sample with the environment's cap lowered to ``t_cap`` (None keeps the default)."""
    results, correct = [], []
    for s in samples:
        r = suite.run(environment_id, s, policy, seed=seed, t_cap=t_cap)
        results.append(r)
        correct.append(r.final_answer is not None and r.failure is None and matcher(r.final_answer, s.gold_answer))
    return DepthRunReport(t_cap, results, correct)


def dumps_report(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
