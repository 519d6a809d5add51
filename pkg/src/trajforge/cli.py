"""``forge`` command line: generate, validate, stats, evaluate, route-analyze, decontaminate.

Exit codes: 0 success, 1 rejects found in strict mode, 2 usage or config errors.
Logs go to stderr as JSON lines; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Iterator, Sequence

from .config import ForgeConfig, PolicyConfig, load_config
from .environments import EnvironmentSuite, ToolFixtures, VignetteStore
from .errors import ConfigError, ForgeError, ParseError
from .metrics import (
    MATCHERS,
    SynonymTable,
    decontaminate,
    dumps_report,
    evaluate_run,
    get_matcher,
    render_table,
    routing_report,
)
from .pipeline import PipelineSettings, Policies, assemble, dumps_stats, load_samples, run_pipeline, stats
from .policy import PolicyHandle, load_fixtures
from .trajectory import T_MAX, deserialize
from .validator import ValidatorSettings, dumps_reports, lint, load_lexicon

log = logging.getLogger("trajforge")


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out, sort_keys=True, ensure_ascii=False)


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("trajforge")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root.addHandler(handler)
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def _event(msg: str, **fields) -> None:
    log.warning(msg, extra={"fields": fields})


def _jsonl(path: str) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# generate

def build_policy(role: str, pc: PolicyConfig) -> PolicyHandle:
    if pc.backend == "remote":
        return PolicyHandle.remote(role, pc.endpoint, seed=pc.seed, max_in_flight=pc.max_in_flight,
                                   timeout=pc.timeout)
    fixtures = load_fixtures(pc.fixture_path) if pc.fixture_path else None
    return PolicyHandle.scripted(role, fixtures, default=pc.default, seed=pc.seed)


def _synonyms(cfg: ForgeConfig) -> SynonymTable:
    return SynonymTable.from_file(cfg.eval.synonyms_path) if cfg.eval.synonyms_path else SynonymTable.default()


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.dataset:
        samples = load_samples(args.dataset)
    else:
        samples = [s for d in cfg.datasets for s in load_samples(d.path, d.id)]
    known = {d.id for d in cfg.datasets}
    unknown = sorted({s.dataset_id for s in samples} - known)
    if unknown:
        raise ConfigError(f"datasets {unknown} are not declared", "datasets")
    tiers = tuple(sorted({int(x) for x in args.tiers.split(",")}))
    if not set(tiers) <= {1, 2, 3}:
        raise ConfigError("tiers must be drawn from 1,2,3", "--tiers")

    roles = {"student": 1, "teacher": 2, "agent": 3, "recap": 3}
    handles = {}
    for role, tier in roles.items():
        if tier in tiers:
            if role not in cfg.policies:
                raise ConfigError(f"tier {tier} needs a {role} policy", f"policies.{role}")
            handles[role] = build_policy(role, cfg.policies[role])
    policies = Policies(handles.get("student"), handles.get("teacher"), handles.get("agent"), handles.get("recap"))

    syn = _synonyms(cfg)
    matchers = {d.id: get_matcher(d.matcher, syn, cfg.eval.soft_match_threshold) for d in cfg.datasets}
    out = Path(args.out)
    suite = EnvironmentSuite(
        fixtures=ToolFixtures.from_jsonl(cfg.tool_fixtures) if cfg.tool_fixtures else ToolFixtures(),
        vignettes=VignetteStore(cfg.vignettes_dir) if cfg.vignettes_dir else None,
        image_root=cfg.images_dir,
        image_out=out / "images",
        t_max_overrides=cfg.t_max_overrides,
    )
    seed = cfg.global_seed if args.seed is None else args.seed
    settings = PipelineSettings(
        retries=args.retries or cfg.tier3.retries,
        temperature_schedule=cfg.tier3.temperature_schedule,
        global_seed=seed,
        workers=args.workers or cfg.workers,
        tiers=tiers,
        validator=ValidatorSettings(cfg.validator.length_bound, dict(cfg.validator.depth_bounds),
                                    load_lexicon(cfg.validator.lexicon_path)),
        majority_rate=cfg.validator.majority_rate,
    )
    part = run_pipeline(samples, policies, cfg.env_map, suite, matchers, settings)
    result = assemble(part, out, majority_rate=settings.majority_rate, seed=seed)
    _event("generate finished", samples=len(samples), records=len(result.corpus), discarded=len(result.discard),
           out=str(out))
    return 0


# ---------------------------------------------------------------------------
# validate / stats

def _env_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ConfigError("environment config must be a JSON object", "--env-config")
    return obj


def cmd_validate(args) -> int:
    env_cfg = _env_config(args.env_config)
    bounds = {k: v for k, v in T_MAX.items() if k != "direct"}
    bounds.update(env_cfg.get("t_max_overrides", {}))
    bounds.update(env_cfg.get("depth_bounds", {}))
    settings = ValidatorSettings(args.length_bound, bounds, load_lexicon(args.lexicon))
    matcher = get_matcher(args.matcher, SynonymTable.from_file(args.synonyms) if args.synonyms else None)
    reports, unparseable = [], []
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                t = deserialize(line, strict=False)
            except ParseError as exc:
                unparseable.append({"line": lineno, "error": str(exc)})
                continue
            reports.append(lint(t, settings, matcher=matcher))
    reports.sort(key=lambda r: r.trajectory_id)
    text = dumps_reports(reports)
    if unparseable:
        obj = json.loads(text)
        obj["unparseable"] = unparseable
        text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    _write(args.report, text)
    rejects = sum(r.verdict == "reject" for r in reports) + len(unparseable)
    _event("validate finished", records=len(reports) + len(unparseable), rejects=rejects)
    return 1 if args.strict and rejects else 0


def cmd_stats(args) -> int:
    corpus = [deserialize(json.dumps(obj)) for obj in _jsonl(args.input)]
    discard = list(_jsonl(args.discard)) if args.discard else []
    _write(args.out, dumps_stats(stats(corpus, discard)))
    return 0


# ---------------------------------------------------------------------------
# evaluate / route-analyze / decontaminate

def cmd_evaluate(args) -> int:
    syn = SynonymTable.from_file(args.synonyms) if args.synonyms else None
    matcher = get_matcher(args.matcher, syn, args.threshold)
    report = evaluate_run(list(_jsonl(args.episodes)), matcher, args.by_category, backend=args.backend)
    if args.out:
        _write(args.out, dumps_report(report))
    sys.stdout.write(render_table(report) + "\n")
    return 0


def cmd_route(args) -> int:
    report = routing_report(list(_jsonl(args.records)))
    _write(args.out, dumps_report(report.to_json()))
    return 0


def _texts(path: str, question_only: bool) -> list[tuple[str, str]]:
    out = []
    for i, obj in enumerate(_jsonl(path)):
        if "conversations" in obj:
            meta = obj.get("metadata") or {}
            rid = f"{meta.get('sample_id', i)}:{meta.get('mode', '')}"
            turns = obj["conversations"]
            text = turns[0]["value"] if question_only and turns else "\n".join(t["value"] for t in turns)
        else:
            rid = str(obj.get("sample_id", obj.get("id", i)))
            text = obj.get("question", obj.get("text", ""))
        out.append((rid, text))
    return out


def cmd_decontaminate(args) -> int:
    report = decontaminate(_texts(args.train, False), _texts(args.test, True), args.n)
    _write(args.out, dumps_report({"n": args.n, "overlaps": [o.to_json() for o in report]}))
    _event("decontaminate finished", contaminated=len(report))
    return 1 if args.strict and report else 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description="Agentic trajectory generation and auditing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the tiered pipeline and write a corpus")
    g.add_argument("--config", help="config JSON (default: $FORGE_CONFIG)")
    g.add_argument("--dataset", help="samples JSONL; defaults to the datasets listed in the config")
    g.add_argument("--out", required=True)
    g.add_argument("--tiers", default="1,2,3")
    g.add_argument("--retries", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="lint a corpus")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--env-config")
    v.add_argument("--lexicon")
    v.add_argument("--report")
    v.add_argument("--matcher", choices=MATCHERS, default="exact")
    v.add_argument("--synonyms")
    v.add_argument("--length-bound", type=int, default=10_000)
    v.add_argument("--strict", action="store_true")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", help="corpus statistics")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--discard")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    e = sub.add_parser("evaluate", help="accuracy report for episode results")
    e.add_argument("--episodes", required=True)
    e.add_argument("--matcher", choices=MATCHERS, default="soft")
    e.add_argument("--synonyms")
    e.add_argument("--threshold", type=float, default=0.8)
    e.add_argument("--by-category", default="category")
    e.add_argument("--backend", default="unknown")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("route-analyze", help="strategy comparison with an oracle router")
    r.add_argument("--records", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_route)

    d = sub.add_parser("decontaminate", help="find train texts sharing n-grams with test questions")
    d.add_argument("--train", required=True)
    d.add_argument("--test", required=True)
    d.add_argument("-n", type=int, default=8)
    d.add_argument("--out")
    d.add_argument("--strict", action="store_true")
    d.set_defaults(func=cmd_decontaminate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        _event("config error", error=str(exc), key_path=exc.key_path)
        return 2
    except (FileNotFoundError, json.JSONDecodeError, ParseError) as exc:
        _event("input error", error=str(exc))
        return 2
    except ForgeError as exc:
        _event("run failed", error=str(exc))
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
