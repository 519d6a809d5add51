"""JSON configuration for the ``forge`` command line.

Every constant the pipeline depends on has a default here, so an almost empty
config reproduces the reference behavior. Relative paths are resolved against
the directory holding the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .metrics import MATCHERS
from .policy import POLICY_ROLES
from .trajectory import ENVIRONMENTS, T_MAX

ENV_VAR = "FORGE_CONFIG"


@dataclass(frozen=True)
class DatasetConfig:
    id: str
    path: str
    matcher: str = "exact"
    category_field: str = "category"


@dataclass(frozen=True)
class PolicyConfig:
    backend: str = "scripted"
    endpoint: str | None = None
    fixture_path: str | None = None
    default: str | None = None
    seed: int = 0
    max_in_flight: int = 8
    timeout: float = 60.0


@dataclass(frozen=True)
class Tier3Config:
    retries: int = 8
    temperature_schedule: tuple[float, ...] = (0.2, 0.7)


@dataclass(frozen=True)
class ValidatorConfig:
    length_bound: int = 10_000
    depth_bounds: Mapping[str, int] = field(default_factory=lambda: {k: v for k, v in T_MAX.items() if k != "direct"})
    lexicon_path: str | None = None
    majority_rate: float = 1 / 3


@dataclass(frozen=True)
class EvalConfig:
    soft_match_threshold: float = 0.8
    ngram_n: int = 8
    synonyms_path: str | None = None


@dataclass(frozen=True)
class ForgeConfig:
    datasets: tuple[DatasetConfig, ...] = ()
    env_map: Mapping[str, str] = field(default_factory=dict)
    policies: Mapping[str, PolicyConfig] = field(default_factory=dict)
    tool_fixtures: str | None = None
    vignettes_dir: str | None = None
    images_dir: str | None = None
    tier3: Tier3Config = field(default_factory=Tier3Config)
    validator: ValidatorConfig = field(default_factory=ValidatorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    t_max_overrides: Mapping[str, int] = field(default_factory=dict)
    workers: int = 1
    global_seed: int = 0

    def dataset(self, dataset_id: str) -> DatasetConfig:
        for d in self.datasets:
            if d.id == dataset_id:
                return d
        raise ConfigError(f"unknown dataset {dataset_id!r}", "datasets")


def _expect(value: Any, types, key: str) -> Any:
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"expected {types}, got a boolean", key)
    if not isinstance(value, types):
        raise ConfigError(f"expected {getattr(types, '__name__', types)}, got {type(value).__name__}", key)
    return value


def _check_keys(obj: Any, cls, key: str) -> dict:
    _expect(obj, dict, key or "<root>")
    allowed = {f.name for f in fields(cls)}
    for k in obj:
        if k not in allowed:
            raise ConfigError("unknown key", f"{key}.{k}" if key else k)
    return obj


def _path(value: Any, base: Path, key: str) -> str | None:
    if value is None:
        return None
    _expect(value, str, key)
    p = Path(value)
    return str(p if p.is_absolute() else (base / p))


def _scalars(obj: dict, cls, key: str, *, numbers=(), ints=(), strings=()) -> dict:
    out = {}
    for k, v in obj.items():
        kp = f"{key}.{k}" if key else k
        if k in ints:
            out[k] = _expect(v, int, kp)
        elif k in numbers:
            out[k] = float(_expect(v, (int, float), kp))
        elif k in strings:
            out[k] = v if v is None else _expect(v, str, kp)
        else:
            out[k] = v
    return out


def parse_config(obj: Any, base: str | os.PathLike = ".") -> ForgeConfig:
    base = Path(base)
    top = _check_keys(obj, ForgeConfig, "")

    datasets = []
    for i, d in enumerate(_expect(top.get("datasets", []), list, "datasets")):
        kp = f"datasets[{i}]"
        d = _check_keys(d, DatasetConfig, kp)
        for req in ("id", "path"):
            if req not in d:
                raise ConfigError("missing required key", f"{kp}.{req}")
        d = _scalars(d, DatasetConfig, kp, strings=("id", "path", "matcher", "category_field"))
        if d.get("matcher", "exact") not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}", f"{kp}.matcher")
        d["path"] = _path(d["path"], base, f"{kp}.path")
        datasets.append(DatasetConfig(**d))
    ids = [d.id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ConfigError("dataset ids must be unique", "datasets")

    env_map = dict(_expect(top.get("env_map", {}), dict, "env_map"))
    for k, v in env_map.items():
        if v not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {v!r}", f"env_map.{k}")
    for d in ids:
        if d not in env_map:
            raise ConfigError("dataset has no environment", f"env_map.{d}")

    policies = {}
    for role, p in _expect(top.get("policies", {}), dict, "policies").items():
        kp = f"policies.{role}"
        if role not in POLICY_ROLES:
            raise ConfigError(f"unknown policy role; expected one of {POLICY_ROLES}", kp)
        p = _check_keys(p, PolicyConfig, kp)
        p = _scalars(p, PolicyConfig, kp, ints=("seed", "max_in_flight"), numbers=("timeout",),
                     strings=("backend", "endpoint", "default"))
        pc = PolicyConfig(**{**p, "fixture_path": _path(p.get("fixture_path"), base, f"{kp}.fixture_path")})
        if pc.backend not in ("scripted", "remote"):
            raise ConfigError("backend must be scripted or remote", f"{kp}.backend")
        if pc.backend == "remote" and not pc.endpoint:
            raise ConfigError("remote backend needs an endpoint", f"{kp}.endpoint")
        if pc.backend == "scripted" and pc.fixture_path is None and pc.default is None:
            raise ConfigError("scripted backend needs fixture_path or default", kp)
        policies[role] = pc

    t3 = _check_keys(top.get("tier3", {}), Tier3Config, "tier3")
    retries = _expect(t3.get("retries", 8), int, "tier3.retries")
    if retries < 1:
        raise ConfigError("retries must be at least 1", "tier3.retries")
    schedule = _expect(t3.get("temperature_schedule", [0.2, 0.7]), list, "tier3.temperature_schedule")
    if not schedule:
        raise ConfigError("schedule must not be empty", "tier3.temperature_schedule")
    schedule = tuple(float(_expect(x, (int, float), "tier3.temperature_schedule")) for x in schedule)

    v = _check_keys(top.get("validator", {}), ValidatorConfig, "validator")
    bounds = dict(ValidatorConfig().depth_bounds)
    for env, b in _expect(v.get("depth_bounds", {}), dict, "validator.depth_bounds").items():
        kp = f"validator.depth_bounds.{env}"
        if env not in bounds:
            raise ConfigError("unknown environment", kp)
        if _expect(b, int, kp) < 1:
            raise ConfigError("depth bound must be positive", kp)
        bounds[env] = b
    length_bound = _expect(v.get("length_bound", 10_000), int, "validator.length_bound")
    if length_bound < 1:
        raise ConfigError("length bound must be positive", "validator.length_bound")
    rate = float(_expect(v.get("majority_rate", 1 / 3), (int, float), "validator.majority_rate"))
    if not 0.0 < rate <= 1.0:
        raise ConfigError("majority_rate must be in (0, 1]", "validator.majority_rate")
    validator = ValidatorConfig(length_bound, bounds, _path(v.get("lexicon_path"), base, "validator.lexicon_path"),
                                rate)

    e = _check_keys(top.get("eval", {}), EvalConfig, "eval")
    threshold = float(_expect(e.get("soft_match_threshold", 0.8), (int, float), "eval.soft_match_threshold"))
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("threshold must be in (0, 1]", "eval.soft_match_threshold")
    n = _expect(e.get("ngram_n", 8), int, "eval.ngram_n")
    if n < 1:
        raise ConfigError("n must be at least 1", "eval.ngram_n")
    ev = EvalConfig(threshold, n, _path(e.get("synonyms_path"), base, "eval.synonyms_path"))

    overrides = {}
    for env, t in _expect(top.get("t_max_overrides", {}), dict, "t_max_overrides").items():
        kp = f"t_max_overrides.{env}"
        if env not in ENVIRONMENTS:
            raise ConfigError("unknown environment", kp)
        if _expect(t, int, kp) < 0:
            raise ConfigError("T_max must be nonnegative", kp)
        overrides[env] = t

    workers = _expect(top.get("workers", 1), int, "workers")
    if workers < 1:
        raise ConfigError("workers must be at least 1", "workers")

    return ForgeConfig(
        datasets=tuple(datasets),
        env_map=env_map,
        policies=policies,
        tool_fixtures=_path(top.get("tool_fixtures"), base, "tool_fixtures"),
        vignettes_dir=_path(top.get("vignettes_dir"), base, "vignettes_dir"),
        images_dir=_path(top.get("images_dir"), base, "images_dir"),
        tier3=Tier3Config(retries, schedule),
        validator=validator,
        eval=ev,
        t_max_overrides=overrides,
        workers=workers,
        global_seed=_expect(top.get("global_seed", 0), int, "global_seed"),
    )


def load_config(path: str | os.PathLike | None = None) -> ForgeConfig:
    """Load ``path`` (or ``$FORGE_CONFIG``), apply defaults and check invariants."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        raise ConfigError(f"no config given and {ENV_VAR} is not set")
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    return parse_config(obj, Path(path).resolve().parent)


def to_json(cfg: ForgeConfig) -> dict:
    obj = asdict(cfg)
    obj["datasets"] = [asdict(d) for d in cfg.datasets]
    obj["tier3"]["temperature_schedule"] = list(cfg.tier3.temperature_schedule)
    return obj


def emit_config(cfg: ForgeConfig) -> str:
    return json.dumps(to_json(cfg), sort_keys=True, indent=2) + "\n"
