"""Agent environments and the suite that wires them to tools, vignettes and images."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

from ..policy import PolicyHandle
from .collaboration import collaborate, majority_vote, run_collaboration
from .engine import (
    EpisodeResult,
    EpisodeState,
    Reply,
    Sample,
    Terminal,
    extract_answer,
    parse_policy_output,
    reset,
    run_episode,
    step,
)
from .executors import ToolFixtures, default_executors
from .images import ImageStore
from .simulation import NOT_AVAILABLE, PatientVignette, VignetteStore, load_vignette
from .specs import ENVIRONMENT_SPECS, EnvironmentSpec, get_spec

__all__ = [
    "ENVIRONMENT_SPECS", "NOT_AVAILABLE", "EnvironmentSpec", "EnvironmentSuite", "EpisodeResult", "EpisodeState",
    "ImageStore", "PatientVignette", "Reply", "Sample", "Terminal", "ToolFixtures", "VignetteStore",
    "collaborate", "extract_answer", "get_spec", "load_vignette", "majority_vote", "parse_policy_output",
    "reset", "run_collaboration", "run_episode", "step",
]


@dataclass
class EnvironmentSuite:
    """Everything an episode needs besides the policy. Read-only once built."""

    fixtures: ToolFixtures = field(default_factory=ToolFixtures)
    vignettes: VignetteStore | None = None
    image_root: str | os.PathLike | None = None
    image_out: str | os.PathLike | None = None
    t_max_overrides: Mapping[str, int] = field(default_factory=dict)

    def spec(self, environment_id: str, t_cap: int | None = None) -> EnvironmentSpec:
        spec = get_spec(environment_id, self.t_max_overrides.get(environment_id))
        if t_cap is not None:
            spec = spec.with_t_max(min(spec.t_max, t_cap))
        return spec

    def start(self, environment_id: str, sample: Sample, t_cap: int | None = None) -> EpisodeState:
        vignette = None
        if environment_id == "simulation" and self.vignettes is not None:
            vignette = self.vignettes.get(sample.dataset_id, sample.sample_id)
        return reset(
            self.spec(environment_id, t_cap), sample, vignette,
            executors=default_executors(environment_id, self.fixtures),
            images=ImageStore(self.image_root, self.image_out),
        )

    def run(self, environment_id: str, sample: Sample, policy: PolicyHandle, *, seed: int = 0,
            temperature: float = 0.0, t_cap: int | None = None) -> EpisodeResult:
        return run_episode(self.start(environment_id, sample, t_cap), policy, seed=seed, temperature=temperature)
