"""OSCE-style patient vignettes for the clinical simulation environment."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from ..errors import InvariantViolation

NOT_AVAILABLE = "Not available for this patient."


def normalize_key(key: str) -> str:
    return " ".join(key.replace("_", " ").split()).casefold()


def _all_keys(obj: Any) -> Iterator[str]:
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield k
            yield from _all_keys(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _all_keys(v)


def render_finding(value: Any) -> str:
    """Observation text for a vignette entry: strings verbatim, structures as JSON."""
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False)


@dataclass(frozen=True)
class PatientVignette:
    objective: str
    patient_actor: dict
    physical_examination_findings: dict = field(default_factory=dict)
    test_results: dict = field(default_factory=dict)
    correct_diagnosis: str = ""

    def __post_init__(self):
        if not self.correct_diagnosis.strip():
            raise InvariantViolation("vignette needs a correct diagnosis")
        presented = {normalize_key(k) for k in _all_keys(self.patient_actor)}
        hidden = {normalize_key(k) for k in _all_keys(self.physical_examination_findings)}
        hidden |= {normalize_key(k) for k in _all_keys(self.test_results)}
        leaked = presented & hidden
        if leaked:
            raise InvariantViolation(f"presentation exposes requestable fields: {sorted(leaked)}")

    @classmethod
    def from_dict(cls, obj: dict) -> "PatientVignette":
        osce = obj.get("OSCE_Examination", obj)
        return cls(
            objective=osce.get("Objective_for_Doctor", ""),
            patient_actor=osce.get("Patient_Actor", {}),
            physical_examination_findings=osce.get("Physical_Examination_Findings", {}) or {},
            test_results=osce.get("Test_Results", {}) or {},
            correct_diagnosis=osce.get("Correct_Diagnosis", ""),
        )

    def to_dict(self) -> dict:
        return {
            "OSCE_Examination": {
                "Objective_for_Doctor": self.objective,
                "Patient_Actor": self.patient_actor,
                "Physical_Examination_Findings": self.physical_examination_findings,
                "Test_Results": self.test_results,
                "Correct_Diagnosis": self.correct_diagnosis,
            }
        }

    @property
    def available_exams(self) -> list[str]:
        return list(self.physical_examination_findings)

    @property
    def available_tests(self) -> list[str]:
        return list(self.test_results)

    def presentation(self) -> str:
        lines = []
        for key, value in self.patient_actor.items():
            label = key.replace("_", " ")
            if isinstance(value, dict):
                for sub, sub_value in value.items():
                    lines.append(f"{sub.replace('_', ' ')}: {_flat(sub_value)}")
            else:
                lines.append(f"{label}: {_flat(value)}")
        return "\n".join(lines)

    def lookup(self, kind: str, name: str) -> str:
        """Findings for an exam (``kind='exam'``) or test (``kind='test'``).

        Names match case-insensitively with spaces and underscores unified. A
        miss at the top level is retried one nested level down; a miss there
        returns :data:`NOT_AVAILABLE`.
        """
        section = self.physical_examination_findings if kind == "exam" else self.test_results
        wanted = normalize_key(name)
        for key, value in section.items():
            if normalize_key(key) == wanted:
                return render_finding(value)
        for value in section.values():
            if isinstance(value, dict):
                for key, sub in value.items():
                    if normalize_key(key) == wanted:
                        return render_finding(sub)
        return NOT_AVAILABLE


def _flat(value: Any) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, dict):
        return "; ".join(f"{k.replace('_', ' ')}: {_flat(v)}" for k, v in value.items())
    return str(value)


def load_vignette(path: str | os.PathLike) -> PatientVignette:
    with open(path, encoding="utf-8") as fh:
        return PatientVignette.from_dict(json.load(fh))


class VignetteStore:
    """Read-only view over ``<root>/<dataset>/<case>.json``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def get(self, dataset_id: str, case_id: str) -> PatientVignette | None:
        path = self.root / dataset_id / f"{case_id}.json"
        return load_vignette(path) if path.exists() else None
