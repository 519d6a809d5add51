"""A small synthetic world with rule-based policies whose correctness is known per sample.

Used for smoke runs and end-to-end checks of the pipeline: every sample has a
plan that fixes whether the student, the teacher and the agent answer it
correctly, so expected tier assignments can be derived independently.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .environments import EnvironmentSuite, Sample, ToolFixtures, VignetteStore
from .environments.engine import FORCED_PROMPT
from .environments.simulation import PatientVignette
from .pipeline import PipelineSettings, Policies, attempt_seed, run_pipeline
from .policy import FixtureRecorder, PolicyHandle, PolicyRequest
from .trajectory import canonical_json

DATASET_ENVIRONMENTS = {
    "cxr_tools": "tool_calling",
    "path_vqa": "interleaved",
    "panel_qa": "collaboration",
    "osce_sim": "simulation",
}
DATASET_MATCHERS = {"cxr_tools": "soft", "path_vqa": "soft", "panel_qa": "soft", "osce_sim": "diagnosis"}

FINDINGS = ("pleural effusion", "cardiomegaly", "a left apical pneumothorax", "hilar enlargement",
            "a nasogastric tube", "a displaced rib fracture", "lower lobe consolidation", "a PICC line")

# (diagnosis, wrong guess, exam name, exam finding, test name, test result)
CASES = (
    ("Pulmonary Tuberculosis", "Community Acquired Pneumonia", "Respiratory_Examination",
     "Dullness at the right apex with bronchial breath sounds.", "Sputum_AFB", "Acid-fast bacilli seen on smear."),
    ("Iron Deficiency Anemia", "Vitamin B12 Deficiency", "General_Appearance",
     "Pale conjunctivae and spoon-shaped nails.", "Ferritin", "Ferritin 6 ng/mL (low)."),
    ("Acute Appendicitis", "Renal Colic", "Abdominal_Examination",
     "Tenderness at McBurney's point with guarding.", "White_Cell_Count", "WBC 14.2 x10^9/L."),
    ("Hypothyroidism", "Major Depressive Disorder", "Neck_Examination",
     "Diffusely enlarged, non-tender thyroid.", "TSH", "TSH 18.5 mIU/L (high)."),
    ("Type 2 Diabetes Mellitus", "Diabetes Insipidus", "Foot_Examination",
     "Reduced monofilament sensation in both feet.", "HbA1c", "HbA1c 8.9%."),
)

_CASE_RE = re.compile(r"Case (\S+?):")
_STEP_RE = re.compile(r"^Step (\d+): (\S+)(?: (.*))?$")


@dataclass(frozen=True)
class Plan:
    student: bool
    teacher: bool
    agent_attempt: int | None  # attempt index that succeeds; None = never
    recap_ok: bool = True


def _gray(seed: int, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 255, size=(size, size), dtype=np.uint8)
    return np.stack([base] * 3, axis=-1)


@dataclass
class SyntheticWorld:
    samples: list[Sample]
    plans: dict[str, Plan]
    wrong: dict[str, str]
    global_seed: int = 0
    vignettes: dict[str, PatientVignette] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {s.sample_id: s for s in self.samples}

    # -- helpers ---------------------------------------------------------
    def sample_of(self, text: str) -> Sample:
        m = _CASE_RE.search(text)
        if not m or m.group(1) not in self._by_id:
            raise KeyError(f"no synthetic case in request: {text[:60]!r}")
        return self._by_id[m.group(1)]

    def environment(self, s: Sample) -> str:
        return DATASET_ENVIRONMENTS[s.dataset_id]

    def succeeds(self, s: Sample, seed: int) -> bool:
        k = self.plans[s.sample_id].agent_attempt
        return k is not None and seed == attempt_seed(self.global_seed, s.sample_id, k)

    # -- responders ------------------------------------------------------
    def _direct(self, req: PolicyRequest, correct: bool) -> str:
        s = self.sample_of(req.messages[0].content)
        ans = s.gold_answer if correct else self.wrong[s.sample_id]
        return f"<think>I answer from the question alone.</think>\n[FINAL] {ans}"

    def student(self, req: PolicyRequest) -> str:
        return self._direct(req, self.plans[self.sample_of(req.messages[0].content).sample_id].student)

    def teacher(self, req: PolicyRequest) -> str:
        return self._direct(req, self.plans[self.sample_of(req.messages[0].content).sample_id].teacher)

    def agent(self, req: PolicyRequest) -> str:
        s = self.sample_of(req.messages[0].content)
        env = self.environment(s)
        answer = s.gold_answer if self.succeeds(s, req.decoding.seed) else self.wrong[s.sample_id]
        if env == "collaboration":
            return self._panel(req, answer)
        n_obs = sum(m.role == "observation" for m in req.messages)
        forced = req.messages[-1].role == "human" and req.messages[-1].content.startswith(FORCED_PROMPT)
        if env == "tool_calling":
            if n_obs == 0 and not forced:
                return _call("The image needs a classifier read before answering.", "ChestXRayClassifier",
                             {"image_path": s.images[0]})
            return f"<think>The classifier output settles the question.</think>\n[FINAL] {answer}"
        if env == "interleaved":
            if n_obs == 0 and not forced:
                return _call("A closer view of the central region will help.", "ZoomInSubfigure",
                             {"image": "img_original", "param": [200, 200, 800, 800]})
            return _call("The zoomed view is enough to answer.", "Terminate", {"ans": answer})
        if env == "simulation":
            v = self.vignettes[s.sample_id]
            if n_obs == 0 and not forced:
                return _call("The presentation calls for a focused examination first.", "RequestPhysicalExam",
                             {"exam": v.available_exams[0]})
            if n_obs == 1 and not forced:
                return _call("A targeted test can confirm the working diagnosis.", "RequestTest",
                             {"test": v.available_tests[0]})
            return _call("The examination and test results point to one diagnosis.", "Terminate",
                         {"diagnosis": answer})
        raise ValueError(env)

    def _panel(self, req: PolicyRequest, answer: str) -> str:
        system = req.system_prompt
        if system.startswith("Rate how hard"):
            return "2) intermediate"
        if system.startswith("Recruit"):
            return "1. Radiologist - reads the imaging\n2. Pulmonologist - lung disease\n3. Intensivist - acute care"
        if system.startswith("Summarize"):
            return "The three experts reviewed the case and reported their conclusions."
        return f"My reading of the case is complete.\nAnswer: {answer}"

    def recap(self, req: PolicyRequest) -> str:
        content = req.messages[0].content
        s = self.sample_of(content)
        entries = []
        for line in content.splitlines():
            m = _STEP_RE.match(line)
            if not m:
                continue
            step, tool = int(m.group(1)), m.group(2)
            if tool == "Terminate":
                entries.append({"step": step, "tool": tool, "why": "The gathered evidence answers the question"})
            else:
                entries.append({
                    "step": step, "tool": tool, "why": f"The {tool} output was needed to decide",
                    "got": "a result consistent with the final answer", "update": "increase",
                    "evidence": "the returned observation", "inference": "The result supports the final answer",
                    "confidence": 80 if self.plans[s.sample_id].recap_ok else 140,
                })
        return json.dumps({"recap": entries})

    def policies(self, record: bool = False) -> tuple[Policies, dict[str, FixtureRecorder]]:
        responders = {"student": self.student, "teacher": self.teacher, "agent": self.agent, "recap": self.recap}
        recorders = {k: FixtureRecorder(v) for k, v in responders.items()} if record else {}
        h = {k: PolicyHandle.scripted(k, responder=recorders.get(k, v)) for k, v in responders.items()}
        return Policies(h["student"], h["teacher"], h["agent"], h["recap"]), recorders

    # -- environment wiring ---------------------------------------------
    def tool_fixtures(self) -> ToolFixtures:
        fx = ToolFixtures()
        fx.add("*", "ChestXRayClassifier", "*",
               "Classifier probabilities: Atelectasis 0.21, Cardiomegaly 0.34, Effusion 0.47, Pneumothorax 0.05.")
        return fx

    def write(self, root: str | Path) -> Path:
        """Write samples, images, vignettes and tool fixtures under ``root``."""
        root = Path(root)
        from PIL import Image

        for ds in sorted({s.dataset_id for s in self.samples}):
            (root / "datasets").mkdir(parents=True, exist_ok=True)
            with open(root / "datasets" / f"{ds}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for s in self.samples:
                    if s.dataset_id == ds:
                        fh.write(canonical_json(s.to_json()) + "\n")
        for i, s in enumerate(self.samples):
            for ref in s.images:
                path = root / "images" / ref
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(_gray(i)).save(path)
            if s.sample_id in self.vignettes:
                path = root / "vignettes" / s.dataset_id / f"{s.sample_id}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(self.vignettes[s.sample_id].to_dict(), indent=2) + "\n", encoding="utf-8")
        self.tool_fixtures().dump(root / "tools.jsonl")
        return root

    def suite(self, root: str | Path | None = None) -> EnvironmentSuite:
        return EnvironmentSuite(
            fixtures=self.tool_fixtures(),
            vignettes=VignetteStore(Path(root) / "vignettes") if root else _MemoryVignettes(self.vignettes),
            image_root=Path(root) / "images" if root else None,
        )


class _MemoryVignettes(VignetteStore):
    def __init__(self, vignettes: Mapping[str, PatientVignette]):
        self._v = dict(vignettes)

    def get(self, dataset_id: str, case_id: str) -> PatientVignette | None:
        return self._v.get(case_id)


def _call(think: str, name: str, arguments: dict) -> str:
    return f"<think>{think}</think>\n" + json.dumps({"name": name, "arguments": arguments})


def _vignette(case: tuple, age: int) -> PatientVignette:
    diagnosis, _, exam, exam_finding, test, test_result = case
    return PatientVignette(
        objective="Establish the most likely diagnosis.",
        patient_actor={
            "Demographics": f"{age}-year-old adult",
            "History": "Several weeks of gradually worsening symptoms.",
            "Symptoms": {"Primary_Symptom": "fatigue", "Secondary_Symptoms": ["poor appetite", "weight change"]},
        },
        physical_examination_findings={"Vital_Signs": "Temperature 37.1 C, HR 84, BP 124/78.", exam: exam_finding},
        test_results={test: test_result, "Chest_X_Ray": "No acute cardiopulmonary process."},
        correct_diagnosis=diagnosis,
    )


def make_world(n: int = 200, datasets: Sequence[str] = ("cxr_tools",), *, student_rate: float = 0.6,
               teacher_rate: float = 0.5, agent_rate: float = 0.8, recap_failures: int = 0, retries: int = 8,
               global_seed: int = 0, seed: int = 0) -> SyntheticWorld:
    """Samples with exact, seeded correctness plans.

    ``round(n * student_rate)`` samples are solved by the student, that
    fraction of the rest by the teacher, and so on. The agent solves its share
    on a uniformly drawn attempt in ``1..retries``; ``recap_failures`` of those
    get a recap that violates the schema.
    """
    rng = random.Random(seed)
    samples, wrong, vignettes = [], {}, {}
    for i in range(n):
        ds = datasets[i % len(datasets)]
        sid = f"{ds}-{i:04d}"
        env = DATASET_ENVIRONMENTS[ds]
        if env == "simulation":
            case = CASES[i % len(CASES)]
            vignettes[sid] = _vignette(case, 30 + i % 50)
            q = f"Case {sid}: what is the most likely diagnosis?"
            gold, wrong[sid] = case[0], case[1]
            images = ()
        else:
            finding = FINDINGS[i % len(FINDINGS)]
            q = f"Case {sid}: is there {finding} on this study?"
            gold = rng.choice(("yes", "no"))
            wrong[sid] = "no" if gold == "yes" else "yes"
            images = (f"{sid}.png",) if env in ("tool_calling", "interleaved") else ()
        samples.append(Sample(sid, ds, q, gold, images, category=finding if env != "simulation" else "diagnosis"))

    ids = [s.sample_id for s in samples]
    order = ids[:]
    rng.shuffle(order)
    n1 = round(n * student_rate)
    s1, rest = set(order[:n1]), order[n1:]
    n2 = round(len(rest) * teacher_rate)
    s2, rest = set(rest[:n2]), rest[n2:]
    n3 = round(len(rest) * agent_rate)
    s3 = rest[:n3]
    bad_recap = set(s3[:recap_failures])
    attempts = {sid: rng.randint(1, retries) for sid in s3}
    plans = {
        sid: Plan(sid in s1, sid in s2, attempts.get(sid), sid not in bad_recap)
        for sid in ids
    }
    return SyntheticWorld(samples, plans, wrong, global_seed, vignettes)


def expected_partition(world: SyntheticWorld, retries: int = 8) -> dict[str, str]:
    """Where each sample should land, derived from the plans alone."""
    out = {}
    for s in world.samples:
        p = world.plans[s.sample_id]
        if p.student:
            out[s.sample_id] = "direct"
        elif p.teacher:
            out[s.sample_id] = "enhanced"
        elif p.agent_attempt is not None and p.agent_attempt <= retries:
            out[s.sample_id] = "agentic" if p.recap_ok else "discard:recap_filtered"
        else:
            out[s.sample_id] = "discard:exhausted_retries"
    return out


def write_demo(root: str | Path, world: SyntheticWorld, *, workers: int = 1) -> Path:
    """Write a complete, replayable ``forge generate`` setup under ``root``.

    Policies are recorded to fingerprint fixtures so the CLI replays them
    without any Python responders.
    """
    root = Path(world.write(root))
    policies, recorders = world.policies(record=True)
    run_pipeline(world.samples, policies, DATASET_ENVIRONMENTS, world.suite(root),
                 settings=PipelineSettings(global_seed=world.global_seed, workers=workers),
                 matchers=_matchers())
    (root / "policies").mkdir(exist_ok=True)
    for role, rec in recorders.items():
        rec.dump(root / "policies" / f"{role}.jsonl")
    datasets = sorted({s.dataset_id for s in world.samples})
    config = {
        "datasets": [{"id": d, "path": f"datasets/{d}.jsonl", "matcher": DATASET_MATCHERS[d]} for d in datasets],
        "env_map": {d: DATASET_ENVIRONMENTS[d] for d in datasets},
        "policies": {r: {"backend": "scripted", "fixture_path": f"policies/{r}.jsonl"} for r in recorders},
        "tool_fixtures": "tools.jsonl",
        "vignettes_dir": "vignettes",
        "images_dir": "images",
        "global_seed": world.global_seed,
        "workers": workers,
    }
    (root / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def _matchers():
    from .metrics import SynonymTable, get_matcher

    syn = SynonymTable.default()
    return {d: get_matcher(m, syn) for d, m in DATASET_MATCHERS.items()}
