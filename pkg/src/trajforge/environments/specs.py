"""Static definitions of the four agent environments (plus the tool-free one)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..trajectory import T_MAX, ParamSpec, ToolSchema


def _tool(name: str, description: str, **params: tuple[str, str, bool]) -> ToolSchema:
    return ToolSchema(name, description, {k: ParamSpec(*v) for k, v in params.items()})


@dataclass(frozen=True)
class EnvironmentSpec:
    environment_id: str
    t_max: int
    tool_schemas: tuple[ToolSchema, ...]
    terminal_rule: str
    system_prompt: str = ""
    terminal_actions: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.t_max < 0:
            raise ValueError("t_max must be nonnegative")

    @property
    def tool_names(self) -> frozenset[str]:
        return frozenset(s.name for s in self.tool_schemas)

    @property
    def step_tools(self) -> frozenset[str]:
        """Tools that consume an action (everything except terminal actions)."""
        return self.tool_names - self.terminal_actions

    def schema(self, name: str) -> ToolSchema | None:
        for s in self.tool_schemas:
            if s.name == name:
                return s
        return None

    def with_t_max(self, t_max: int) -> "EnvironmentSpec":
        return replace(self, t_max=t_max)


_IMG = ("string", "Path or registry id of the input image.", True)

TOOL_CALLING_TOOLS = (
    _tool("ChestXRayClassifier", "Returns probabilities for 14 chest X-ray pathologies.", image_path=_IMG),
    _tool(
        "ChestXRaySegmentation",
        "Segments anatomical structures and reports region statistics.",
        image_path=_IMG,
        anatomy=("string", "Optional structure to report on.", False),
    ),
    _tool(
        "CheXagentVQA",
        "Answers a free-text question about a chest X-ray.",
        image_path=_IMG,
        question=("string", "Question about the image.", True),
    ),
    _tool(
        "LLaVAMedVQA",
        "Answers a free-text question about a medical image.",
        image_path=_IMG,
        question=("string", "Question about the image.", True),
    ),
    _tool(
        "XRayPhraseGrounding",
        "Localizes a text phrase and returns bounding box coordinates.",
        image_path=_IMG,
        phrase=("string", "Finding or structure to localize.", True),
    ),
    _tool("ChestXRayReportGen", "Generates a structured radiology report.", image_path=_IMG),
    _tool(
        "DICOMProcessor",
        "Extracts metadata and pixel data from a DICOM file.",
        dicom_path=("string", "Path of the DICOM file.", True),
    ),
    _tool(
        "ImageVisualizer",
        "Draws annotations on an image.",
        image_path=_IMG,
        annotations=("string", "Optional annotation description.", False),
    ),
)

_IMAGE_ID = ("string", "Image identifier: img_original, img_last or img_round_N.", True)

INTERLEAVED_TOOLS = (
    _tool(
        "ZoomInSubfigure",
        "Crops the image to a region to inspect details.",
        image=_IMAGE_ID,
        param=("array", "Bounding box [x1, y1, x2, y2] on a 0-1000 normalized grid.", True),
    ),
    _tool(
        "SegmentRegionAroundPoint",
        "Segments the region around a point and overlays the mask.",
        image=_IMAGE_ID,
        param=("string", 'Point as x="value" y="value" on a 0-1000 scale.', True),
    ),
    _tool(
        "BioMedParseTextSeg",
        "Text-prompted biomedical segmentation.",
        image=_IMAGE_ID,
        param=("string", "Semicolon-separated short noun phrases.", True),
    ),
    _tool(
        "OCR",
        "Extracts text from an image region.",
        image=_IMAGE_ID,
        param=("string", "Optional region description.", False),
    ),
    _tool("Terminate", "Ends the episode with a short final answer.", ans=("string", "Final answer.", True)),
)

COLLABORATION_STAGES = (
    _tool("AssessDifficulty", "Classifies the query as basic, intermediate or advanced."),
    _tool("ExpertAnswer", "A single expert answers a basic query."),
    _tool("RecruitExperts", "Recruits specialists for the debate.", count=("integer", "Number of experts.", True)),
    _tool("ExpertAnalysis", "One expert analyses the query independently.", expert=("string", "Specialty.", True)),
    _tool(
        "Debate",
        "One expert responds to the other experts' latest opinions.",
        round=("integer", "Debate round, starting at 1.", True),
        expert=("string", "Specialty.", True),
    ),
    _tool("Synthesize", "Summarizes all expert opinions into one report."),
)

SIMULATION_TOOLS = (
    _tool(
        "RequestPhysicalExam",
        "Returns the findings of one physical examination.",
        exam=("string", "Name of the examination.", True),
    ),
    _tool("RequestTest", "Returns the result of one diagnostic test.", test=("string", "Name of the test.", True)),
    _tool("Terminate", "Ends the encounter with the final diagnosis.", diagnosis=("string", "Condition name only.", True)),
)

TOOL_CALLING_PROMPT = """You are a medical imaging agent answering questions about chest X-rays.
Reason inside <think> and </think> before every tool call and before answering.
Call a tool only when you need information you cannot read from the image yourself.
Emit a tool call as a JSON object {"name": ..., "arguments": {...}}. Use at most 4 tool calls.
When you are done, give a short justification and finish with:
[FINAL] <answer>
Answer yes/no questions with exactly "yes" or "no"; otherwise give the shortest correct phrase."""

INTERLEAVED_PROMPT = """You are a visual assistant for medical images. Decide whether image tools help answer the question.
Images are referred to by id:
- img_original: the input image.
- img_last: the image produced by the previous step.
- img_round_N: the image produced at step N.
Each observation that creates an image names it, e.g. [Output Image ID: img_round_0].
Tools: ZoomInSubfigure, SegmentRegionAroundPoint, BioMedParseTextSeg, OCR, Terminate.
Call one tool per turn as JSON {"name": ..., "arguments": {...}} preceded by <think> reasoning.
Always finish with Terminate; keep "ans" to a few words, or Yes/No."""

COLLABORATION_PROMPT = """You coordinate a panel of medical experts. Stages: difficulty assessment, expert recruitment,
independent analyses, two debate rounds, synthesis, and a majority vote."""

SIMULATION_PROMPT = """You are a physician examining a patient. The presentation lists only what the patient reports.
Request examinations and tests one at a time, reasoning inside <think> and </think> before each call.
Call tools as JSON {"name": ..., "arguments": {...}} and finish with Terminate giving only the condition name.
Physical examinations: {available_exams}
Medical tests: {available_tests}"""

DIRECT_PROMPT = """Answer the medical question directly without tools.
Think inside <think> and </think>, then finish with:
[FINAL] <answer>"""


TOOL_CALLING = EnvironmentSpec(
    "tool_calling", T_MAX["tool_calling"], TOOL_CALLING_TOOLS,
    "gpt turn carrying a [FINAL] marker", TOOL_CALLING_PROMPT,
)
INTERLEAVED = EnvironmentSpec(
    "interleaved", T_MAX["interleaved"], INTERLEAVED_TOOLS,
    "Terminate action with ans", INTERLEAVED_PROMPT, frozenset({"Terminate"}),
)
COLLABORATION = EnvironmentSpec(
    "collaboration", T_MAX["collaboration"], COLLABORATION_STAGES,
    "moderator majority vote after synthesis", COLLABORATION_PROMPT,
)
SIMULATION = EnvironmentSpec(
    "simulation", T_MAX["simulation"], SIMULATION_TOOLS,
    "Terminate action with diagnosis", SIMULATION_PROMPT, frozenset({"Terminate"}),
)
DIRECT = EnvironmentSpec("direct", T_MAX["direct"], (), "single gpt answer", DIRECT_PROMPT)

ENVIRONMENT_SPECS = {e.environment_id: e for e in (TOOL_CALLING, INTERLEAVED, COLLABORATION, SIMULATION, DIRECT)}


def get_spec(environment_id: str, t_max: int | None = None) -> EnvironmentSpec:
    try:
        spec = ENVIRONMENT_SPECS[environment_id]
    except KeyError:
        raise ValueError(f"unknown environment {environment_id!r}") from None
    return spec if t_max is None else spec.with_t_max(t_max)
