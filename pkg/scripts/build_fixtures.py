"""Regenerate everything under fixtures/.

    python3 scripts/build_fixtures.py [--out fixtures]

The golden trajectories are authored here as scripted policy outputs and
replayed through the real environment engine, so every fixture is a
trajectory the engine can actually produce. Output is deterministic.
"""

from __future__ import annotations

import argparse
import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from trajforge.environments import ImageStore, Sample, ToolFixtures, get_spec, parse_policy_output, reset, step
from trajforge.environments.collaboration import collaborate
from trajforge.environments.engine import Terminal, to_trajectory
from trajforge.environments.executors import default_executors
from trajforge.environments.simulation import PatientVignette
from trajforge.environments.specs import DIRECT
from trajforge.policy import PolicyHandle
from trajforge.synthetic import DATASET_ENVIRONMENTS, make_world, write_demo
from trajforge.trajectory import Trajectory, Turn, build_trajectory, serialize

ROOT = Path(__file__).resolve().parent.parent


def call(think: str, name: str, **arguments) -> str:
    return f"<think>{think}</think>\n" + json.dumps({"name": name, "arguments": arguments})


# ---------------------------------------------------------------------------
# images

def make_images(out: Path) -> None:
    rng = np.random.default_rng(7)
    for name, (h, w) in {"cxr_001": (96, 80), "cxr_002": (80, 80), "path_001": (120, 160), "path_002": (64, 64)}.items():
        arr = (rng.random((h, w)) * 255).astype(np.uint8)
        arr[h // 4: h // 2, w // 4: w // 2] = 255  # a bright block so crops differ
        path = out / "images" / f"{name}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.stack([arr] * 3, axis=-1)).save(path)


# ---------------------------------------------------------------------------
# vignettes

TB = {
    "OSCE_Examination": {
        "Objective_for_Doctor": "Assess the patient's chronic cough and establish the diagnosis.",
        "Patient_Actor": {
            "Demographics": "55-year-old male",
            "History": "Chronic cough for 8 weeks, productive of clear sputum. Former smoker, 20 pack-years, quit 5 years ago.",
            "Symptoms": {
                "Primary_Symptom": "Chronic cough",
                "Secondary_Symptoms": ["Unintentional weight loss of 10 lbs over 3 months", "Night sweats",
                                       "Decreased appetite"],
            },
            "Past_Medical_History": "No chronic illnesses.",
            "Social_History": "Former smoker.",
        },
        "Physical_Examination_Findings": {
            "Vital_Signs": "Temperature 36.8°C, BP 130/80, HR 82, RR 18.",
            "Respiratory_Examination": "Bilateral basal crackles (right-predominant), dullness at right base, "
                                       "increased tactile fremitus on right lower lobe.",
        },
        "Test_Results": {
            "Chest X-Ray": "Right upper lobe consolidation with cavitation, no pleural effusion.",
            "Sputum Analysis": "AFB smear positive, culture pending.",
        },
        "Correct_Diagnosis": "Pulmonary Tuberculosis",
    }
}


def _v(objective, demographics, history, primary, secondary, exams, tests, diagnosis):
    return {
        "OSCE_Examination": {
            "Objective_for_Doctor": objective,
            "Patient_Actor": {
                "Demographics": demographics,
                "History": history,
                "Symptoms": {"Primary_Symptom": primary, "Secondary_Symptoms": secondary},
            },
            "Physical_Examination_Findings": exams,
            "Test_Results": tests,
            "Correct_Diagnosis": diagnosis,
        }
    }


VIGNETTES = {
    "tb_cough": TB,
    "iron_deficiency": _v(
        "Evaluate fatigue in a young woman.", "28-year-old female", "Three months of tiredness and heavy periods.",
        "Fatigue", ["Shortness of breath on stairs", "Craving ice"],
        {"Vital_Signs": "HR 104, BP 108/66, afebrile.", "General_Appearance": "Pale conjunctivae, koilonychia."},
        {"Complete_Blood_Count": {"Hemoglobin": "8.9 g/dL", "MCV": "71 fL"}, "Ferritin": "5 ng/mL"},
        "Iron Deficiency Anemia"),
    "appendicitis": _v(
        "Evaluate acute abdominal pain.", "19-year-old male", "Periumbilical pain for 18 hours moving to the right.",
        "Abdominal pain", ["Nausea", "Low-grade fever"],
        {"Vital_Signs": "T 38.1°C, HR 98.", "Abdominal_Examination": {"Palpation": "Tenderness at McBurney's point.",
                                                                     "Rebound": "Positive rebound on the right."}},
        {"White_Cell_Count": "15.1 x10^9/L", "Ultrasound_Abdomen": "Non-compressible 9 mm appendix."},
        "Acute Appendicitis"),
    "hypothyroid": _v(
        "Evaluate weight gain and cold intolerance.", "46-year-old female", "Slowly progressive symptoms over a year.",
        "Weight gain", ["Cold intolerance", "Constipation", "Dry skin"],
        {"Vital_Signs": "HR 54, BP 132/88.", "Neck_Examination": "Diffusely enlarged non-tender thyroid.",
         "Reflexes": "Delayed relaxation of ankle jerks."},
        {"TSH": "22 mIU/L", "Free_T4": "0.4 ng/dL"},
        "Primary Hypothyroidism"),
    "dka": _v(
        "Evaluate vomiting and confusion.", "22-year-old male", "Two days of polyuria, thirst and vomiting.",
        "Vomiting", ["Abdominal pain", "Drowsiness"],
        {"Vital_Signs": "HR 122, RR 30, BP 96/60.", "General_Appearance": "Dry mucosa, fruity breath."},
        {"Blood_Glucose": "32 mmol/L", "Arterial_Blood_Gas": {"pH": "7.08", "Bicarbonate": "8 mmol/L"},
         "Urine_Ketones": "3+"},
        "Diabetic Ketoacidosis"),
    "pneumothorax": _v(
        "Evaluate sudden chest pain.", "24-year-old tall male", "Sudden left chest pain while at rest.",
        "Pleuritic chest pain", ["Breathlessness"],
        {"Vital_Signs": "HR 110, SpO2 93% on air.", "Respiratory_Examination": "Reduced breath sounds on the left, "
                                                                              "hyper-resonant percussion."},
        {"Chest X-Ray": "Left apical pleural line with absent lung markings."},
        "Spontaneous Pneumothorax"),
    "heart_failure": _v(
        "Evaluate progressive breathlessness.", "71-year-old female", "Breathless on exertion, sleeps on three pillows.",
        "Dyspnea", ["Ankle swelling", "Orthopnea"],
        {"Vital_Signs": "HR 96, BP 150/90.", "Cardiovascular_Examination": "Raised JVP, S3 gallop.",
         "Lower_Limbs": "Pitting edema to the knees."},
        {"BNP": "1450 pg/mL", "Echocardiogram": "Ejection fraction 30%."},
        "Congestive Heart Failure"),
    "pe": _v(
        "Evaluate acute breathlessness after surgery.", "63-year-old male", "Hip replacement 10 days ago.",
        "Sudden dyspnea", ["Pleuritic chest pain", "Calf swelling"],
        {"Vital_Signs": "HR 118, SpO2 89%.", "Leg_Examination": "Swollen, tender right calf."},
        {"D_Dimer": "4.2 mg/L", "CT_Pulmonary_Angiogram": "Filling defects in both lower lobe arteries."},
        "Pulmonary Embolism"),
    "gout": _v(
        "Evaluate a painful toe.", "58-year-old male", "Woke with a red, hot big toe after a large meal.",
        "Toe pain", ["Swelling"],
        {"Vital_Signs": "T 37.6°C.", "Joint_Examination": "Red, swollen first metatarsophalangeal joint."},
        {"Serum_Urate": "0.58 mmol/L", "Joint_Aspirate": "Negatively birefringent needle-shaped crystals."},
        "Acute Gout"),
    "meningitis": _v(
        "Evaluate headache and fever.", "20-year-old female", "University student with 12 hours of headache.",
        "Headache", ["Fever", "Photophobia", "Neck stiffness"],
        {"Vital_Signs": "T 39.4°C, HR 124.", "Neurological_Examination": {"Kernig_Sign": "Kernig sign positive bilaterally.",
                                                                         "GCS": "GCS 14/15, confused."}},
        {"Lumbar_Puncture": "Turbid CSF, neutrophils 2200/uL, low glucose.", "Blood_Cultures": "Gram-negative diplococci."},
        "Bacterial Meningitis"),
}

# Doctor scripts: the TB one mirrors the published example; the rest walk every
# exam and test leaf plus one request that is not available.
DOCTOR_SCRIPTS = {
    "tb_cough": [
        ["RequestPhysicalExam", {"exam": "Vital_Signs"}],
        ["RequestPhysicalExam", {"exam": "Respiratory_Examination"}],
        ["RequestTest", {"test": "Chest X-Ray"}],
        ["RequestTest", {"test": "Sputum Analysis"}],
        ["Terminate", {"diagnosis": "Tuberculosis"}],
    ],
}


def doctor_script(case: str, vignette: dict) -> list:
    if case in DOCTOR_SCRIPTS:
        return DOCTOR_SCRIPTS[case]
    osce = vignette["OSCE_Examination"]
    steps = []
    for tool, arg, section in (("RequestPhysicalExam", "exam", "Physical_Examination_Findings"),
                               ("RequestTest", "test", "Test_Results")):
        for key, value in osce[section].items():
            # nested groups are requested leaf by leaf, through the one-level fallback
            keys = list(value) if isinstance(value, dict) else [key]
            steps += [[tool, {arg: k}] for k in keys]
    steps.append(["RequestTest", {"test": "MRI"}])
    steps.append(["Terminate", {"diagnosis": osce["Correct_Diagnosis"]}])
    return steps


def write_vignettes(out: Path) -> None:
    d = out / "vignettes" / "mimic"
    d.mkdir(parents=True, exist_ok=True)
    for case, v in VIGNETTES.items():
        PatientVignette.from_dict(v)  # invariant check
        (d / f"{case}.json").write_text(json.dumps(v, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    scripts = {case: doctor_script(case, v) for case, v in VIGNETTES.items()}
    (out / "vignettes" / "doctor_scripts.json").write_text(json.dumps(scripts, indent=2, sort_keys=True) + "\n",
                                                          encoding="utf-8")


# ---------------------------------------------------------------------------
# golden trajectories

def replay(env: str, sample: Sample, outputs: list[str], *, fixtures: ToolFixtures | None = None,
           vignette: PatientVignette | None = None, images: ImageStore | None = None, mode: str = "prospective",
           tier: int | None = 3) -> Trajectory:
    state = reset(get_spec(env), sample, vignette, executors=default_executors(env, fixtures), images=images)
    for out in outputs:
        res = step(state, parse_policy_output(out))
        if isinstance(res, Terminal):
            break
    assert state.terminated and state.failure is None, (sample.sample_id, state.failure)
    t = to_trajectory(state, mode, {"gold_answer": sample.gold_answer})
    return replace(t, tier=tier)


def tool_calling_cases(out: Path) -> dict[str, Trajectory]:
    img1, img2 = "images/cxr_001.png", "images/cxr_002.png"
    fx = ToolFixtures()
    fx.add("*", "ChestXRayClassifier", "*", "Pathology probabilities: Effusion 0.91, Cardiomegaly 0.22, "
           "Atelectasis 0.18, Pneumothorax 0.03, Consolidation 0.11.")
    fx.add("*", "ChestXRaySegmentation", "*", "Segmented structures: left lung 41% of thorax, right lung 47%, "
           "heart 12%. Right costophrenic angle not delineated.")
    fx.add("*", "XRayPhraseGrounding", "*", "Phrase grounded at box [0.58, 0.62, 0.93, 0.88] in the right lower zone.")
    fx.add("*", "ChestXRayReportGen", "*", "Findings: No focal airspace disease. Heart size normal. "
           "Impression: No acute cardiopulmonary abnormality.")
    fx.add("*", "CheXagentVQA", "*", "The lungs are clear and no pleural fluid is visible.")
    cases = {}
    s = Sample("tc-depth0", "chestagentbench", "Is this a frontal chest radiograph?", "yes", (img1,), "View")
    cases["depth0_direct_answer"] = replay("tool_calling", s, [
        "<think>The image is a standard frontal projection, which I can see without tools.</think>\n"
        "The study is a frontal view.\n[FINAL] yes",
    ], fixtures=fx)
    s = Sample("tc-depth1", "chestagentbench", "Is there a pleural effusion?", "yes", (img1,), "Detection")
    cases["depth1_classifier"] = replay("tool_calling", s, [
        call("Effusion likelihood is best judged from the classifier probabilities.", "ChestXRayClassifier",
             image_path=img1),
        "<think>The classifier assigns effusion a probability of 0.91, which is high.</think>\n"
        "The classifier strongly supports an effusion.\n[FINAL] yes",
    ], fixtures=fx)
    s = Sample("tc-depth2", "chestagentbench", "Where is the pleural effusion located?", "right lower zone",
               (img1,), "Localization")
    cases["depth2_segment_ground"] = replay("tool_calling", s, [
        call("Segmentation shows which lung borders are obscured.", "ChestXRaySegmentation", image_path=img1),
        call("The right costophrenic angle is not delineated, so I ground the phrase to confirm the side.",
             "XRayPhraseGrounding", image_path=img1, phrase="pleural effusion"),
        "<think>Grounding places the effusion in the right lower zone, matching the segmentation.</think>\n"
        "The fluid sits at the right base.\n[FINAL] right lower zone",
    ], fixtures=fx)
    s = Sample("tc-depth4", "chestagentbench", "Is there any acute abnormality on this chest X-ray?", "no",
               (img2,), "Diagnosis")
    cases["depth4_max"] = replay("tool_calling", s, [
        call("A pathology screen gives a first overview.", "ChestXRayClassifier", image_path=img2),
        call("The screen is mixed, so a full report adds context.", "ChestXRayReportGen", image_path=img2),
        call("The report says no acute abnormality; a targeted question checks for pleural fluid.",
             "CheXagentVQA", image_path=img2, question="Is there pleural fluid?"),
        call("Grounding the phrase tests whether any focal finding can be localized.", "XRayPhraseGrounding",
             image_path=img2, phrase="acute abnormality"),
        "<think>The report and the question answer agree that nothing acute is present.</think>\n"
        "No acute abnormality is seen.\n[FINAL] no",
    ], fixtures=fx)
    s = Sample("tc-recovery", "chestagentbench", "Is there a pleural effusion on the DICOM study?", "yes",
               (img1,), "Detection")
    cases["tool_error_recovery"] = replay("tool_calling", s, [
        call("The study is a DICOM file, so I read its pixel data first.", "DICOMProcessor",
             dicom_path="studies/tc-recovery.dcm"),
        call("The DICOM reader failed, so I classify the exported image instead.", "ChestXRayClassifier",
             image_path=img1),
        "<think>The classifier gives effusion a probability of 0.91.</think>\nAn effusion is present.\n[FINAL] yes",
    ], fixtures=fx)
    return cases


def interleaved_cases(out: Path) -> dict[str, Trajectory]:
    fx = ToolFixtures()
    fx.add("*", "OCR", "*", "Recognized text: 'H&E 40x' in the lower right corner.")
    fx.add("*", "BioMedParseTextSeg", "*", "Segmented 'gland' covering 23% of the region; mask overlaid.",
           "masks/il-depth6-gland.png")
    fx.add("*", "SegmentRegionAroundPoint", "*", "Region around the point segmented; area 1840 pixels.",
           "masks/il-depth6-point.png")
    store = ImageStore(root=out)
    cases = {}
    p1, p2 = "images/path_001.png", "images/path_002.png"
    s = Sample("il-depth0", "pathvqa", "Is this a microscopy image?", "yes", (p1,))
    cases["depth0_terminate"] = replay("interleaved", s, [
        call("The stained tissue pattern makes this obvious without tools.", "Terminate", ans="yes"),
    ], images=store)
    s = Sample("il-zoom1", "pathvqa", "Does the upper left quadrant contain a bright uniform block?", "yes", (p1,))
    cases["depth1_zoom"] = replay("interleaved", s, [
        call("Zooming into the upper left quadrant shows whether the block is uniform.", "ZoomInSubfigure",
             image="img_original", param=[0, 0, 500, 500]),
        call("The crop shows a bright uniform block.", "Terminate", ans="yes"),
    ], images=store)
    s = Sample("il-depth3", "pathvqa", "What magnification is printed on the slide?", "40x", (p1,))
    cases["depth3_zoom_ocr"] = replay("interleaved", s, [
        call("The label is usually in a corner, so I crop the lower half first.", "ZoomInSubfigure",
             image="img_original", param=[0, 500, 1000, 1000]),
        call("The text is still small, so I zoom further on the right side of the last crop.", "ZoomInSubfigure",
             image="img_last", param=[500, 0, 1000, 1000]),
        call("Reading the text directly is more reliable than guessing.", "OCR", image="img_last"),
        call("The recognized text states 40x.", "Terminate", ans="40x"),
    ], images=store)
    s = Sample("il-depth6", "pathvqa", "Are glands present in this section?", "yes", (p2,))
    cases["depth6_max"] = replay("interleaved", s, [
        call("A first crop of the center narrows the field.", "ZoomInSubfigure", image="img_original",
             param=[100, 100, 900, 900]),
        call("Text-prompted segmentation tests for glandular structures.", "BioMedParseTextSeg",
             image="img_last", param="gland"),
        call("A point prompt on the brightest area checks its extent.", "SegmentRegionAroundPoint",
             image="img_round_0", param='x="400" y="400"'),
        call("Returning to the segmented view, a tighter crop shows the mask border.", "ZoomInSubfigure",
             image="img_round_0", param=[250, 250, 750, 750]),
        call("Any printed label could name the stain.", "OCR", image="img_original"),
        call("A final crop of the original confirms the overall pattern.", "ZoomInSubfigure",
             image="img_original", param=[0, 0, 1000, 1000]),
        call("Segmentation found glands covering about a quarter of the region.", "Terminate", ans="yes"),
    ], images=store)
    return cases


def collaboration_cases(out: Path) -> dict[str, Trajectory]:
    def panel(level: str, votes: list[str], basic_answer: str = ""):
        state = {"expert": 0}

        def respond(req):
            sp = req.system_prompt
            if sp.startswith("Rate how hard"):
                return level
            if sp.startswith("Recruit"):
                return ("1. Cardiologist - heart and vessels\n2. Pulmonologist - lung disease\n"
                        "3. Radiologist - imaging interpretation")
            if sp.startswith("Summarize"):
                return "All three experts weighed the presentation; the majority view is stated below."
            if not votes:
                return f"The presentation fits a single common cause.\nAnswer: {basic_answer}"
            i = state["expert"] % 3
            state["expert"] += 1
            return f"Reviewing the history and findings from my specialty.\nAnswer: {votes[i]}"
        return PolicyHandle.scripted("agent", responder=respond)

    def run(sample, handle):
        st = reset(get_spec("collaboration"), sample)
        res = collaborate(st, handle)
        t = res.trajectory
        return replace(t, tier=3, meta=dict(t.meta, gold_answer=sample.gold_answer))

    cases = {}
    s = Sample("co-basic", "medqa", "Which vitamin deficiency causes scurvy?", "vitamin C")
    cases["basic_depth2"] = run(s, panel("1) basic", [], "vitamin C"))
    s = Sample("co-basic-yn", "pubmedqa", "Does regular aerobic exercise lower resting blood pressure?", "yes")
    cases["basic_yes_no"] = run(s, panel("1) basic", [], "yes"))
    s = Sample("co-intermediate", "medqa",
               "A 67-year-old with exertional chest pain has ST depression on exercise testing. "
               "Is coronary angiography indicated?", "yes")
    cases["intermediate_depth12"] = run(s, panel("2) intermediate", ["yes", "yes", "no"]))
    s = Sample("co-advanced", "medqa",
               "A patient with lung cancer develops confusion and a sodium of 118 mmol/L. "
               "Is SIADH the most likely cause?", "yes")
    cases["advanced_depth12"] = run(s, panel("3) advanced", ["yes", "no", "yes"]))
    return cases


def simulation_cases(out: Path) -> dict[str, Trajectory]:
    def sample(case: str) -> tuple[Sample, PatientVignette]:
        v = PatientVignette.from_dict(VIGNETTES[case])
        return Sample(case, "mimic", "What is the most likely diagnosis?", v.correct_diagnosis), v

    cases = {}
    s, v = sample("tb_cough")
    cases["tb_depth4"] = replay("simulation", s, [
        call("Baseline vital signs come first to rule out systemic instability.", "RequestPhysicalExam",
             exam="Vital_Signs"),
        call("Vitals are stable; chest examination should localize the cough.", "RequestPhysicalExam",
             exam="Respiratory_Examination"),
        call("Right-sided dullness and crackles need imaging.", "RequestTest", test="Chest X-Ray"),
        call("Upper lobe cavitation raises an infectious cause, so sputum testing is next.", "RequestTest",
             test="Sputum Analysis"),
        call("A positive AFB smear with cavitation and weight loss confirms the diagnosis.", "Terminate",
             diagnosis="Tuberculosis"),
    ], vignette=v)
    s, v = sample("gout")
    cases["depth0_immediate"] = replay("simulation", s, [
        call("A red, hot big toe after a heavy meal is characteristic enough to name.", "Terminate",
             diagnosis="Acute Gout"),
    ], vignette=v)
    s, v = sample("pneumothorax")
    cases["depth2_unavailable_test"] = replay("simulation", s, [
        call("An MRI could show the chest wall, so I ask for it first.", "RequestTest", test="MRI"),
        call("MRI is not offered; a plain chest film answers the question.", "RequestTest", test="Chest X-Ray"),
        call("A pleural line without lung markings settles it.", "Terminate", diagnosis="Spontaneous Pneumothorax"),
    ], vignette=v)
    s, v = sample("meningitis")
    steps = [
        ("RequestPhysicalExam", {"exam": "Vital_Signs"}, "Fever and tachycardia need quantifying."),
        ("RequestPhysicalExam", {"exam": "Neurological_Examination"}, "Neck stiffness calls for a neurological exam."),
        ("RequestPhysicalExam", {"exam": "Kernig_Sign"}, "The Kernig sign is worth isolating."),
        ("RequestPhysicalExam", {"exam": "GCS"}, "Conscious level guides urgency."),
        ("RequestPhysicalExam", {"exam": "Skin_Examination"}, "A rash would change management."),
        ("RequestPhysicalExam", {"exam": "Fundoscopy"}, "Papilledema must be excluded before a lumbar puncture."),
        ("RequestTest", {"test": "Blood_Cultures"}, "Cultures should be drawn early."),
        ("RequestTest", {"test": "CT_Head"}, "Imaging is requested before the lumbar puncture."),
        ("RequestTest", {"test": "Lumbar_Puncture"}, "CSF analysis is the key test."),
        ("RequestTest", {"test": "Complete_Blood_Count"}, "A blood count adds supporting evidence."),
        ("RequestTest", {"test": "C_Reactive_Protein"}, "An inflammatory marker is also useful."),
        ("RequestTest", {"test": "Procalcitonin"}, "Procalcitonin helps separate bacterial from viral causes."),
    ]
    outputs = [call(why, name, **args) for name, args, why in steps]
    outputs.append(call("Turbid CSF with neutrophils, low glucose and diplococci in blood establish it.",
                        "Terminate", diagnosis="Bacterial Meningitis"))
    cases["depth12_max"] = replay("simulation", s, outputs, vignette=v)
    return cases


def direct_cases(out: Path) -> dict[str, Trajectory]:
    def direct(sid, question, content, answer, tier, images=()):
        s = Sample(sid, "vqa-rad", question, answer, images)
        from trajforge.environments.engine import render_question
        q = render_question(DIRECT, s)
        return build_trajectory(
            sample_id=sid, environment_id="direct", turns=(q, Turn.gpt(content)), final_answer=answer,
            mode="direct" if tier == 1 else "enhanced", system_prompt=DIRECT.system_prompt, tier=tier,
            meta={"dataset_id": "vqa-rad", "gold_answer": answer},
        )

    return {
        "tier1_yes_no": direct("d-yn", "Is the heart enlarged on this radiograph?",
                               "<think>The cardiac silhouette spans more than half the thoracic width.</think>\n"
                               "The cardiothoracic ratio is above 0.5.\n[FINAL] yes", "yes", 1,
                               ("images/cxr_002.png",)),
        "tier1_phrase": direct("d-phrase", "Which organ is imaged in this axial CT slice of the upper abdomen?",
                               "<think>The large homogeneous organ in the right upper quadrant is the liver.</think>\n"
                               "[FINAL] liver", "liver", 1),
        "tier2_enhanced": direct("d-enh", "What is the first-line treatment for uncomplicated hypertension "
                                 "in a 50-year-old without comorbidities?",
                                 "<think>Guidelines recommend a thiazide-type diuretic, ACE inhibitor, ARB or "
                                 "calcium channel blocker; a thiazide is a standard first choice.</think>\n"
                                 "[FINAL] thiazide diuretic", "thiazide diuretic", 2),
        "tier2_unicode": direct("d-uni", "Quel est le signe radiologique d'un épanchement pleural ?",
                                "<think>Un émoussement du cul-de-sac costo-diaphragmatique est typique.</think>\n"
                                "[FINAL] émoussement du cul-de-sac", "émoussement du cul-de-sac", 2),
    }


def write_golden(out: Path) -> dict[str, dict[str, Trajectory]]:
    golden = {
        "tool_calling": tool_calling_cases(out),
        "interleaved": interleaved_cases(out),
        "collaboration": collaboration_cases(out),
        "simulation": simulation_cases(out),
        "direct": direct_cases(out),
    }
    for env, cases in golden.items():
        d = out / env
        d.mkdir(parents=True, exist_ok=True)
        for name, t in cases.items():
            (d / f"{name}.json").write_text(serialize(t), encoding="utf-8", newline="\n")
    return golden


# ---------------------------------------------------------------------------
# validator fixtures

def _with_turns(t: Trajectory, turns, **changes) -> Trajectory:
    turns = tuple(turns)
    images = changes.pop("images", tuple(i for turn in turns for i in turn.images))
    return replace(t, turns=turns, images=images, **changes)


def negatives(base: Trajectory) -> dict[str, Trajectory]:
    """One broken variant of a passing depth-2 tool_calling trajectory per reject rule."""
    h, c1, o1, c2, o2, g = base.turns
    img = base.turns[0].images[0]
    out = {}
    out["grammar"] = _with_turns(base, [h, c1, o1, c2, g])
    out["correctness"] = replace(base, meta=dict(base.meta, gold_answer="left upper zone"))
    out["unknown_tool"] = _with_turns(base, [h, Turn("function_call", c1.content.replace(
        "ChestXRaySegmentation", "LungNoduleDetector")), o1, c2, o2, g])
    out["bad_arguments"] = _with_turns(base, [h, Turn("function_call", "<think>Segmentation shows which lung "
                                       "borders are obscured.</think>\n"
                                       '{"name": "ChestXRaySegmentation", "arguments": {"image_path": images/cxr_001.png}}'),
                                       o1, c2, o2, g])
    out["missing_terminate"] = _with_turns(base, [h, c1, o1, c2, o2, Turn.gpt(
        "The fluid sits at the right base, in the right lower zone.",
        "Grounding places the effusion in the right lower zone.")])
    out["image_alignment"] = _with_turns(base, base.turns, images=base.images + ("images/extra.png",))
    # pad one observation so the turn contents total exactly 10,001 characters
    total = sum(len(t.content) for t in base.turns)
    pad = 10_001 - total
    out["length_bound"] = _with_turns(base, [h, c1, Turn.observation(o1.content + (" no change" * pad)[:pad]), c2, o2, g])
    extra = []
    for tool, args in (("ChestXRayClassifier", {"image_path": img}), ("ChestXRayReportGen", {"image_path": img}),
                       ("CheXagentVQA", {"image_path": img, "question": "Is the right base clear?"})):
        extra.append(Turn("function_call", call(f"The {tool} output adds another view of the right base.", tool,
                                                **args)))
        extra.append(Turn.observation(f"{tool} reports fluid at the right base."))
    out["depth_bound"] = _with_turns(base, [h, c1, o1, *extra, c2, o2, g])
    out["repetition_loop"] = _with_turns(base, [h, c1, o1, c1, o1, c2, o2, g])
    out["truncation"] = _with_turns(base, [h, Turn("function_call", c1.content.replace(
        "Segmentation shows which lung borders are obscured.", "Segmentation shows which lung borders are")),
        o1, c2, o2, g])
    out["missing_think"] = _with_turns(base, [h, Turn("function_call", "<think></think>\n" + c1.body), o1, c2, o2, g])
    out["short_content"] = _with_turns(base, [h, c1, Turn.observation("OK."), c2, o2, g])
    return out


def write_validator(out: Path, golden) -> None:
    pos = out / "validator" / "positive"
    neg = out / "validator" / "negative"
    flag = out / "validator" / "flag"
    for d in (pos, neg, flag):
        d.mkdir(parents=True, exist_ok=True)
    picks = {"tool_calling": "depth2_segment_ground", "interleaved": "depth3_zoom_ocr",
             "collaboration": "intermediate_depth12", "simulation": "tb_depth4", "direct": "tier1_phrase"}
    for env, name in picks.items():
        (pos / f"{env}.json").write_text(serialize(golden[env][name]), encoding="utf-8", newline="\n")
    base = golden["tool_calling"]["depth2_segment_ground"]
    for rule, t in negatives(base).items():
        (neg / f"{rule}.json").write_text(serialize(t, check=False), encoding="utf-8", newline="\n")
    h, c1, o1, c2, o2, g = base.turns
    halluc = _with_turns(base, [h, c1, o1, Turn("function_call", c2.content.replace(
        "so I ground the phrase", "possibly a pneumothorax as well, so I ground the phrase")), o2, g])
    (flag / "hallucination_keyword.json").write_text(serialize(halluc), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------

def build(out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    make_images(out)
    write_vignettes(out)
    golden = write_golden(out)
    write_validator(out, golden)
    world = make_world(48, tuple(DATASET_ENVIRONMENTS), recap_failures=1)
    write_demo(out / "synthetic", world)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "fixtures"))
    args = ap.parse_args()
    build(Path(args.out))


if __name__ == "__main__":
    main()
