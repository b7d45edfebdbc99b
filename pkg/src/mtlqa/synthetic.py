"""Templated clinical-note QA corpus used in place of licensed EMR data."""

from __future__ import annotations

import math
import random
from typing import Dict, List, Optional

from .categorizer import Gazetteer, assign_category, assign_soft_labels, default_gazetteer
from .corpus import CATEGORIES, EMRQA_MIX, Category, DatasetError, QARecord

QUESTIONS = {
    Category.DIAGNOSIS: [
        "What is the patient's diagnosis?",
        "What condition was the patient diagnosed with?",
        "What medical problem does the patient have?",
    ],
    Category.MEDICATION: [
        "What medication was prescribed?",
        "What medication was prescribed for {dx}?",
        "Which drug is the patient taking?",
    ],
    Category.SYMPTOMS: [
        "What symptoms did the patient report?",
        "What was the presenting complaint?",
        "What symptom does the patient have?",
    ],
    Category.PROCEDURE: [
        "What procedure was performed?",
        "What procedure did the patient undergo?",
        "Which procedure is documented?",
    ],
    Category.LAB_REPORT: [
        "What were the lab results?",
        "Which laboratory value was reported?",
        "What did the labs show?",
    ],
}

SENTENCES = {
    Category.DIAGNOSIS: [
        "The patient was diagnosed with {a}.",
        "History is significant for {a}.",
        "He has a known history of {a}.",
        "Assessment: {a}, currently stable.",
    ],
    Category.MEDICATION: [
        "She was prescribed {a}.",
        "Started on {a} at admission.",
        "Discharged home on {a}.",
        "Continue {a} as before.",
    ],
    Category.SYMPTOMS: [
        "The patient reports {a} for two days.",
        "She presented with {a}.",
        "Review of systems positive for {a}.",
        "Complains of worsening {a} overnight.",
    ],
    Category.PROCEDURE: [
        "He underwent {a} last week.",
        "{a} was performed without complications.",
        "Scheduled for {a} tomorrow morning.",
        "Status post {a} in March.",
    ],
    Category.LAB_REPORT: [
        "Labs were notable for {a}.",
        "Admission labs showed {a}.",
        "Repeat testing revealed {a}.",
        "Morning results: {a}.",
    ],
}

DOSES = ["5mg", "10mg", "20mg", "25mg", "40mg", "81mg", "100mg", "250mg", "500mg", "1g"]
FREQUENCIES = ["daily", "twice daily", "nightly", "every eight hours", "as needed", "weekly"]
LAB_VALUES = ["4.1", "7.2", "12.5", "138", "0.9", "2.3", "145", "98", "5.6", "1.2", "18", "250"]


def category_counts(size: int, mix: Dict[Category, float]) -> Dict[Category, int]:
    """Largest-remainder allocation of ``size`` records to categories."""
    raw = {c: size * mix.get(c, 0.0) for c in CATEGORIES}
    counts = {c: math.floor(v) for c, v in raw.items()}
    order = sorted(CATEGORIES, key=lambda c: (-(raw[c] - counts[c]), c.index))
    for c in order[: size - sum(counts.values())]:
        counts[c] += 1
    return counts


def _eligible_terms(g: Gazetteer) -> Dict[Category, List[str]]:
    # only terms the labeler maps back to the same category
    out = {}
    for c in CATEGORIES:
        out[c] = [t for t in g.terms(c) if assign_category(t, g) == c]
    return out


def _surface(term: str, rng: random.Random) -> str:
    return term[0].upper() + term[1:] if rng.random() < 0.5 else term


def _answer_text(cat: Category, term: str, rng: random.Random) -> str:
    if cat is Category.MEDICATION:
        return f"{term} {rng.choice(DOSES)} {rng.choice(FREQUENCIES)}"
    if cat is Category.LAB_REPORT:
        return f"{term} {rng.choice(LAB_VALUES)}"
    return term


def _sentence(cat: Category, answer: str, rng: random.Random):
    template = rng.choice(SENTENCES[cat])
    prefix, suffix = template.split("{a}")
    if not prefix:
        answer = answer[0].upper() + answer[1:]
    return prefix + answer + suffix, len(prefix), answer


def generate_synthetic_corpus(
    size: int,
    mix: Optional[Dict[Category, float]] = None,
    seed: int = 0,
    gazetteer: Optional[Gazetteer] = None,
    id_prefix: str = "syn",
) -> List[QARecord]:
    """Generate ``size`` labeled QA records.

    Each context holds one sentence for the asked-about category plus one to
    three distractor sentences from other categories. Category counts follow
    ``mix`` (default: the emrQA proportions) by largest remainder.
    """
    if size < 5:
        raise ValueError(f"size must be at least 5, got {size}")
    mix = dict(EMRQA_MIX if mix is None else mix)
    mix = {Category(c): float(p) for c, p in mix.items()}
    if any(p < 0 for p in mix.values()) or not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
        raise ValueError("mix proportions must be non-negative and sum to 1")
    g = gazetteer if gazetteer is not None else default_gazetteer()
    terms = _eligible_terms(g)
    for c, p in mix.items():
        if p > 0 and not terms[c]:
            raise DatasetError(f"gazetteer has no terms for requested category {c.value!r}")

    rng = random.Random(seed)
    counts = category_counts(size, mix)
    plan = [c for c in CATEGORIES for _ in range(counts[c])]
    rng.shuffle(plan)
    available = [c for c in CATEGORIES if terms[c]]

    records = []
    for i, target in enumerate(plan):
        others = [c for c in available if c is not target]
        k = rng.randint(1, min(3, len(others))) if others else 0
        cats = [target] + rng.sample(others, k)
        rng.shuffle(cats)

        parts, offset = [], 0
        answer = start = None
        dx_term = None
        for c in cats:
            term = _surface(rng.choice(terms[c]), rng)
            text, local, used = _sentence(c, _answer_text(c, term, rng), rng)
            if c is Category.DIAGNOSIS:
                dx_term = used.lower() if c is not target else None
            if c is target:
                answer, start = used, offset + local
            parts.append(text)
            offset += len(text) + 1
        context = " ".join(parts)

        templates = QUESTIONS[target]
        if dx_term is None:
            templates = [t for t in templates if "{dx}" not in t]
        question = rng.choice(templates).format(dx=dx_term)

        rec = QARecord(
            id=f"{id_prefix}-{i:06d}",
            question=question,
            context=context,
            answer_text=answer,
            answer_char_start=start,
            answer_char_end=start + len(answer),
            label=target,
            soft_labels=assign_soft_labels(answer, g),
        )
        rec.validate()
        records.append(rec)
    return records
