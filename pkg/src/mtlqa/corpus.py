"""Records, JSONL ingestion, stratified splitting and class-imbalance handling."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple


class Category(str, Enum):
    """The five answer categories, in the order they are tried during labeling."""

    DIAGNOSIS = "diagnosis"
    MEDICATION = "medication"
    SYMPTOMS = "symptoms"
    PROCEDURE = "procedure"
    LAB_REPORT = "lab_report"

    @property
    def codes(self) -> Tuple[str, ...]:
        return SEMANTIC_TYPES[self]

    @property
    def index(self) -> int:
        return CATEGORIES.index(self)

    @classmethod
    def from_code(cls, code: str) -> "Category":
        try:
            return _CODE_TO_CATEGORY[code]
        except KeyError:
            raise ValueError(f"unknown semantic type code {code!r}") from None


CATEGORIES: Tuple[Category, ...] = tuple(Category)

# UMLS semantic type (TUI) columns per category.
SEMANTIC_TYPES: Dict[Category, Tuple[str, ...]] = {
    Category.DIAGNOSIS: ("T047", "T019", "T033"),
    Category.MEDICATION: ("T200", "T109", "T121"),
    Category.SYMPTOMS: ("T184",),
    Category.PROCEDURE: ("T060", "T061", "T058"),
    Category.LAB_REPORT: ("T034", "T059"),
}
_CODE_TO_CATEGORY = {code: cat for cat, codes in SEMANTIC_TYPES.items() for code in codes}

# QA-pair counts per category in emrQA; used as the default synthetic mix.
EMRQA_COUNTS: Dict[Category, int] = {
    Category.DIAGNOSIS: 141243,
    Category.MEDICATION: 255908,
    Category.PROCEDURE: 20540,
    Category.SYMPTOMS: 23474,
    Category.LAB_REPORT: 14672,
}
_EMRQA_TOTAL = sum(EMRQA_COUNTS.values())
EMRQA_MIX: Dict[Category, float] = {c: EMRQA_COUNTS[c] / _EMRQA_TOTAL for c in CATEGORIES}


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


@dataclass
class QARecord:
    id: str
    question: str
    context: str
    answer_text: str
    answer_char_start: int
    answer_char_end: int
    label: Optional[Category] = None
    soft_labels: Optional[Dict[Category, float]] = None
    all_gold_answers: Optional[List[str]] = None
    provenance: Optional[str] = None
    gazetteer_miss: bool = False

    def validate(self, require_label: bool = True) -> None:
        n = len(self.context)
        if not (0 <= self.answer_char_start < self.answer_char_end <= n):
            raise DatasetError(
                f"record {self.id!r}: offsets [{self.answer_char_start}, {self.answer_char_end}) "
                f"invalid for context of length {n}"
            )
        span = self.context[self.answer_char_start:self.answer_char_end]
        if span != self.answer_text:
            raise DatasetError(
                f"record {self.id!r}: context span {span!r} does not match answer_text {self.answer_text!r}"
            )
        if require_label and self.label is None:
            raise DatasetError(f"record {self.id!r}: missing label")
        if self.soft_labels is not None:
            for cat, p in self.soft_labels.items():
                if not 0.0 <= p <= 1.0:
                    raise DatasetError(f"record {self.id!r}: soft label {cat.value}={p} outside [0, 1]")
            if self.label is not None:
                top = max(self.soft_labels.values(), default=0.0)
                if self.soft_labels.get(self.label, 0.0) < top:
                    raise DatasetError(
                        f"record {self.id!r}: hard label {self.label.value} is not the soft-label maximum"
                    )

    @property
    def gold_answers(self) -> List[str]:
        return list(self.all_gold_answers) if self.all_gold_answers else [self.answer_text]

    def to_json(self) -> dict:
        obj = {
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "answer_text": self.answer_text,
            "answer_char_start": self.answer_char_start,
            "answer_char_end": self.answer_char_end,
            "label": self.label.value if self.label is not None else None,
        }
        if self.soft_labels is not None:
            obj["soft_labels"] = {c.value: self.soft_labels[c] for c in CATEGORIES if c in self.soft_labels}
        if self.all_gold_answers is not None:
            obj["all_gold_answers"] = list(self.all_gold_answers)
        if self.provenance is not None:
            obj["provenance"] = self.provenance
        if self.gazetteer_miss:
            obj["gazetteer_miss"] = True
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "QARecord":
        return cls(
            id=obj["id"],
            question=obj["question"],
            context=obj["context"],
            answer_text=obj["answer_text"],
            answer_char_start=obj["answer_char_start"],
            answer_char_end=obj["answer_char_end"],
            label=Category(obj["label"]) if obj.get("label") is not None else None,
            soft_labels=(
                {Category(k): float(v) for k, v in obj["soft_labels"].items()}
                if obj.get("soft_labels") is not None
                else None
            ),
            all_gold_answers=obj.get("all_gold_answers"),
            provenance=obj.get("provenance"),
            gazetteer_miss=bool(obj.get("gazetteer_miss", False)),
        )


_FIELD_TYPES = {
    "id": str,
    "question": str,
    "context": str,
    "answer_text": str,
    "answer_char_start": int,
    "answer_char_end": int,
}


def _check_fields(obj: dict, lineno: int, require_label: bool) -> None:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: expected a JSON object")
    for name, typ in _FIELD_TYPES.items():
        if name not in obj:
            raise DatasetError(f"line {lineno}: missing field {name!r}")
        value = obj[name]
        if not isinstance(value, typ) or isinstance(value, bool):
            raise DatasetError(f"line {lineno}: field {name!r} must be {typ.__name__}, got {value!r}")
    label = obj.get("label")
    if label is None:
        if require_label:
            raise DatasetError(f"line {lineno}: missing field 'label'")
    elif label not in {c.value for c in CATEGORIES}:
        raise DatasetError(f"line {lineno}: field 'label' has unknown category {label!r}")
    soft = obj.get("soft_labels")
    if soft is not None:
        if not isinstance(soft, dict) or any(k not in {c.value for c in CATEGORIES} for k in soft):
            raise DatasetError(f"line {lineno}: field 'soft_labels' must map category names to floats")


def load_jsonl(path, require_label: bool = True) -> List[QARecord]:
    """Read records from a JSONL file, validating each one.

    Errors name the offending line number and field.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: invalid JSON ({e.msg})") from None
            _check_fields(obj, lineno, require_label)
            record = QARecord.from_json(obj)
            try:
                record.validate(require_label=require_label)
            except DatasetError as e:
                raise DatasetError(f"line {lineno}: {e}") from None
            if record.id in seen:
                raise DatasetError(f"line {lineno}: field 'id' duplicates {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


def dumps_jsonl(records: Iterable[QARecord]) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in records)


def save_jsonl(path, records: Iterable[QARecord]) -> None:
    Path(path).write_text(dumps_jsonl(records), encoding="utf-8")


# ---------------------------------------------------------------------------
# splitting


@dataclass
class DatasetSplit:
    train: List[QARecord]
    validation: List[QARecord]
    test: List[QARecord]
    seed: int

    def parts(self) -> Tuple[List[QARecord], List[QARecord], List[QARecord]]:
        return self.train, self.validation, self.test


def _label_key(label) -> str:
    return label.value if isinstance(label, Enum) else str(label)


def _largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    raw = [total * f for f in fractions]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_allocation(
    class_counts: Dict[str, int], fractions: Sequence[float]
) -> Dict[str, List[int]]:
    """Round the per-class targets ``n_c * f_s`` to integers.

    Every cell is the floor or ceiling of its target, every class keeps its
    total, and the part totals are the largest-remainder rounding of
    ``N * f_s`` whenever such a rounding exists (otherwise any floor/ceiling
    of it). Classes are processed in name order; the search is a small
    depth-first enumeration over which cells round up.
    """
    names = sorted(class_counts)
    k = len(fractions)
    targets = {c: [class_counts[c] * f for f in fractions] for c in names}
    floors = {c: [math.floor(t) for t in targets[c]] for c in names}
    need = {c: class_counts[c] - sum(floors[c]) for c in names}
    total = sum(class_counts.values())

    col_floor = [sum(floors[c][s] for c in names) for s in range(k)]
    col_raw = [total * f for f in fractions]
    exact = _largest_remainder(total, fractions)

    # candidate round-up choices per class, most-preferred first
    options = {}
    for c in names:
        eligible = [s for s in range(k) if targets[c][s] > floors[c][s]]
        combos = list(combinations(eligible, need[c]))
        combos.sort(key=lambda cols: (-sum(targets[c][s] - floors[c][s] for s in cols), cols))
        options[c] = combos

    def search(lo: List[int], hi: List[int]) -> Optional[Dict[str, Tuple[int, ...]]]:
        chosen: Dict[str, Tuple[int, ...]] = {}
        used = [0] * k

        def rec(i: int) -> bool:
            if i == len(names):
                return all(lo[s] <= col_floor[s] + used[s] <= hi[s] for s in range(k))
            c = names[i]
            for cols in options[c]:
                if any(col_floor[s] + used[s] + 1 > hi[s] for s in cols):
                    continue
                for s in cols:
                    used[s] += 1
                chosen[c] = cols
                if rec(i + 1):
                    return True
                for s in cols:
                    used[s] -= 1
            return False

        return dict(chosen) if rec(0) else None

    chosen = search(exact, exact)
    if chosen is None:
        chosen = search([math.floor(x) for x in col_raw], [math.ceil(x) for x in col_raw])
    if chosen is None:  # pragma: no cover - the transportation polytope is integral
        raise DatasetError("no stratified rounding exists")
    alloc = {}
    for c in names:
        counts = list(floors[c])
        for s in chosen[c]:
            counts[s] += 1
        alloc[c] = counts
    return alloc


def stratified_split(
    records: Sequence[QARecord],
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Partition records into train/validation/test preserving category proportions."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    by_label: Dict[str, List[int]] = {}
    for i, r in enumerate(records):
        if r.label is None:
            raise DatasetError(f"record {r.id!r} is unlabeled")
        by_label.setdefault(_label_key(r.label), []).append(i)
    for name, idx in sorted(by_label.items()):
        if len(idx) < 3:
            raise DatasetError(f"category {name!r} has {len(idx)} records; at least 3 are needed to stratify")

    alloc = stratified_allocation({c: len(v) for c, v in by_label.items()}, fractions)
    rng = random.Random(seed)
    assignment: List[int] = [0] * len(records)
    for name in sorted(by_label):
        idx = sorted(by_label[name], key=lambda i: records[i].id)
        rng.shuffle(idx)
        n_train, n_val, _ = alloc[name]
        for j, i in enumerate(idx):
            assignment[i] = 0 if j < n_train else (1 if j < n_train + n_val else 2)
    parts: Tuple[List[QARecord], ...] = ([], [], [])
    for i, r in enumerate(records):
        parts[assignment[i]].append(r)
    return DatasetSplit(train=parts[0], validation=parts[1], test=parts[2], seed=seed)


# ---------------------------------------------------------------------------
# class imbalance


@dataclass
class ClassWeights:
    weights: Dict[Category, float]
    total_count: int
    num_categories: int = len(CATEGORIES)
    counts: Dict[Category, int] = field(default_factory=dict)

    def __getitem__(self, category: Category) -> float:
        return self.weights[category]

    def as_list(self) -> List[float]:
        return [self.weights[c] for c in CATEGORIES]

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(weights={c: 1.0 for c in CATEGORIES}, total_count=0)


def class_weights_from_counts(counts: Dict[Category, int]) -> ClassWeights:
    for c in CATEGORIES:
        if counts.get(c, 0) <= 0:
            raise DatasetError(f"category {c.value!r} has no examples; its weight is undefined")
    n = sum(counts[c] for c in CATEGORIES)
    k = len(CATEGORIES)
    weights = {c: n / (k * counts[c]) for c in CATEGORIES}
    return ClassWeights(weights=weights, total_count=n, num_categories=k, counts=dict(counts))


def compute_class_weights(records: Sequence[QARecord]) -> ClassWeights:
    """Inverse-frequency weights ``N / (|C| * count(i))``."""
    return class_weights_from_counts(Counter(r.label for r in records))


def oversample(records: Sequence[QARecord], seed: int = 0) -> List[QARecord]:
    """Duplicate minority-category records until every category matches the majority.

    Originals keep their order; duplicates are appended with fresh ids and a
    ``provenance`` pointing at the source record.
    """
    if not records:
        raise DatasetError("cannot oversample an empty record list")
    by_label: Dict[str, List[QARecord]] = {}
    for r in records:
        by_label.setdefault(_label_key(r.label), []).append(r)
    target = max(len(v) for v in by_label.values())
    rng = random.Random(seed)
    out = list(records)
    for name in sorted(by_label):
        group = by_label[name]
        deficit = target - len(group)
        if deficit == 0:
            continue
        order = list(group)
        rng.shuffle(order)
        for k in range(deficit):
            src = order[k % len(order)]
            out.append(replace(src, id=f"{src.id}#dup{k}", provenance=src.id))
    return out


def dataset_statistics(records: Sequence[QARecord]) -> Dict[str, Dict[str, int]]:
    """Per-category QA-pair and unique-entity counts, plus a ``total`` row.

    Unique entities are distinct answer strings compared case-insensitively.
    """
    stats = {c.value: {"qa_pairs": 0, "unique_entities": 0} for c in CATEGORIES}
    entities: Dict[str, set] = {c.value: set() for c in CATEGORIES}
    for r in records:
        key = _label_key(r.label)
        stats.setdefault(key, {"qa_pairs": 0, "unique_entities": 0})
        entities.setdefault(key, set())
        stats[key]["qa_pairs"] += 1
        entities[key].add(r.answer_text.casefold())
    for key, ents in entities.items():
        stats[key]["unique_entities"] = len(ents)
    stats["total"] = {
        "qa_pairs": sum(v["qa_pairs"] for v in stats.values()),
        "unique_entities": sum(len(ents) for ents in entities.values()),
    }
    return stats
