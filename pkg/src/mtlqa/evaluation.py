"""Span and classification metrics, per-class tables and the error taxonomy."""

from __future__ import annotations

import csv
import io
import json
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Hashable, Optional, Sequence

from .corpus import CATEGORIES, Category, QARecord
from .tokenizer import UNK, Vocabulary, tokenize

_PUNCT = re.compile("[%s]" % re.escape(string.punctuation))


def normalize_answer(s: str) -> str:
    """Lowercase, drop ASCII punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub("", s.lower()).split())


def _overlap(predicted: str, gold: str):
    p = normalize_answer(predicted).split()
    g = normalize_answer(gold).split()
    common = sum((Counter(p) & Counter(g)).values())
    return p, g, common


def token_f1(predicted: str, gold: str) -> float:
    p, g, common = _overlap(predicted, gold)
    if not p and not g:
        return 1.0
    if not p or not g or common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(g)
    return 2 * precision * recall / (precision + recall)


def token_recall(predicted: str, gold: str) -> float:
    p, g, common = _overlap(predicted, gold)
    if not g:
        return 1.0 if not p else 0.0
    return common / len(g)


def exact_match(predicted: str, gold: str) -> int:
    return int(normalize_answer(predicted) == normalize_answer(gold))


@dataclass
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationMetrics:
    accuracy: float
    weighted_f1: float
    recall: float
    per_class: Dict[Hashable, ClassStats]


def classification_metrics(
    pred: Sequence[Hashable], gold: Sequence[Hashable], labels: Optional[Sequence[Hashable]] = None
) -> ClassificationMetrics:
    """One-vs-rest precision/recall/F1 per class; support-weighted averages.

    Classes with zero support contribute nothing to the weighted averages.
    Precision of a never-predicted class is 0.
    """
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise ValueError("classification_metrics needs at least one example")
    n = len(gold)
    if labels is None:
        labels = sorted(set(gold) | set(pred), key=str)
    tp = Counter(p for p, g in zip(pred, gold) if p == g)
    n_pred = Counter(pred)
    n_gold = Counter(gold)
    per_class = {}
    wf1 = wrec = 0.0
    for c in labels:
        prec = tp[c] / n_pred[c] if n_pred[c] else 0.0
        rec = tp[c] / n_gold[c] if n_gold[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[c] = ClassStats(prec, rec, f1, n_gold[c])
        share = n_gold[c] / n
        wf1 += f1 * share
        wrec += rec * share
    accuracy = sum(tp.values()) / n
    return ClassificationMetrics(accuracy=accuracy, weighted_f1=wf1, recall=wrec, per_class=per_class)


class ErrorCategory(str, Enum):
    AMBIGUOUS_ANSWER = "ambiguous_answer"
    SPAN_BOUNDARY = "span_boundary"
    WRONG_CLASS = "wrong_class"
    OOV_TERM = "oov_term"
    OTHER = "other"


def categorize_error(
    record: QARecord,
    pred_span: str,
    pred_label: Optional[Category],
    all_gold_answers: Optional[Sequence[str]] = None,
    vocab: Optional[Vocabulary] = None,
) -> Optional[ErrorCategory]:
    """First matching rule of the taxonomy, or None for a fully correct prediction."""
    gold = record.answer_text
    em = exact_match(pred_span, gold)
    label_ok = pred_label == record.label
    if em and label_ok:
        return None
    alternatives = [a for a in (all_gold_answers or record.gold_answers) if exact_match(a, gold) == 0]
    if not em and any(exact_match(pred_span, a) for a in alternatives):
        return ErrorCategory.AMBIGUOUS_ANSWER
    if not em and token_f1(pred_span, gold) > 0:
        return ErrorCategory.SPAN_BOUNDARY
    if em and not label_ok:
        return ErrorCategory.WRONG_CLASS
    if vocab is not None and UNK in tokenize(gold, vocab):
        return ErrorCategory.OOV_TERM
    return ErrorCategory.OTHER


@dataclass
class Prediction:
    id: str
    answer_text: str
    label: Category
    scores: Dict[Category, float] = field(default_factory=dict)
    start_tok: Optional[int] = None
    end_tok: Optional[int] = None


@dataclass
class EvalReport:
    qa: Dict[str, float]
    classification: Dict[str, float]
    per_class: Dict[str, Dict[str, float]]
    errors: Dict[str, Dict[str, float]]
    n_examples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False) + "\n"

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "precision", "recall", "f1", "support"])
        for cat, row in self.per_class.items():
            w.writerow([cat, f"{row['precision']:.4f}", f"{row['recall']:.4f}", f"{row['f1']:.4f}", row["support"]])
        return buf.getvalue()

    def errors_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["error_type", "count", "percentage"])
        for name, row in self.errors.items():
            w.writerow([name, int(row["count"]), f"{row['percentage']:.2f}"])
        return buf.getvalue()


def build_report(
    predictions: Sequence[Prediction], records: Sequence[QARecord], vocab: Optional[Vocabulary] = None
) -> EvalReport:
    """Aggregate span metrics, classification metrics and error counts (percentages)."""
    if not predictions:
        raise ValueError("build_report needs at least one prediction")
    by_id = {r.id: r for r in records}
    missing = [p.id for p in predictions if p.id not in by_id]
    if missing or len(predictions) != len(records):
        raise ValueError(f"predictions and gold records are not aligned (unmatched ids: {missing[:3]})")
    golds = [by_id[p.id] for p in predictions]
    n = len(predictions)

    f1 = sum(token_f1(p.answer_text, g.answer_text) for p, g in zip(predictions, golds)) / n
    em = sum(exact_match(p.answer_text, g.answer_text) for p, g in zip(predictions, golds)) / n
    rec = sum(token_recall(p.answer_text, g.answer_text) for p, g in zip(predictions, golds)) / n
    cm = classification_metrics([p.label for p in predictions], [g.label for g in golds], labels=CATEGORIES)

    counts: Counter = Counter()
    for p, g in zip(predictions, golds):
        err = categorize_error(g, p.answer_text, p.label, g.gold_answers, vocab)
        if err is not None:
            counts[err] += 1
    n_err = sum(counts.values())
    errors = {
        e.value: {"count": counts[e], "percentage": 100.0 * counts[e] / n_err}
        for e in ErrorCategory if counts[e]
    }
    return EvalReport(
        qa={"token_f1": 100 * f1, "exact_match": 100 * em, "recall": 100 * rec},
        classification={"accuracy": 100 * cm.accuracy, "weighted_f1": 100 * cm.weighted_f1, "recall": 100 * cm.recall},
        per_class={
            c.value: {
                "precision": 100 * s.precision, "recall": 100 * s.recall, "f1": 100 * s.f1, "support": s.support,
            }
            for c, s in cm.per_class.items()
        },
        errors=errors,
        n_examples=n,
    )
