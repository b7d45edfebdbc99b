"""Gazetteer-based entity recognition and answer categorization.

A deterministic offline lexicon stands in for an ontology service: each
normalized term maps to one or more ``(category, semantic type)`` entries.
Matching is token-aligned, left to right, longest match first.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from importlib import resources
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

from .corpus import CATEGORIES, SEMANTIC_TYPES, Category

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
NORMALIZATION = "lower-single-space-v1"


class GazetteerError(ValueError):
    pass


class Entry(NamedTuple):
    category: Category
    code: str


def normalize_term(text: str) -> str:
    return " ".join(text.lower().split())


def _tokens(text: str) -> List[Tuple[str, int, int]]:
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Gazetteer:
    """Immutable term table. Build with :func:`build_gazetteer`."""

    def __init__(self, table: Dict[str, Tuple[Entry, ...]]):
        self._table = dict(table)
        self._by_tokens: Dict[Tuple[str, ...], str] = {}
        for term in self._table:
            self._by_tokens[tuple(t for t, _, _ in _tokens(term))] = term
        self.max_tokens = max((len(k) for k in self._by_tokens), default=0)
        self.normalization = NORMALIZATION

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, term: str) -> bool:
        return normalize_term(term) in self._table

    def lookup(self, term: str) -> Tuple[Entry, ...]:
        return self._table.get(normalize_term(term), ())

    def lookup_tokens(self, tokens: Tuple[str, ...]) -> Tuple[Entry, ...]:
        term = self._by_tokens.get(tokens)
        return self._table[term] if term is not None else ()

    def terms(self, category: Optional[Category] = None) -> List[str]:
        return sorted(
            t for t, entries in self._table.items()
            if category is None or any(e.category == category for e in entries)
        )

    def entries(self) -> List[Tuple[str, Category, str]]:
        return [(t, e.category, e.code) for t in sorted(self._table) for e in self._table[t]]


def _parse_category(value) -> Category:
    if isinstance(value, Category):
        return value
    try:
        return Category(str(value).strip().lower())
    except ValueError:
        raise GazetteerError(f"unknown category {value!r}") from None


def build_gazetteer(entries: Iterable[Tuple[str, object, str]]) -> Gazetteer:
    """Normalize and validate ``(term, category, code)`` triples.

    A term may carry several categories. The same term and category with two
    different codes is a collision and is rejected.
    """
    table: Dict[str, List[Entry]] = {}
    for term, category, code in entries:
        cat = _parse_category(category)
        code = code.strip().upper()
        if code not in SEMANTIC_TYPES[cat]:
            allowed = ", ".join(SEMANTIC_TYPES[cat])
            raise GazetteerError(
                f"code {code} is not a {cat.value} semantic type (the {cat.value} row lists {allowed})"
            )
        key = normalize_term(term)
        if not key:
            raise GazetteerError("empty gazetteer term")
        bucket = table.setdefault(key, [])
        for e in bucket:
            if e.category == cat:
                if e.code != code:
                    raise GazetteerError(f"term {key!r} listed under {cat.value} with codes {e.code} and {code}")
                break
        else:
            bucket.append(Entry(cat, code))
    return Gazetteer({k: tuple(sorted(v, key=lambda e: e.category.index)) for k, v in table.items()})


def read_gazetteer_csv(text: str) -> Gazetteer:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["term", "category", "code"]:
        raise GazetteerError("gazetteer CSV must have header 'term,category,code'")
    return build_gazetteer((row["term"], row["category"], row["code"]) for row in reader)


def load_gazetteer(path) -> Gazetteer:
    with open(path, encoding="utf-8") as f:
        return read_gazetteer_csv(f.read())


def default_gazetteer() -> Gazetteer:
    """The bundled ~100-term fixture covering all five categories."""
    text = resources.files("mtlqa").joinpath("data/gazetteer.csv").read_text(encoding="utf-8")
    return read_gazetteer_csv(text)


@dataclass(frozen=True)
class MedicalEntity:
    surface: str
    char_start: int
    char_end: int
    category: Category
    code: str
    # every (category, code) the term carries, highest priority first
    entries: Tuple[Entry, ...] = ()

    @property
    def length(self) -> int:
        return self.char_end - self.char_start


def extract_entities(text: str, g: Gazetteer) -> List[MedicalEntity]:
    toks = _tokens(text)
    out = []
    i = 0
    while i < len(toks):
        hit = None
        for n in range(min(g.max_tokens, len(toks) - i), 0, -1):
            entries = g.lookup_tokens(tuple(t for t, _, _ in toks[i:i + n]))
            if entries:
                hit = (n, entries)
                break
        if hit is None:
            i += 1
            continue
        n, entries = hit
        start, end = toks[i][1], toks[i + n - 1][2]
        out.append(MedicalEntity(text[start:end], start, end, entries[0].category, entries[0].code, entries))
        i += n
    return out


def assign_category(answer: str, g: Gazetteer, fallback: Category = Category.SYMPTOMS) -> Category:
    """Category of the longest matched entity, ties broken by category order.

    Answers with no gazetteer match get ``fallback``; callers flag those
    records with :func:`is_gazetteer_miss`.
    """
    ents = extract_entities(answer, g)
    if not ents:
        return fallback
    best = min(ents, key=lambda e: (-e.length, e.category.index))
    return best.category


def is_gazetteer_miss(answer: str, g: Gazetteer) -> bool:
    return not extract_entities(answer, g)


def assign_soft_labels(answer: str, g: Gazetteer) -> Dict[Category, float]:
    """Multi-label targets in [0, 1], rescaled so the strongest category is 1.0.

    A category's mass is the character length of its longest matching entity,
    so the argmax (ties by category order) always agrees with
    :func:`assign_category`.
    """
    mass = {c: 0.0 for c in CATEGORIES}
    for ent in extract_entities(answer, g):
        for entry in ent.entries:
            mass[entry.category] = max(mass[entry.category], float(ent.length))
    top = max(mass.values())
    if top == 0:
        return mass
    return {c: m / top for c, m in mass.items()}


def argmax_category(dist: Dict[Category, float]) -> Category:
    return max(CATEGORIES, key=lambda c: (dist.get(c, 0.0), -c.index))
