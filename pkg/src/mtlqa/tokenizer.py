"""WordPiece tokenization, question/context packing and answer-span alignment."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)
CONTINUATION = "##"
MAX_CHARS_PER_WORD = 100

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class TokenizerError(ValueError):
    pass


def pre_tokenize(text: str) -> List[Tuple[str, int, int]]:
    """Split on whitespace and punctuation; returns ``(word, start, end)``."""
    return [(m.group(), m.start(), m.end()) for m in _WORD_RE.finditer(text)]


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise TokenizerError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            dup = next(t for t, n in Counter(tokens).items() if n > 1)
            raise TokenizerError(f"duplicate vocabulary token {dup!r}")
        if any(not t or t == CONTINUATION for t in tokens[4:]):
            raise TokenizerError("vocabulary tokens must be nonempty")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def build_vocab(texts: Iterable[str], max_size: int = 8000, min_freq: int = 1) -> Vocabulary:
    """Frequency-based vocabulary over lowercased words.

    Single-character pieces (word-initial and ``##`` continuation) for every
    character seen come first so any word built from known characters stays
    encodable; whole words with frequency >= ``min_freq`` fill the remaining
    budget, most frequent first.
    """
    if max_size < 5:
        raise TokenizerError(f"max_size must be at least 5, got {max_size}")
    words: Counter = Counter()
    for text in texts:
        words.update(w.lower() for w, _, _ in pre_tokenize(text))
    chars = sorted({ch for w in words for ch in w})
    pieces = [ch for ch in chars] + [CONTINUATION + ch for ch in chars]
    ranked = sorted((w for w, n in words.items() if n >= min_freq), key=lambda w: (-words[w], w))

    tokens = list(RESERVED)
    seen = set(tokens)
    for t in pieces + ranked:
        if len(tokens) >= max_size:
            break
        if t not in seen:
            tokens.append(t)
            seen.add(t)
    return Vocabulary(tokens)


def wordpiece_tokenize(word: str, v: Vocabulary) -> List[str]:
    """Greedy longest-prefix-first decomposition of one word."""
    if len(word) > MAX_CHARS_PER_WORD:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            cand = word[start:end]
            if start > 0:
                cand = CONTINUATION + cand
            if cand in v:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize_with_offsets(text: str, v: Vocabulary) -> List[Tuple[str, int, int]]:
    """WordPiece tokens of ``text`` with character offsets into ``text``."""
    out = []
    for word, ws, we in pre_tokenize(text):
        lowered = word.lower()
        pieces = wordpiece_tokenize(lowered, v)
        if pieces == [UNK] or len(lowered) != len(word):
            # case folding changed the length: give every piece the whole word
            out.extend((p, ws, we) for p in pieces)
            continue
        pos = ws
        for p in pieces:
            n = len(p) - (len(CONTINUATION) if p.startswith(CONTINUATION) else 0)
            out.append((p, pos, pos + n))
            pos += n
    return out


def tokenize(text: str, v: Vocabulary) -> List[str]:
    return [t for t, _, _ in tokenize_with_offsets(text, v)]


@dataclass
class TokenizedPair:
    input_ids: List[int]
    segment_ids: List[int]
    attention_mask: List[int]
    offsets: List[Optional[Tuple[int, int]]]
    truncated: bool = False
    # character position up to which the context survived truncation
    context_limit: int = 0
    gold_span: Optional[Tuple[int, int]] = None

    @property
    def max_seq_len(self) -> int:
        return len(self.input_ids)

    def context_positions(self) -> List[int]:
        return [i for i, off in enumerate(self.offsets) if off is not None]

    def window_text(self, context: str, start_tok: int, end_tok: int) -> str:
        return context[self.offsets[start_tok][0]:self.offsets[end_tok][1]]


def encode_pair(question: str, context: str, v: Vocabulary, max_seq_len: int = 128) -> TokenizedPair:
    """Pack ``[CLS] question [SEP] context [SEP]`` and pad to ``max_seq_len``.

    Only the context is truncated, from the right.
    """
    q = [t for t, _, _ in tokenize_with_offsets(question, v)]
    budget = max_seq_len - len(q) - 3
    if budget < 0:
        raise TokenizerError(
            f"question needs {len(q) + 3} positions including special tokens; max_seq_len is {max_seq_len}"
        )
    c = tokenize_with_offsets(context, v)
    truncated = len(c) > budget
    c = c[:budget]

    ids = [CLS_ID] + [v.id(t) for t in q] + [SEP_ID]
    segments = [0] * len(ids)
    offsets: List[Optional[Tuple[int, int]]] = [None] * len(ids)
    for tok, s, e in c:
        ids.append(v.id(tok))
        segments.append(1)
        offsets.append((s, e))
    ids.append(SEP_ID)
    segments.append(1)
    offsets.append(None)

    n_real = len(ids)
    pad = max_seq_len - n_real
    limit = c[-1][2] if (truncated and c) else (0 if truncated else len(context))
    return TokenizedPair(
        input_ids=ids + [PAD_ID] * pad,
        segment_ids=segments + [0] * pad,
        attention_mask=[1] * n_real + [0] * pad,
        offsets=offsets + [None] * pad,
        truncated=truncated,
        context_limit=limit,
    )


def align_answer_span(pair: TokenizedPair, char_span: Tuple[int, int], context: Optional[str] = None):
    """Smallest inclusive token window covering ``char_span``, or None if truncated away.

    When ``context`` is given, whitespace at either end of the span is ignored.
    """
    start, end = char_span
    if context is not None:
        while start < end and context[start].isspace():
            start += 1
        while end > start and context[end - 1].isspace():
            end -= 1
    if start >= end or end > pair.context_limit:
        return None
    hits = [i for i, off in enumerate(pair.offsets) if off is not None and off[1] > start and off[0] < end]
    if not hits:
        return None
    first, last = hits[0], hits[-1]
    if pair.offsets[first][0] > start or pair.offsets[last][1] < end:
        return None
    return first, last
