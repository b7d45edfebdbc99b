import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlqa.tokenizer import (
    CLS_ID, PAD_ID, RESERVED, SEP_ID, UNK, TokenizerError, Vocabulary, align_answer_span, build_vocab,
    encode_pair, pre_tokenize, tokenize, tokenize_with_offsets, wordpiece_tokenize,
)

QUESTION = "What medication was prescribed for hypertension?"
CONTEXT = "The patient was diagnosed with hypertension and prescribed Lisinopril 10mg daily."
ANSWER = "Lisinopril 10mg daily"


def vocab_of(*tokens):
    return Vocabulary(list(RESERVED) + list(tokens))


def test_build_vocab_contains_words():
    v = build_vocab(["aaa aaa bbb"], max_size=20)
    assert "aaa" in v and "bbb" in v
    assert v.tokens[:4] == list(RESERVED)


def test_empty_corpus_reserved_only():
    assert len(build_vocab([])) == 4
    with pytest.raises(TokenizerError):
        build_vocab(["x"], max_size=4)


def test_build_vocab_deterministic_and_frequency_ordered():
    texts = ["b a a c a b", "d"]
    v1, v2 = build_vocab(texts), build_vocab(list(texts))
    assert v1 == v2 and v1.fingerprint() == v2.fingerprint()
    words = [t for t in v1.tokens[4:] if len(t) > 1 and not t.startswith("##")]
    assert words == []  # all single characters already covered
    v = build_vocab(["zz zz yy"], max_size=100)
    assert v.tokens.index("zz") < v.tokens.index("yy")


def test_min_freq_and_size_cap():
    v = build_vocab(["alpha alpha beta"], max_size=100, min_freq=2)
    assert "alpha" in v and "beta" not in v
    assert tokenize("beta", v) == ["b", "##e", "##t", "##a"]
    assert len(build_vocab(["many different words here"], max_size=10)) == 10


def test_vocab_validation_and_file_round_trip(tmp_path):
    with pytest.raises(TokenizerError):
        Vocabulary(["a", "b", "c", "d"])
    with pytest.raises(TokenizerError, match="duplicate"):
        vocab_of("x", "x")
    v = build_vocab([CONTEXT])
    p = tmp_path / "vocab.txt"
    v.save(p)
    assert p.read_text().splitlines()[2] == "[CLS]"
    assert Vocabulary.load(p) == v


def test_wordpiece_examples():
    v = vocab_of("lis", "##ino", "##pril", "aspirin")
    assert wordpiece_tokenize("lisinopril", v) == ["lis", "##ino", "##pril"]
    assert wordpiece_tokenize("aspirin", v) == ["aspirin"]
    assert wordpiece_tokenize("qqq", v) == [UNK]


def test_wordpiece_greedy_longest_prefix():
    v = vocab_of("a", "ab", "abc", "##c", "##d", "##cd")
    assert wordpiece_tokenize("abcd", v) == ["abc", "##d"]
    assert wordpiece_tokenize("abd", v) == ["ab", "##d"]


def _oracle_wordpiece(word, vocab_set):
    out, i = [], 0
    while i < len(word):
        for j in range(len(word), i, -1):
            piece = word[i:j] if i == 0 else "##" + word[i:j]
            if piece in vocab_set:
                out.append(piece)
                i = j
                break
        else:
            return [UNK]
    return out


@given(st.text("abc", min_size=1, max_size=8),
       st.sets(st.text("abc", min_size=1, max_size=3).flatmap(lambda s: st.sampled_from([s, "##" + s])), max_size=12))
def test_wordpiece_matches_oracle(word, pieces):
    v = vocab_of(*sorted(pieces))
    assert wordpiece_tokenize(word, v) == _oracle_wordpiece(word, set(pieces))


def test_pre_tokenize_splits_punctuation():
    assert [w for w, _, _ in pre_tokenize("10mg, daily.")] == ["10mg", ",", "daily", "."]


def test_encode_worked_example():
    v = build_vocab([QUESTION, CONTEXT])
    pair = encode_pair(QUESTION, CONTEXT, v, 40)
    real = [i for i, m in zip(pair.input_ids, pair.attention_mask) if m]
    assert pair.input_ids[0] == CLS_ID
    assert real.count(SEP_ID) == 2
    q_len = len(tokenize(QUESTION, v))
    assert pair.input_ids[q_len + 1] == SEP_ID
    n_real = len(real)
    assert pair.segment_ids[:q_len + 2] == [0] * (q_len + 2)
    assert pair.segment_ids[q_len + 2:n_real] == [1] * (n_real - q_len - 2)
    assert len(pair.input_ids) == 40 and pair.input_ids[n_real:] == [PAD_ID] * (40 - n_real)
    assert not pair.truncated
    assert all(off is None for off in pair.offsets[:q_len + 2])


def test_encode_empty_context():
    v = build_vocab(["what is it"])
    pair = encode_pair("what is it", "", v, 10)
    assert pair.input_ids[:6] == [CLS_ID, v.id("what"), v.id("is"), v.id("it"), SEP_ID, SEP_ID]
    assert pair.context_positions() == []


def test_encode_truncates_context_only():
    v = build_vocab([QUESTION, CONTEXT])
    q_len = len(tokenize(QUESTION, v))
    pair = encode_pair(QUESTION, CONTEXT, v, q_len + 3 + 5)
    assert pair.truncated
    ctx = pair.context_positions()
    assert len(ctx) == 5
    assert pair.offsets[ctx[-1]][1] <= pair.context_limit
    with pytest.raises(TokenizerError, match="question"):
        encode_pair(QUESTION, CONTEXT, v, q_len + 2)


def test_align_single_token_and_multi_piece_answer():
    v = build_vocab([QUESTION, CONTEXT])
    pair = encode_pair(QUESTION, CONTEXT, v, 48)
    s = CONTEXT.index("patient")
    a, b = align_answer_span(pair, (s, s + 7))
    assert a == b
    start = CONTEXT.index(ANSWER)
    a, b = align_answer_span(pair, (start, start + len(ANSWER)))
    assert b - a + 1 >= 3
    assert ANSWER.lower() in pair.window_text(CONTEXT, a, b).lower()


def test_align_beyond_truncation_is_none():
    v = build_vocab([QUESTION, CONTEXT])
    q_len = len(tokenize(QUESTION, v))
    pair = encode_pair(QUESTION, CONTEXT, v, q_len + 3 + 4)
    start = CONTEXT.index(ANSWER)
    assert align_answer_span(pair, (start, start + len(ANSWER))) is None


def test_align_with_unknown_pieces_and_subword_split():
    v = vocab_of("the", "pat", "##ient", "a")
    ctx = "the patient zz"
    pair = encode_pair("a", ctx, v, 12)
    assert align_answer_span(pair, (4, 11)) == (4, 5)
    assert pair.window_text(ctx, *align_answer_span(pair, (12, 14))) == "zz"


_WORD = st.text("abcdeéXY1", min_size=1, max_size=6)


@settings(max_examples=1000, deadline=None)
@given(st.lists(_WORD, min_size=1, max_size=12), st.data())
def test_aligned_window_contains_answer(words, data):
    context = " ".join(words)
    i = data.draw(st.integers(0, len(words) - 1))
    j = data.draw(st.integers(i, len(words) - 1))
    start = sum(len(w) + 1 for w in words[:i])
    end = sum(len(w) + 1 for w in words[:j + 1]) - 1
    vocab_words = data.draw(st.lists(_WORD, max_size=8))
    v = build_vocab(vocab_words + ["q"], max_size=data.draw(st.integers(5, 40)))
    max_len = data.draw(st.integers(4, 20))
    pair = encode_pair("q", context, v, max_len)
    assert len(pair.input_ids) == max_len
    for k, off in enumerate(pair.offsets):
        if off is not None:
            assert pair.segment_ids[k] == 1 and pair.input_ids[k] not in (CLS_ID, SEP_ID, PAD_ID)
    span = align_answer_span(pair, (start, end))
    if span is None:
        assert pair.truncated
    else:
        assert context[start:end] in pair.window_text(context, *span)
    assert encode_pair("q", context, v, max_len) == pair


def test_offsets_cover_text():
    v = build_vocab(["alpha beta"])
    assert tokenize_with_offsets("Alpha, beep", v) == [
        ("alpha", 0, 5), (UNK, 5, 6), ("b", 7, 8), ("##e", 8, 9), ("##e", 9, 10), ("##p", 10, 11),
    ]
    # a word with an unseen character collapses to one unknown token spanning the word
    assert tokenize_with_offsets("gamma", v) == [(UNK, 0, 5)]
