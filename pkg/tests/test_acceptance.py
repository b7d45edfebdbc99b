"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import random
import string
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from mtlqa import cli
from mtlqa.corpus import (
    CATEGORIES, Category, DatasetSplit, QARecord, class_weights_from_counts, stratified_split,
)
from mtlqa.evaluation import classification_metrics, exact_match, token_f1
from mtlqa.model import EncoderConfig, decode_span, init_params
from mtlqa.synthetic import generate_synthetic_corpus
from mtlqa.tokenizer import build_vocab
from mtlqa.training import (
    Batch, LossWeights, TrainConfig, batch_loss, build_features, lr_schedule, predict, quick_metrics,
    run_ablation, train,
)

EMRQA_COUNTS = {
    Category.DIAGNOSIS: 141243,
    Category.MEDICATION: 255908,
    Category.PROCEDURE: 20540,
    Category.SYMPTOMS: 23474,
    Category.LAB_REPORT: 14672,
}


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


# ---------------------------------------------------------------------------
# 1. finite differences


def _random_batch(g, vocab_size, n=3, seq=8):
    ids = torch.randint(4, vocab_size, (n, seq), generator=g)
    lens = torch.randint(5, seq + 1, (n,), generator=g)
    mask = (torch.arange(seq)[None, :] < lens[:, None]).long()
    ids[:, 0] = 2
    ids = ids * mask
    start = torch.stack([torch.randint(1, int(l), (1,), generator=g)[0] for l in lens])
    end = torch.stack([torch.randint(int(s), int(l), (1,), generator=g)[0] for s, l in zip(start, lens)])
    labels = torch.randint(0, 5, (n,), generator=g)
    soft = torch.rand((n, 5), generator=g, dtype=torch.float64)
    return Batch(ids, torch.zeros_like(ids), mask, start, end, labels, soft)


def _fd_errors(mode, lambdas, h=1e-3, seed=0):
    model = init_params(EncoderConfig.tiny(vocab_size=16, classification_mode=mode), seed).double()
    batch = _random_batch(torch.Generator().manual_seed(seed), 16)
    weights = class_weights_from_counts({c: k + 1 for k, c in enumerate(CATEGORIES)})
    lw = LossWeights(*lambdas, weights)
    model.zero_grad()
    batch_loss(model, batch, lw)[0].backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(batch_loss(model, batch, lw)[0])
                flat[i] = orig - h
                down = float(batch_loss(model, batch, lw)[0])
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            scale = max(analytic.norm().item(), numeric.norm().item())
            errors[name] = 0.0 if scale < 1e-12 else (analytic - numeric).norm().item() / scale
    return errors


def test_c01_finite_difference_gradients(verdict):
    t0 = time.time()
    worst = {}
    for mode in ("softmax", "sigmoid"):
        for lambdas in ((1.0, 1.0), (0.5, 0.25)):
            errs = _fd_errors(mode, lambdas)
            name = max(errs, key=errs.get)
            worst[(mode, lambdas)] = (errs[name], name)
    elapsed = time.time() - t0
    top = max(e for e, _ in worst.values())
    ok = top < 1e-3 and elapsed < 60
    verdict(1, ok, f"max per-group relative error {top:.2e} (< 1e-3) over CE/BCE x 2 task weightings; {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. gradient isolation


def test_c02_gradient_isolation(verdict):
    cfg = EncoderConfig(vocab_size=40, hidden_dim=16, num_heads=2, num_shared_layers=1, num_task_layers=1,
                        feedforward_dim=32, max_seq_len=12, span_head_dims=[8], class_head_dims=[8, 5],
                        dropout_rate=0.0)
    model = init_params(cfg, 3)
    qa = model.qa_parameters()
    cls = model.class_parameters()
    shared = {n: p for n, p in model.named_parameters() if model.task_of(n) == "shared"}
    lw = LossWeights(1.0, 1.0)
    g = torch.Generator().manual_seed(11)
    leaks = 0
    shared_both = True
    for _ in range(10):
        batch = _random_batch(g, 40, n=4, seq=12)
        _, l_qa, l_cls = batch_loss(model, batch, lw)
        g_cls = torch.autograd.grad(l_cls, list(qa.values()) + list(shared.values()), allow_unused=True,
                                    retain_graph=True, materialize_grads=True)
        g_qa = torch.autograd.grad(l_qa, list(cls.values()) + list(shared.values()), allow_unused=True,
                                   materialize_grads=True)
        leaks += sum(int(torch.count_nonzero(t)) for t in g_cls[:len(qa)])
        leaks += sum(int(torch.count_nonzero(t)) for t in g_qa[:len(cls)])
        shared_both &= any(bool(t.abs().sum() > 0) for t in g_cls[len(qa):])
        shared_both &= any(bool(t.abs().sum() > 0) for t in g_qa[len(cls):])
    verdict(2, leaks == 0 and shared_both,
            f"{leaks} nonzero cross-task gradient entries on 10 inputs (must be 0); shared stack gets both: {shared_both}")


# ---------------------------------------------------------------------------
# 3. class weights


def test_c03_class_weights_emrqa_counts(verdict):
    w = class_weights_from_counts(EMRQA_COUNTS)
    n = sum(EMRQA_COUNTS.values())
    total = sum(w[c] * EMRQA_COUNTS[c] for c in CATEGORIES)
    ok = (abs(w[Category.DIAGNOSIS] - 0.6455) <= 1e-4 and abs(w[Category.LAB_REPORT] - 6.2137) <= 1e-4
          and abs(total - n) / n <= 1e-9)
    verdict(3, ok, f"w_diagnosis={w[Category.DIAGNOSIS]:.6f} w_lab_report={w[Category.LAB_REPORT]:.6f} "
                   f"sum w*count={total!r} vs N={n}")


# ---------------------------------------------------------------------------
# 4. overfit


def test_c04_overfit_sanity(verdict):
    t0 = time.time()
    records = generate_synthetic_corpus(32, seed=0)
    vocab = build_vocab(t for r in records for t in (r.question, r.context))
    enc = EncoderConfig.desk(len(vocab))
    cfg = TrainConfig(learning_rate=1e-3, epochs=100, batch_size=8, early_stop_patience=None, seed=0)
    result = train(init_params(enc, 0), DatasetSplit(records, records, [], 0), vocab, cfg)
    feats, skipped = build_features(records, vocab, enc.max_seq_len)
    m = quick_metrics(predict(result.model, feats, cfg.max_answer_len), feats)
    elapsed = time.time() - t0
    ok = not skipped and m["em"] >= 95 and m["acc"] == 100 and elapsed < 300
    verdict(4, ok, f"train EM {m['em']:.1f} (>= 95), train acc {m['acc']:.1f} (= 100) after "
                   f"{cfg.epochs} epochs (<= 300); {elapsed:.0f}s (< 300s)")


# ---------------------------------------------------------------------------
# 5. ablation directionality

ABLATION_SEEDS = (0, 1, 2)


def test_c05_ablation_directionality(verdict):
    t0 = time.time()
    corpus = generate_synthetic_corpus(2000, seed=0)
    reports = []
    for seed in ABLATION_SEEDS:
        splits = stratified_split(corpus, seed=seed)
        vocab = build_vocab(t for r in splits.train for t in (r.question, r.context))
        enc = EncoderConfig.desk(len(vocab), max_seq_len=64)
        cfg = TrainConfig(learning_rate=2e-3, epochs=12, batch_size=32, early_stop_patience=None, seed=seed)
        reports.append(run_ablation(splits, vocab, enc, cfg))
    elapsed = time.time() - t0

    def mean(cfg_name, col):
        return float(np.mean([next(r for r in rep["rows"] if r["config"] == cfg_name)[col] for rep in reports]))

    qa_only, class_only = mean("qa_only", "qa_f1"), mean("class_only", "class_acc")
    mtl_f1, mtl_acc = mean("mtl", "qa_f1"), mean("mtl", "class_acc")
    per_seed = ", ".join(f"seed {rep['seed']}: dF1 {rep['delta_f1']:+.2f} dAcc {rep['delta_acc']:+.2f}" for rep in reports)
    ok = mtl_f1 >= qa_only - 1.0 and mtl_acc >= class_only - 1.0 and elapsed < 1800
    verdict(5, ok, f"mean over seeds: MTL F1 {mtl_f1:.2f} vs QA-only {qa_only:.2f}; MTL acc {mtl_acc:.2f} vs "
                   f"class-only {class_only:.2f}; dF1 {mtl_f1 - qa_only:+.2f} / dAcc {mtl_acc - class_only:+.2f} "
                   f"(reference +2.2 / +6.2); {per_seed}; {elapsed:.0f}s (< 1800s)")


# ---------------------------------------------------------------------------
# 6. decode oracle


def _brute_decode(start, end, valid, max_len):
    best, arg = None, None
    n = len(start)
    for s in range(n):
        for e in range(s, n):
            if not (valid[s] and valid[e]) or e - s >= max_len:
                continue
            score = start[s] + end[e]
            if best is None or score > best:
                best, arg = score, (s, e)
    return arg


def test_c06_decode_oracle(verdict):
    rng = random.Random(6)
    mismatches = 0
    for i in range(1000):
        n = rng.randint(1, 16)
        valid = [rng.random() < 0.7 for _ in range(n)]
        if not any(valid):
            valid[rng.randrange(n)] = True
        if i % 2:
            # integer logits force ties
            start = [float(rng.randint(-2, 2)) for _ in range(n)]
            end = [float(rng.randint(-2, 2)) for _ in range(n)]
        else:
            start = [rng.gauss(0, 1) for _ in range(n)]
            end = [rng.gauss(0, 1) for _ in range(n)]
        max_len = rng.randint(1, 17)
        got = decode_span(torch.tensor(start), torch.tensor(end), valid, max_len)
        s32 = [float(np.float32(x)) for x in start]
        e32 = [float(np.float32(x)) for x in end]
        if tuple(got) != _brute_decode(s32, e32, valid, max_len):
            mismatches += 1
    verdict(6, mismatches == 0, f"{mismatches} mismatches against exhaustive search on 1000 instances")


# ---------------------------------------------------------------------------
# 7. metric oracles

_WORDS = ["Lisinopril", "10mg", "daily", "the", "a", "Tylenol", "500mg", "pain", "x"]


def _rand_text(rng):
    parts = []
    for _ in range(rng.randint(0, 6)):
        w = rng.choice(_WORDS)
        if rng.random() < 0.3:
            w = w.upper()
        if rng.random() < 0.3:
            w += rng.choice(string.punctuation)
        parts.append(w)
    return rng.choice([" ", "  ", "\t"]).join(parts)


def _oracle_norm(s):
    kept = "".join(ch for ch in s.lower() if ch not in string.punctuation)
    return kept.split()


def _oracle_f1(p, g):
    p, g = _oracle_norm(p), _oracle_norm(g)
    if not p and not g:
        return 1.0
    remaining = list(g)
    common = 0
    for tok in p:
        if tok in remaining:
            remaining.remove(tok)
            common += 1
    if common == 0:
        return 0.0
    prec, rec = common / len(p), common / len(g)
    return 2 * prec * rec / (prec + rec)


def _oracle_classification(pred, gold, labels):
    n = len(gold)
    conf = {(a, b): 0 for a in labels for b in labels}
    for p, g in zip(pred, gold):
        conf[(g, p)] += 1
    acc = sum(conf[(c, c)] for c in labels) / n
    wf1 = 0.0
    per = {}
    for c in labels:
        tp = conf[(c, c)]
        col = sum(conf[(g, c)] for g in labels)
        row = sum(conf[(c, p)] for p in labels)
        prec = tp / col if col else 0.0
        rec = tp / row if row else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per[c] = (prec, rec, f1, row)
        wf1 += f1 * (row / n)
    return acc, wf1, per


def test_c07_metric_oracles(verdict):
    rng = random.Random(7)
    bad_f1 = bad_em = bad_cls = 0
    for _ in range(1000):
        p, g = _rand_text(rng), _rand_text(rng)
        if rng.random() < 0.2:
            g = p.upper() + "."
        bad_f1 += token_f1(p, g) != _oracle_f1(p, g)
        bad_em += exact_match(p, g) != int(_oracle_norm(p) == _oracle_norm(g))
    labels = list(CATEGORIES)
    for _ in range(1000):
        n = rng.randint(1, 50)
        gold = [rng.choice(labels) for _ in range(n)]
        pred = [rng.choice(labels) for _ in range(n)]
        m = classification_metrics(pred, gold, labels)
        acc, wf1, per = _oracle_classification(pred, gold, labels)
        same = m.accuracy == acc and abs(m.weighted_f1 - wf1) == 0 and all(
            (m.per_class[c].precision, m.per_class[c].recall, m.per_class[c].f1, m.per_class[c].support) == per[c]
            for c in labels)
        bad_cls += not same
    verdict(7, bad_f1 == bad_em == bad_cls == 0,
            f"mismatches: token_f1 {bad_f1}, exact_match {bad_em}, classification_metrics {bad_cls} (1000 cases each)")


# ---------------------------------------------------------------------------
# 8. schedule


def test_c08_schedule_worked_values(verdict):
    base = 5e-5
    got = (lr_schedule(50, 1000, base, 0.1), lr_schedule(100, 1000, base, 0.1), lr_schedule(550, 1000, base, 0.1))
    want = (0.5 * base, base, base * (1 - 450 / 900))
    verdict(8, got == want, f"lr at steps 50/100/550 = {got}, expected {want}")


# ---------------------------------------------------------------------------
# 9. pipeline determinism


def _pipeline(root: Path):
    root.mkdir()
    raw = root / "raw.jsonl"
    cfg = root / "cfg.json"
    cfg.write_text('{"epochs": 2, "learning_rate": 0.002, "batch_size": 16, "max_seq_len": 64}')
    steps = [
        ["generate", "--size", "150", "--seed", "5", "--out", str(raw)],
        ["preprocess", "--input", str(raw), "--out", str(root / "data"), "--seed", "5", "--max-seq-len", "64"],
        ["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")],
        ["eval", "--checkpoint", str(root / "run" / "model.ckpt"), "--vocab", str(root / "data" / "vocab.txt"),
         "--split", str(root / "data" / "test.jsonl"), "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p != cfg}


def test_c09_pipeline_determinism(verdict, tmp_path, capsys):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    capsys.readouterr()
    differing = sorted(str(k) for k in set(a) | set(b) if a.get(k) != b.get(k))
    verdict(9, not differing and len(a) >= 10,
            f"{len(a)} output files compared (JSONL, checkpoints, reports); differing: {differing or 'none'}")


# ---------------------------------------------------------------------------
# 10. stratification


def test_c10_stratified_split_fuzz(verdict):
    rng = random.Random(10)
    fractions = (0.8, 0.1, 0.1)
    failures = 0
    worst = 0.0
    for trial in range(1000):
        present = [c for c in CATEGORIES if rng.random() < 0.8] or [rng.choice(CATEGORIES)]
        counts = {c: rng.randint(3, 60) for c in present}
        records = []
        for c, k in counts.items():
            for j in range(k):
                records.append(QARecord(id=f"{c.value}-{j}", question="q?", context="x y", answer_text="x",
                                        answer_char_start=0, answer_char_end=1, label=c))
        rng.shuffle(records)
        split = stratified_split(records, fractions, seed=trial)
        ids = [r.id for part in split.parts() for r in part]
        ok = len(ids) == len(set(ids)) and set(ids) == {r.id for r in records}
        for part, f in zip(split.parts(), fractions):
            have = Counter(r.label for r in part)
            for c, n_c in counts.items():
                dev = abs(have[c] - n_c * f)
                worst = max(worst, dev)
                ok &= dev <= 1 + 1e-9
        failures += not ok
    verdict(10, failures == 0, f"{1000 - failures}/1000 fuzzed corpora within +-1 record per category "
                               f"(worst deviation {worst:.2f}), union/disjointness held")
