"""Command-line entry point: generate, preprocess, train, eval, predict, ablate.

Configuration comes from an optional flat JSON file whose keys are
``TrainConfig``/``EncoderConfig`` field names; command-line flags win.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

import torch

from .categorizer import Gazetteer, assign_category, assign_soft_labels, default_gazetteer, is_gazetteer_miss, load_gazetteer
from .corpus import (
    CATEGORIES, DatasetError, DatasetSplit, QARecord, dataset_statistics, load_jsonl, save_jsonl, stratified_split,
)
from .evaluation import build_report
from .model import EncoderConfig, decode_span, init_params, load_checkpoint, save_checkpoint
from .synthetic import generate_synthetic_corpus
from .tokenizer import TokenizerError, Vocabulary, build_vocab, encode_pair
from .training import (
    TrainConfig, TrainState, TrainingDiverged, build_features, predict, run_ablation, train,
)

SPLIT_FILES = ("train.jsonl", "validation.jsonl", "test.jsonl")
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
ENCODER_FIELDS = {f.name for f in fields(EncoderConfig)} - {"vocab_size"}
DESK_DEFAULTS = {"max_seq_len": 128}


class UsageError(Exception):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _merge(cfg: dict, args: argparse.Namespace, names) -> dict:
    out = dict(cfg)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def split_config(cfg: dict, vocab_size: int):
    train_kw = {k: v for k, v in cfg.items() if k in TRAIN_FIELDS}
    enc_kw = {k: v for k, v in cfg.items() if k in ENCODER_FIELDS}
    if "classification_mode" in cfg:
        enc_kw["classification_mode"] = cfg["classification_mode"]
    return TrainConfig(**train_kw), EncoderConfig(vocab_size=vocab_size, **{**DESK_DEFAULTS, **enc_kw})


# ---------------------------------------------------------------------------
# subcommands


def label_record(r: QARecord, g: Gazetteer) -> QARecord:
    """Gazetteer labeling of one record's answer; unmatched answers keep any given label."""
    miss = is_gazetteer_miss(r.answer_text, g)
    if miss:
        label = r.label if r.label is not None else assign_category(r.answer_text, g)
    else:
        label = assign_category(r.answer_text, g)
    soft = assign_soft_labels(r.answer_text, g)
    if miss:
        soft = {c: (1.0 if c == label else 0.0) for c in CATEGORIES} if r.label is not None else soft
    return QARecord(
        id=r.id, question=r.question, context=r.context, answer_text=r.answer_text,
        answer_char_start=r.answer_char_start, answer_char_end=r.answer_char_end,
        label=label, soft_labels=soft, all_gold_answers=r.all_gold_answers, provenance=r.provenance,
        gazetteer_miss=miss,
    )


def cmd_generate(args) -> int:
    mix = None
    if args.mix == "uniform":
        mix = {c: 1 / len(CATEGORIES) for c in CATEGORIES}
    g = load_gazetteer(args.gazetteer) if args.gazetteer else default_gazetteer()
    records = generate_synthetic_corpus(args.size, mix=mix, seed=args.seed or 0, gazetteer=g)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def preprocess(raw: List[QARecord], g: Gazetteer, out: Path, seed: int, max_seq_len: int,
               vocab_size: int = 8000, min_freq: int = 1) -> dict:
    """Label, split, build the vocabulary, align spans and write everything under ``out``."""
    labeled = []
    for r in raw:
        try:
            labeled.append(label_record(r, g))
        except DatasetError as e:
            raise DatasetError(f"record {r.id!r}: {e}") from None
    splits = stratified_split(labeled, seed=seed)
    vocab = build_vocab((t for r in splits.train for t in (r.question, r.context)), vocab_size, min_freq)

    out.mkdir(parents=True, exist_ok=True)
    kept_parts, skipped = [], []
    for part in splits.parts():
        try:
            feats, dropped = build_features(part, vocab, max_seq_len)
        except TokenizerError as e:
            raise DatasetError(str(e)) from None
        kept = {f.record.id for f in feats}
        kept_parts.append([r for r in part if r.id in kept])
        skipped.extend(dropped)
    for name, part in zip(SPLIT_FILES, kept_parts):
        save_jsonl(out / name, part)
    save_jsonl(out / "skipped.jsonl", skipped)
    vocab.save(out / "vocab.txt")
    all_kept = [r for part in kept_parts for r in part]
    stats = {
        "categories": dataset_statistics(all_kept),
        "splits": {name.split(".")[0]: len(part) for name, part in zip(SPLIT_FILES, kept_parts)},
        "skipped": len(skipped),
        "gazetteer_misses": sum(r.gazetteer_miss for r in all_kept),
        "vocab_size": len(vocab),
        "seed": seed,
        "max_seq_len": max_seq_len,
    }
    _dump_json(out / "stats.json", stats)
    return stats


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    if not Path(args.input).is_file():
        raise UsageError(f"dataset not found: {args.input}")
    if args.gazetteer and not Path(args.gazetteer).is_file():
        raise UsageError(f"gazetteer not found: {args.gazetteer}")
    g = load_gazetteer(args.gazetteer) if args.gazetteer else default_gazetteer()
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    max_seq_len = args.max_seq_len or cfg.get("max_seq_len", DESK_DEFAULTS["max_seq_len"])
    raw = load_jsonl(args.input, require_label=False)
    stats = preprocess(raw, g, Path(args.out), seed, max_seq_len,
                       args.vocab_size or cfg.get("vocab_size", 8000), args.min_freq or cfg.get("min_freq", 1))
    print(json.dumps(stats["splits"], sort_keys=True))
    if stats["skipped"]:
        print(f"skipped {stats['skipped']} records whose answers were truncated (see skipped.jsonl)", file=sys.stderr)
    return 0


def _data_dir(args, cfg) -> Path:
    data = args.data or cfg.get("data")
    if not data or not Path(data).is_dir() or not all((Path(data) / f).is_file() for f in SPLIT_FILES):
        raise UsageError(f"dataset directory not found or incomplete: {data}")
    return Path(data)


def _load_splits(data: Path, seed: int) -> DatasetSplit:
    parts = [load_jsonl(data / f) for f in SPLIT_FILES]
    return DatasetSplit(*parts, seed=seed)


def cmd_train(args) -> int:
    cfg = _merge(load_config(args.config), args, ("seed", "epochs", "learning_rate", "batch_size"))
    data = _data_dir(args, cfg)
    out = Path(args.out or cfg.get("out", "runs/train"))
    vocab = Vocabulary.load(data / "vocab.txt")
    tcfg, enc = split_config(cfg, len(vocab))
    splits = _load_splits(data, tcfg.seed)

    state = best = None
    if args.resume:
        model, meta, extra = load_checkpoint(args.resume)
        if meta.get("vocab_fingerprint") != vocab.fingerprint():
            raise DatasetError("checkpoint was trained with a different vocabulary")
        state = TrainState.from_checkpoint(meta, extra)
        best_path = Path(args.resume).with_name("model.ckpt")
        if best_path.is_file():
            best = load_checkpoint(best_path)[0].state_dict()
        saved = meta["train_config"]
        if args.epochs is not None:
            saved["epochs"] = args.epochs
        tcfg = TrainConfig(**saved)
    else:
        model = init_params(enc, tcfg.seed)

    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if state is None:
        log_path.write_text("", encoding="utf-8")

    def on_epoch(entry):
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    result = train(model, splits, vocab, tcfg, state=state, on_epoch=on_epoch, best_state_dict=best,
                   stop_after=args.stop_after)
    meta = {
        "vocab_fingerprint": vocab.fingerprint(),
        "train_config": tcfg.to_dict(),
        "train_state": result.state.to_meta(),
        "best_epoch": result.best_epoch,
    }
    save_checkpoint(out / "model.ckpt", result.model, meta)
    last = init_params(result.model.config, 0)
    last.load_state_dict(result.last_state_dict)
    save_checkpoint(out / "last.ckpt", last, meta, extra_tensors=result.state.moment_tensors())
    print(f"best epoch {result.best_epoch}; checkpoint written to {out / 'model.ckpt'}")
    return 0


def _load_model_and_vocab(args):
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.vocab).is_file():
        raise UsageError(f"vocabulary not found: {args.vocab}")
    model, meta, _ = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    fp = meta.get("vocab_fingerprint")
    if len(vocab) != model.config.vocab_size or (fp is not None and fp != vocab.fingerprint()):
        raise DatasetError("vocabulary does not match the checkpoint")
    model.eval()
    return model, meta, vocab


def cmd_eval(args) -> int:
    model, meta, vocab = _load_model_and_vocab(args)
    if not Path(args.split).is_file():
        raise UsageError(f"split file not found: {args.split}")
    records = load_jsonl(args.split)
    feats, skipped = build_features(records, vocab, model.config.max_seq_len)
    if not feats:
        raise DatasetError("no evaluable records in split")
    max_len = meta.get("train_config", {}).get("max_answer_len", 30)
    preds = predict(model, feats, max_len)
    report = build_report(preds, [f.record for f in feats], vocab)
    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "per_class.csv").write_text(report.per_class_csv(), encoding="utf-8")
    (out / "errors.csv").write_text(report.errors_csv(), encoding="utf-8")
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps({"id": p.id, "answer_text": p.answer_text, "label": p.label.value}) + "\n")
    print(json.dumps({"qa": report.qa, "classification": report.classification}, sort_keys=True))
    if skipped:
        print(f"{len(skipped)} records skipped: answer truncated away", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    if not args.question or not args.question.strip():
        raise UsageError("question must be nonempty")
    model, meta, vocab = _load_model_and_vocab(args)
    pair = encode_pair(args.question, args.context, vocab, model.config.max_seq_len)
    if pair.truncated:
        print("warning: context truncated to fit max_seq_len", file=sys.stderr)
    if not pair.context_positions():
        raise DatasetError("context is empty after tokenization")
    with torch.no_grad():
        ids, seg, mask = (torch.tensor([x]) for x in (pair.input_ids, pair.segment_ids, pair.attention_mask))
        out = model.encode(ids, seg, mask)
        spans = model.span_logits(out, mask)
        scores = model.class_scores(model.class_logits(out))[0].tolist()
    max_len = meta.get("train_config", {}).get("max_answer_len", 30)
    s, e = decode_span(spans.start[0], spans.end[0], [o is not None for o in pair.offsets], max_len)
    label = CATEGORIES[max(range(len(CATEGORIES)), key=lambda k: (scores[k], -k))]
    print(json.dumps({
        "answer": pair.window_text(args.context, s, e),
        "label": label.value,
        "scores": {c.value: scores[k] for k, c in enumerate(CATEGORIES)},
        "truncated": pair.truncated,
    }))
    return 0


def cmd_ablate(args) -> int:
    cfg = _merge(load_config(args.config), args, ("seed", "epochs", "learning_rate", "batch_size"))
    data = _data_dir(args, cfg)
    out = Path(args.out or cfg.get("out", "runs/ablate"))
    vocab = Vocabulary.load(data / "vocab.txt")
    tcfg, enc = split_config(cfg, len(vocab))
    splits = _load_splits(data, tcfg.seed)
    report = run_ablation(splits, vocab, enc, tcfg, search=args.search)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "ablation.json", report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "qa_f1", "class_acc"])
    for row in report["rows"]:
        w.writerow([row["config"],
                    "NA" if row["qa_f1"] is None else f"{row['qa_f1']:.2f}",
                    "NA" if row["class_acc"] is None else f"{row['class_acc']:.2f}"])
    (out / "ablation.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    print(f"delta_f1 {report['delta_f1']:+.2f} (reference {report['reference_delta_f1']:+.1f})  "
          f"delta_acc {report['delta_acc']:+.2f} (reference {report['reference_delta_acc']:+.1f})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON file of configuration defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory (or file for generate)")

    p = sub.add_parser("generate", help="write a synthetic clinical QA corpus")
    common(p, out_required=True)
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--mix", choices=["emrqa", "uniform"], default="emrqa")
    p.add_argument("--gazetteer")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="label, split, tokenize and align a raw JSONL dataset")
    common(p, out_required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--gazetteer")
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--min-freq", type=int)
    p.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (("train", cmd_train, "train the multi-task model"),
                                 ("ablate", cmd_ablate, "QA-only vs classification-only vs joint")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--data", help="directory written by preprocess")
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--batch-size", type=int)
        if name == "train":
            p.add_argument("--resume", help="last.ckpt of an earlier run")
            p.add_argument("--stop-after", type=int, help="pause after this epoch; continue later with --resume")
        else:
            p.add_argument("--search", action="store_true", help="grid-search the joint task weights first")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--split", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="answer one question")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--context", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mtlqa: error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, TokenizerError, TrainingDiverged, ValueError, OSError) as e:
        print(f"mtlqa: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
