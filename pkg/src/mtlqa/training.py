"""Losses, AdamW with warmup/linear decay, the joint training loop and experiment harnesses."""

from __future__ import annotations

import base64
import copy
import logging
import math
import random
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .corpus import CATEGORIES, Category, ClassWeights, DatasetSplit, QARecord, compute_class_weights, oversample
from .evaluation import Prediction, classification_metrics, exact_match, token_f1
from .model import SIGMOID, SOFTMAX, EncoderConfig, MultiTaskQAModel, SpanLogits, decode_span, init_params
from .tokenizer import TokenizedPair, Vocabulary, align_answer_span, encode_pair

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8
DEFAULT_GRID = [(a, b) for a in (0.25, 0.5, 1.0) for b in (0.25, 0.5, 1.0)]


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def _check_gold(logits: Tensor, gold: Tensor, which: str) -> None:
    sentinel = torch.finfo(logits.dtype).min
    if bool((logits.gather(-1, gold.unsqueeze(-1)) <= sentinel).any()):
        raise ValueError(f"gold {which} position falls on a padded position")


def qa_loss(logits: SpanLogits, gold_start, gold_end) -> Tensor:
    """Mean of the start and end cross-entropies over the unmasked positions."""
    start, end = logits.start, logits.end
    squeeze = start.dim() == 1
    if squeeze:
        start, end = start.unsqueeze(0), end.unsqueeze(0)
    gs = torch.as_tensor(gold_start, dtype=torch.long).reshape(-1)
    ge = torch.as_tensor(gold_end, dtype=torch.long).reshape(-1)
    _check_gold(start, gs, "start")
    _check_gold(end, ge, "end")
    return (F.cross_entropy(start, gs) + F.cross_entropy(end, ge)) / 2


def _weights_tensor(weights, like: Tensor) -> Tensor:
    if isinstance(weights, ClassWeights):
        weights = weights.as_list()
    return torch.as_tensor(weights, dtype=like.dtype)


def classification_loss(logits: Tensor, gold, weights) -> Tensor:
    """Per-example ``w[gold] * -log softmax(logits)[gold]``, averaged over the batch."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if isinstance(gold, Category):
        gold = gold.index
    gold = torch.as_tensor(gold, dtype=torch.long).reshape(-1)
    w = _weights_tensor(weights, logits)
    nll = F.cross_entropy(logits, gold, reduction="none")
    return (w[gold] * nll).mean()


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Sigmoid cross-entropy averaged over the five categories (and the batch)."""
    if isinstance(targets, dict):
        targets = [float(targets.get(c, 0.0)) for c in CATEGORIES]
    t = torch.as_tensor(targets, dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, t.expand_as(logits) if t.dim() < logits.dim() else t)


@dataclass
class LossWeights:
    lambda_qa: float = 1.0
    lambda_class: float = 1.0
    class_weights: ClassWeights = field(default_factory=ClassWeights.uniform)

    def __post_init__(self):
        if self.lambda_qa < 0 or self.lambda_class < 0:
            raise ValueError("task weights must be non-negative")
        if self.lambda_qa == 0 and self.lambda_class == 0:
            raise ValueError("at least one task weight must be positive")


def combined_loss(l_qa: Optional[Tensor], l_class: Optional[Tensor], lw: LossWeights):
    """``lambda_qa * l_qa + lambda_class * l_class``; a zero-weighted term may be None."""
    total = 0.0
    if lw.lambda_qa:
        total = total + lw.lambda_qa * l_qa
    if lw.lambda_class:
        total = total + lw.lambda_class * l_class
    return total


# ---------------------------------------------------------------------------
# optimization


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * (step / warmup)
    return base_lr * ((total_steps - step) / (total_steps - warmup))


def decays(name: str) -> bool:
    """Weight decay skips biases and layer-norm parameters."""
    return not (name.endswith("bias") or "norm" in name)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    exp_avg: Dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, Tensor] = field(default_factory=dict)
    best_val_loss: float = math.inf
    bad_epochs: int = 0
    # torch generator state at the end of the last finished epoch (drives dropout)
    torch_rng: Optional[bytes] = None

    def to_meta(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss if math.isfinite(self.best_val_loss) else None,
            "bad_epochs": self.bad_epochs,
            "torch_rng": base64.b64encode(self.torch_rng).decode("ascii") if self.torch_rng else None,
        }

    def moment_tensors(self) -> Dict[str, Tensor]:
        out = {f"optim.exp_avg.{n}": t for n, t in self.exp_avg.items()}
        out.update({f"optim.exp_avg_sq.{n}": t for n, t in self.exp_avg_sq.items()})
        return out

    @classmethod
    def from_checkpoint(cls, meta: dict, extra: Dict[str, Tensor]) -> "TrainState":
        st = meta.get("train_state", {})
        best = st.get("best_val_loss")
        rng = st.get("torch_rng")
        state = cls(step=st.get("step", 0), epoch=st.get("epoch", 0),
                    best_val_loss=math.inf if best is None else best, bad_epochs=st.get("bad_epochs", 0),
                    torch_rng=base64.b64decode(rng) if rng else None)
        for key, t in extra.items():
            if key.startswith("optim.exp_avg_sq."):
                state.exp_avg_sq[key[len("optim.exp_avg_sq."):]] = t
            elif key.startswith("optim.exp_avg."):
                state.exp_avg[key[len("optim.exp_avg."):]] = t
        return state


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    state: TrainState,
    lr: float,
    weight_decay: float = 0.01,
    betas: Tuple[float, float] = BETAS,
    eps: float = EPS,
) -> None:
    """One in-place AdamW update with decoupled weight decay.

    Only parameters present in ``grads`` are touched; ``state.step`` is the
    number of updates already applied and is incremented here.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r} at step {state.step}")
    state.step += 1
    b1, b2 = betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            if weight_decay and decays(name):
                p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


class EarlyStopping:
    """Stop once validation loss fails to improve by ``min_delta`` for ``patience`` evaluations."""

    def __init__(self, patience: Optional[int] = 2, min_delta: float = 1e-4, best: float = math.inf, bad: int = 0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = best
        self.bad = bad

    def update(self, val_loss: float) -> Tuple[bool, bool]:
        """Return ``(improved, should_stop)``."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.patience is not None and self.bad >= self.patience


# ---------------------------------------------------------------------------
# features and batches


@dataclass
class Feature:
    record: QARecord
    pair: TokenizedPair
    start_tok: int
    end_tok: int


def build_features(
    records: Sequence[QARecord], vocab: Vocabulary, max_seq_len: int
) -> Tuple[List[Feature], List[QARecord]]:
    """Encode and align every record; records whose answer was truncated away are returned separately."""
    feats, skipped = [], []
    for r in records:
        pair = encode_pair(r.question, r.context, vocab, max_seq_len)
        span = align_answer_span(pair, (r.answer_char_start, r.answer_char_end), r.context)
        if span is None:
            skipped.append(r)
            continue
        pair.gold_span = span
        feats.append(Feature(r, pair, span[0], span[1]))
    return feats, skipped


@dataclass
class Batch:
    input_ids: Tensor
    segment_ids: Tensor
    attention_mask: Tensor
    start: Tensor
    end: Tensor
    labels: Tensor
    soft_targets: Tensor

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def make_batch(features: Sequence[Feature], dtype=torch.float32) -> Batch:
    soft = []
    for f in features:
        r = f.record
        if r.soft_labels is not None:
            soft.append([float(r.soft_labels.get(c, 0.0)) for c in CATEGORIES])
        else:
            soft.append([1.0 if c == r.label else 0.0 for c in CATEGORIES])
    return Batch(
        input_ids=torch.tensor([f.pair.input_ids for f in features], dtype=torch.long),
        segment_ids=torch.tensor([f.pair.segment_ids for f in features], dtype=torch.long),
        attention_mask=torch.tensor([f.pair.attention_mask for f in features], dtype=torch.long),
        start=torch.tensor([f.start_tok for f in features], dtype=torch.long),
        end=torch.tensor([f.end_tok for f in features], dtype=torch.long),
        labels=torch.tensor([f.record.label.index for f in features], dtype=torch.long),
        soft_targets=torch.tensor(soft, dtype=dtype),
    )


def batch_loss(model: MultiTaskQAModel, batch: Batch, lw: LossWeights):
    """Forward pass and weighted multi-task loss; returns ``(total, l_qa, l_class)``.

    Tasks with a zero weight are not evaluated, so their parameters get no
    gradient at all.
    """
    need_qa, need_cls = lw.lambda_qa > 0, lw.lambda_class > 0
    out = model.encode(batch.input_ids, batch.segment_ids, batch.attention_mask, need_qa=need_qa, need_cls=need_cls)
    l_qa = l_cls = None
    if need_qa:
        l_qa = qa_loss(model.span_logits(out, batch.attention_mask), batch.start, batch.end)
    if need_cls:
        logits = model.class_logits(out)
        if model.config.classification_mode == SIGMOID:
            l_cls = bce_loss(logits, batch.soft_targets.to(logits.dtype))
        else:
            l_cls = classification_loss(logits, batch.labels, lw.class_weights)
    return combined_loss(l_qa, l_cls, lw), l_qa, l_cls


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def predict(
    model: MultiTaskQAModel, features: Sequence[Feature], max_answer_len: int = 30, batch_size: int = 64
) -> List[Prediction]:
    was_training = model.training
    model.eval()
    preds = []
    for i in range(0, len(features), batch_size):
        chunk = features[i:i + batch_size]
        b = make_batch(chunk)
        out = model.encode(b.input_ids, b.segment_ids, b.attention_mask)
        spans = model.span_logits(out, b.attention_mask)
        scores = model.class_scores(model.class_logits(out))
        for j, f in enumerate(chunk):
            valid = [off is not None for off in f.pair.offsets]
            s, e = decode_span(spans.start[j], spans.end[j], valid, max_answer_len)
            row = scores[j].tolist()
            label = CATEGORIES[max(range(len(CATEGORIES)), key=lambda k: (row[k], -k))]
            preds.append(Prediction(
                id=f.record.id,
                answer_text=f.pair.window_text(f.record.context, s, e),
                label=label,
                scores={c: row[k] for k, c in enumerate(CATEGORIES)},
                start_tok=s,
                end_tok=e,
            ))
    model.train(was_training)
    return preds


@torch.no_grad()
def evaluate_loss(model: MultiTaskQAModel, features: Sequence[Feature], lw: LossWeights, batch_size: int = 64) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    for i in range(0, len(features), batch_size):
        chunk = features[i:i + batch_size]
        loss, _, _ = batch_loss(model, make_batch(chunk), lw)
        total += float(loss) * len(chunk)
    model.train(was_training)
    return total / len(features)


def quick_metrics(preds: Sequence[Prediction], features: Sequence[Feature]) -> Dict[str, float]:
    gold = [f.record for f in features]
    n = len(gold)
    cm = classification_metrics([p.label for p in preds], [g.label for g in gold], labels=CATEGORIES)
    return {
        "qa_f1": 100 * sum(token_f1(p.answer_text, g.answer_text) for p, g in zip(preds, gold)) / n,
        "em": 100 * sum(exact_match(p.answer_text, g.answer_text) for p, g in zip(preds, gold)) / n,
        "acc": 100 * cm.accuracy,
        "weighted_f1": 100 * cm.weighted_f1,
    }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 5
    batch_size: int = 16
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    early_stop_patience: Optional[int] = 2
    min_delta: float = 1e-4
    seed: int = 0
    classification_mode: str = SOFTMAX
    lambda_qa: float = 1.0
    lambda_class: float = 1.0
    use_class_weights: bool = True
    oversample: bool = False
    max_answer_len: int = 30
    grid: List[Tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_GRID))

    def __post_init__(self):
        self.grid = [tuple(float(x) for x in pair) for pair in self.grid]
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.classification_mode not in (SOFTMAX, SIGMOID):
            raise ValueError(f"unknown classification_mode {self.classification_mode!r}")

    def with_lambdas(self, lambda_qa: float, lambda_class: float) -> "TrainConfig":
        return replace(self, lambda_qa=lambda_qa, lambda_class=lambda_class)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [list(p) for p in self.grid]
        return d


@dataclass
class TrainResult:
    model: MultiTaskQAModel
    log: List[dict]
    state: TrainState
    best_epoch: int
    skipped: List[QARecord] = field(default_factory=list)
    # parameters after the final epoch, for resuming
    last_state_dict: Optional[dict] = None


def _loss_weights(config: TrainConfig, train_records: Sequence[QARecord]) -> LossWeights:
    cw = compute_class_weights(train_records) if config.use_class_weights else ClassWeights.uniform()
    return LossWeights(config.lambda_qa, config.lambda_class, cw)


def train(
    model: MultiTaskQAModel,
    splits: DatasetSplit,
    vocab: Vocabulary,
    config: TrainConfig,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    best_state_dict: Optional[dict] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Joint training with per-epoch validation and early stopping.

    Returns the parameters from the epoch with the lowest validation loss.
    Passing a ``state`` restored from a checkpoint resumes the optimizer
    moments, RNG streams and the learning-rate schedule from its step
    counter; ``best_state_dict`` then carries the best parameters seen so far.
    ``stop_after`` ends the run early at that epoch without altering the schedule.
    """
    if model.config.classification_mode != config.classification_mode:
        raise ValueError("model and training config disagree on classification_mode")
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)

    train_feats, skipped = build_features(splits.train, vocab, model.config.max_seq_len)
    val_feats, val_skipped = build_features(splits.validation, vocab, model.config.max_seq_len)
    if not train_feats or not val_feats:
        raise ValueError("training and validation splits must be nonempty after tokenization")
    lw = _loss_weights(config, [f.record for f in train_feats])
    if config.oversample:
        by_id = {f.record.id: f for f in train_feats}
        extra = oversample([f.record for f in train_feats], seed=config.seed)[len(train_feats):]
        train_feats = train_feats + [Feature(r, by_id[r.provenance].pair, by_id[r.provenance].start_tok,
                                             by_id[r.provenance].end_tok) for r in extra]

    steps_per_epoch = math.ceil(len(train_feats) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = state or TrainState()
    if state.torch_rng is not None:
        torch.set_rng_state(torch.ByteTensor(list(state.torch_rng)))
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta, state.best_val_loss, state.bad_epochs)
    params = dict(model.named_parameters())
    best = copy.deepcopy(best_state_dict if best_state_dict is not None else model.state_dict())
    best_epoch = state.epoch
    history: List[dict] = []

    # replay the shuffles of epochs already done so a resumed run sees the same order
    order = list(range(len(train_feats)))
    for _ in range(state.epoch):
        rng.shuffle(order)

    for epoch in range(state.epoch, config.epochs):
        model.train()
        rng.shuffle(order)
        running, seen = 0.0, 0
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = make_batch([train_feats[i] for i in idx])
            lr = lr_schedule(state.step, total_steps, config.learning_rate, config.warmup_fraction)
            loss, _, _ = batch_loss(model, batch, lw)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss is {float(loss.detach())} at step {state.step} (lr={lr:.3g})")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, lr, config.weight_decay)
            running += float(loss.detach()) * len(batch)
            seen += len(batch)

        val_loss = evaluate_loss(model, val_feats, lw)
        metrics = quick_metrics(predict(model, val_feats, config.max_answer_len), val_feats)
        entry = {
            "epoch": epoch + 1,
            "train_loss": running / seen,
            "val_loss": val_loss,
            "val_qa_f1": metrics["qa_f1"],
            "val_em": metrics["em"],
            "val_acc": metrics["acc"],
            "val_weighted_f1": metrics["weighted_f1"],
            "lr": lr,
        }
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f f1=%.1f acc=%.1f", epoch + 1,
                 entry["train_loss"], val_loss, metrics["qa_f1"], metrics["acc"])
        state.epoch = epoch + 1
        state.torch_rng = bytes(torch.get_rng_state().tolist())
        improved, stop = stopper.update(val_loss)
        state.best_val_loss, state.bad_epochs = stopper.best, stopper.bad
        if improved:
            best = copy.deepcopy(model.state_dict())
            best_epoch = epoch + 1
        if stop or (stop_after is not None and state.epoch >= stop_after):
            break

    last = copy.deepcopy(model.state_dict())
    model.load_state_dict(best)
    return TrainResult(model=model, log=history, state=state, best_epoch=best_epoch,
                       skipped=skipped + val_skipped, last_state_dict=last)


# ---------------------------------------------------------------------------
# experiments


def _test_or_val(splits: DatasetSplit) -> List[QARecord]:
    return splits.test if splits.test else splits.validation


def grid_search_lambdas(
    splits: DatasetSplit, vocab: Vocabulary, encoder: EncoderConfig, config: TrainConfig
) -> Tuple[Tuple[float, float], List[dict]]:
    """Train one model per task-weight pair and pick the best mean of val F1 and accuracy."""
    if not config.grid:
        raise ValueError("grid must be nonempty")
    grid = []
    for pair in config.grid:
        if pair in grid:
            warnings.warn(f"duplicate grid pair {pair} ignored")
            continue
        grid.append(pair)
    val_feats, _ = build_features(splits.validation, vocab, encoder.max_seq_len)
    table = []
    for lq, lc in grid:
        cfg = config.with_lambdas(lq, lc)
        model = init_params(encoder, cfg.seed)
        result = train(model, splits, vocab, cfg)
        m = quick_metrics(predict(result.model, val_feats, cfg.max_answer_len), val_feats)
        table.append({
            "lambda_qa": lq, "lambda_class": lc, "val_qa_f1": m["qa_f1"], "val_acc": m["acc"],
            "score": (m["qa_f1"] + m["acc"]) / 2,
        })
    best = max(range(len(table)), key=lambda i: (table[i]["score"], -i))
    return grid[best], table


REFERENCE_DELTAS = {"delta_f1": 2.2, "delta_acc": 6.2}


def run_ablation(
    splits: DatasetSplit,
    vocab: Vocabulary,
    encoder: EncoderConfig,
    config: TrainConfig,
    search: bool = False,
) -> dict:
    """QA-only, classification-only and joint runs on identical data and seed.

    The joint run uses ``config``'s task weights, or the grid-search winner
    when ``search`` is set. Metrics are on the test split.
    """
    lambdas = (config.lambda_qa, config.lambda_class)
    grid_table = None
    if search:
        lambdas, grid_table = grid_search_lambdas(splits, vocab, encoder, config)
    test_feats, _ = build_features(_test_or_val(splits), vocab, encoder.max_seq_len)
    rows = []
    for name, (lq, lc) in (("qa_only", (1.0, 0.0)), ("class_only", (0.0, 1.0)), ("mtl", lambdas)):
        cfg = config.with_lambdas(lq, lc)
        result = train(init_params(encoder, cfg.seed), splits, vocab, cfg)
        m = quick_metrics(predict(result.model, test_feats, cfg.max_answer_len), test_feats)
        rows.append({
            "config": name,
            "lambda_qa": lq,
            "lambda_class": lc,
            "qa_f1": m["qa_f1"] if lq > 0 else None,
            "class_acc": m["acc"] if lc > 0 else None,
        })
    by = {r["config"]: r for r in rows}
    report = {
        "rows": rows,
        "delta_f1": by["mtl"]["qa_f1"] - by["qa_only"]["qa_f1"],
        "delta_acc": by["mtl"]["class_acc"] - by["class_only"]["class_acc"],
        "reference_delta_f1": REFERENCE_DELTAS["delta_f1"],
        "reference_delta_acc": REFERENCE_DELTAS["delta_acc"],
        "seed": config.seed,
    }
    if grid_table is not None:
        report["grid"] = grid_table
    return report
