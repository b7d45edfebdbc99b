"""Shared-encoder multi-task network: span extraction plus answer categorization.

The encoder embeds ``[CLS] question [SEP] context [SEP]``, runs a stack of
shared transformer layers once, then feeds the result to two
parameter-disjoint upper stacks, one per task. The span head reads the QA
stack; the classification head reads the classification stack at ``[CLS]``.
Because the upper stacks share no parameters, the QA loss has exactly zero
gradient with respect to classification parameters and vice versa.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .corpus import CATEGORIES
from .tokenizer import TokenizedPair

SOFTMAX = "softmax"
SIGMOID = "sigmoid"
MAGIC = b"MTLCQA1\n"


@dataclass
class EncoderConfig:
    vocab_size: int = 1000
    hidden_dim: int = 64
    num_heads: int = 4
    num_shared_layers: int = 2
    num_task_layers: int = 2
    feedforward_dim: int = 128
    max_seq_len: int = 128
    span_head_dims: List[int] = field(default_factory=lambda: [32, 16])
    class_head_dims: List[int] = field(default_factory=lambda: [32, 16, 5])
    classification_mode: str = SOFTMAX
    dropout_rate: float = 0.1
    # "cls" pools the classification stack at position 0; span pooling is not implemented
    class_pooling: str = "cls"

    def __post_init__(self):
        self.span_head_dims = list(self.span_head_dims)
        self.class_head_dims = list(self.class_head_dims)
        self.validate()

    def validate(self) -> None:
        dims = [self.vocab_size, self.hidden_dim, self.num_heads, self.feedforward_dim, self.max_seq_len]
        if any(d <= 0 for d in dims + self.span_head_dims + self.class_head_dims):
            raise ValueError("all dimensions must be positive")
        if self.num_shared_layers < 0 or self.num_task_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if not self.class_head_dims or self.class_head_dims[-1] != len(CATEGORIES):
            raise ValueError(f"class head must end in width {len(CATEGORIES)}")
        if self.classification_mode not in (SOFTMAX, SIGMOID):
            raise ValueError(f"unknown classification_mode {self.classification_mode!r}")
        if self.class_pooling != "cls":
            raise NotImplementedError("only [CLS] pooling is implemented for the classification head")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def base(cls, vocab_size: int = 30522, **overrides) -> "EncoderConfig":
        """BERT-base sized: 6 shared + 6 task layers per branch, 768 hidden."""
        kw = dict(
            vocab_size=vocab_size, hidden_dim=768, num_heads=12, num_shared_layers=6, num_task_layers=6,
            feedforward_dim=3072, max_seq_len=512, span_head_dims=[512, 256], class_head_dims=[512, 256, 5],
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def tiny(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        kw = dict(
            vocab_size=vocab_size, hidden_dim=8, num_heads=2, num_shared_layers=2, num_task_layers=1,
            feedforward_dim=16, max_seq_len=8, span_head_dims=[8, 6], class_head_dims=[8, 6, 5],
            dropout_rate=0.0,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class EncoderLayer(nn.Module):
    """Post-norm transformer block (self-attention then GELU feed-forward)."""

    def __init__(self, hidden: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.attn_out = nn.Linear(hidden, hidden)
        self.attn_norm = nn.LayerNorm(hidden, eps=1e-12)
        self.ffn_in = nn.Linear(hidden, ffn)
        self.ffn_out = nn.Linear(ffn, hidden)
        self.ffn_norm = nn.LayerNorm(hidden, eps=1e-12)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, key_bias: Tensor) -> Tensor:
        b, n, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.view(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd) + key_bias
        probs = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (probs @ v).transpose(1, 2).reshape(b, n, d)
        x = self.attn_norm(x + self.dropout(self.attn_out(ctx)))
        h = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(h))


def _mlp(in_dim: int, dims: Sequence[int]) -> nn.ModuleList:
    layers = nn.ModuleList()
    for d in dims:
        layers.append(nn.Linear(in_dim, d))
        in_dim = d
    return layers


@dataclass
class EncoderOutput:
    shared: Tensor
    qa: Optional[Tensor]
    cls: Optional[Tensor]

    @property
    def pooled(self) -> Optional[Tensor]:
        return None if self.cls is None else self.cls[:, 0]


@dataclass
class SpanLogits:
    start: Tensor
    end: Tensor


class MultiTaskQAModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.token_embeddings = nn.Embedding(c.vocab_size, c.hidden_dim)
        self.position_embeddings = nn.Embedding(c.max_seq_len, c.hidden_dim)
        self.segment_embeddings = nn.Embedding(2, c.hidden_dim)
        self.embed_norm = nn.LayerNorm(c.hidden_dim, eps=1e-12)
        self.embed_dropout = nn.Dropout(c.dropout_rate)

        def stack(n):
            return nn.ModuleList(
                EncoderLayer(c.hidden_dim, c.num_heads, c.feedforward_dim, c.dropout_rate) for _ in range(n)
            )

        self.shared = stack(c.num_shared_layers)
        self.qa_branch = stack(c.num_task_layers)
        self.cls_branch = stack(c.num_task_layers)
        self.span_mlp = _mlp(c.hidden_dim, c.span_head_dims)
        self.span_out = nn.Linear(c.span_head_dims[-1] if c.span_head_dims else c.hidden_dim, 2)
        self.class_mlp = _mlp(c.hidden_dim, c.class_head_dims[:-1])
        self.class_out = nn.Linear(c.class_head_dims[-2] if len(c.class_head_dims) > 1 else c.hidden_dim, 5)
        self.head_dropout = nn.Dropout(c.dropout_rate)

    # parameter groups -------------------------------------------------------

    QA_PREFIXES = ("qa_branch.", "span_mlp.", "span_out.")
    CLASS_PREFIXES = ("cls_branch.", "class_mlp.", "class_out.")

    def task_of(self, name: str) -> str:
        if name.startswith(self.QA_PREFIXES):
            return "qa"
        if name.startswith(self.CLASS_PREFIXES):
            return "class"
        return "shared"

    def qa_parameters(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if self.task_of(n) == "qa"}

    def class_parameters(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if self.task_of(n) == "class"}

    # forward ----------------------------------------------------------------

    def encode(
        self,
        input_ids: Tensor,
        segment_ids: Tensor,
        attention_mask: Tensor,
        need_qa: bool = True,
        need_cls: bool = True,
    ) -> EncoderOutput:
        if input_ids.dim() == 1:
            input_ids, segment_ids, attention_mask = (t.unsqueeze(0) for t in (input_ids, segment_ids, attention_mask))
        n = input_ids.shape[1]
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        if int(input_ids.max()) >= self.config.vocab_size or int(input_ids.min()) < 0:
            raise ValueError(f"token id out of range for vocab_size {self.config.vocab_size}")
        pos = torch.arange(n, device=input_ids.device)
        x = self.token_embeddings(input_ids) + self.position_embeddings(pos) + self.segment_embeddings(segment_ids)
        x = self.embed_dropout(self.embed_norm(x))
        dtype = x.dtype
        key_bias = (1.0 - attention_mask.to(dtype))[:, None, None, :] * torch.finfo(dtype).min
        for layer in self.shared:
            x = layer(x, key_bias)
        h_qa = h_cls = None
        if need_qa:
            h_qa = x
            for layer in self.qa_branch:
                h_qa = layer(h_qa, key_bias)
        if need_cls:
            h_cls = x
            for layer in self.cls_branch:
                h_cls = layer(h_cls, key_bias)
        return EncoderOutput(shared=x, qa=h_qa, cls=h_cls)

    def span_logits(self, out: EncoderOutput, attention_mask: Tensor) -> SpanLogits:
        h = out.qa
        for lin in self.span_mlp:
            h = self.head_dropout(F.relu(lin(h)))
        logits = self.span_out(h)
        if attention_mask.dim() == 1:
            attention_mask = attention_mask.unsqueeze(0)
        sentinel = torch.finfo(logits.dtype).min
        pad = attention_mask == 0
        start = logits[..., 0].masked_fill(pad, sentinel)
        end = logits[..., 1].masked_fill(pad, sentinel)
        return SpanLogits(start, end)

    def class_logits(self, out: EncoderOutput) -> Tensor:
        h = out.pooled
        for lin in self.class_mlp:
            h = self.head_dropout(F.relu(lin(h)))
        return self.class_out(h)

    def class_scores(self, logits: Tensor) -> Tensor:
        if self.config.classification_mode == SIGMOID:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=-1)


def init_params(config: EncoderConfig, seed: int = 0) -> MultiTaskQAModel:
    """Build the model with seeded scaled-uniform weights.

    Linear weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    embedding tables use fan_in = hidden_dim. Layer norms start at gain 1, bias 0.
    """
    model = MultiTaskQAModel(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                module.bias.copy_(torch.rand(module.bias.shape, generator=gen) * 2 * bound - bound)
            elif isinstance(module, nn.Embedding):
                bound = 1.0 / math.sqrt(module.embedding_dim)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def init_bounds(model: MultiTaskQAModel) -> Dict[str, float]:
    """Largest |value| :func:`init_params` can produce, per parameter name."""
    bounds = {}
    for mname, module in model.named_modules():
        prefix = f"{mname}." if mname else ""
        if isinstance(module, nn.Linear):
            b = 1.0 / math.sqrt(module.in_features)
            bounds[prefix + "weight"] = bounds[prefix + "bias"] = b
        elif isinstance(module, nn.Embedding):
            bounds[prefix + "weight"] = 1.0 / math.sqrt(module.embedding_dim)
        elif isinstance(module, nn.LayerNorm):
            bounds[prefix + "weight"] = bounds[prefix + "bias"] = 1.0
    return bounds


# functional surface ---------------------------------------------------------


def pair_tensors(pairs: Union[TokenizedPair, Sequence[TokenizedPair]]) -> Tuple[Tensor, Tensor, Tensor]:
    if isinstance(pairs, TokenizedPair):
        pairs = [pairs]
    ids = torch.tensor([p.input_ids for p in pairs], dtype=torch.long)
    seg = torch.tensor([p.segment_ids for p in pairs], dtype=torch.long)
    mask = torch.tensor([p.attention_mask for p in pairs], dtype=torch.long)
    return ids, seg, mask


def forward_encoder(model: MultiTaskQAModel, pair: Union[TokenizedPair, Sequence[TokenizedPair]]) -> EncoderOutput:
    ids, seg, mask = pair_tensors(pair)
    if ids.shape[1] != model.config.max_seq_len:
        raise ValueError(f"pair length {ids.shape[1]} != max_seq_len {model.config.max_seq_len}")
    return model.encode(ids, seg, mask)


def span_head(model: MultiTaskQAModel, out: EncoderOutput, attention_mask: Tensor) -> SpanLogits:
    return model.span_logits(out, attention_mask)


def class_head(model: MultiTaskQAModel, out: EncoderOutput) -> Tensor:
    return model.class_logits(out)


def decode_span(start_logits, end_logits, valid, max_answer_len: int = 30) -> Tuple[int, int]:
    """Best ``(s, e)`` with ``s <= e < s + max_answer_len``, both valid.

    Score is ``start[s] + end[e]``; ties go to the smaller ``s``, then ``e``.
    """
    s = np.asarray(start_logits.detach() if isinstance(start_logits, Tensor) else start_logits, dtype=np.float64)
    e = np.asarray(end_logits.detach() if isinstance(end_logits, Tensor) else end_logits, dtype=np.float64)
    ok = np.asarray(valid.detach() if isinstance(valid, Tensor) else valid, dtype=bool)
    n = s.shape[0]
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be at least 1")
    i = np.arange(n)
    allowed = ok[:, None] & ok[None, :] & (i[None, :] >= i[:, None]) & (i[None, :] - i[:, None] < max_answer_len)
    if not allowed.any():
        raise ValueError("no valid answer position")
    scores = np.where(allowed, s[:, None] + e[None, :], -np.inf)
    flat = int(np.argmax(scores))
    return flat // n, flat % n


def context_mask(pair: TokenizedPair) -> List[bool]:
    return [off is not None for off in pair.offsets]


# checkpoints ----------------------------------------------------------------


def save_checkpoint(path, model: MultiTaskQAModel, meta: Optional[dict] = None,
                    extra_tensors: Optional[Dict[str, Tensor]] = None) -> None:
    """Write a single-file checkpoint.

    Layout: magic ``MTLCQA1\\n``, little-endian uint64 header length, UTF-8
    JSON header (config, meta, tensor index), then each tensor as row-major
    little-endian float32 in index order.
    """
    tensors = [(n, p.detach()) for n, p in model.state_dict().items()]
    tensors += sorted((extra_tensors or {}).items())
    index, blobs, offset = [], [], 0
    for name, t in tensors:
        data = np.ascontiguousarray(t.cpu().numpy(), dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"format": 1, "config": model.config.to_dict(), "meta": meta or {}, "tensors": index}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_checkpoint(path) -> Tuple[dict, Dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for item in header["tensors"]:
        buf = raw[base + item["offset"]: base + item["offset"] + item["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(item["shape"]).astype(np.float32)
        tensors[item["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path) -> Tuple[MultiTaskQAModel, dict, Dict[str, Tensor]]:
    """Return ``(model, meta, extra_tensors)``."""
    header, tensors = read_checkpoint(path)
    model = MultiTaskQAModel(EncoderConfig.from_dict(header["config"]))
    own = model.state_dict()
    missing = [n for n in own if n not in tensors]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {missing[:3]}")
    model.load_state_dict({n: tensors[n] for n in own})
    extra = {n: t for n, t in tensors.items() if n not in own}
    return model, header.get("meta", {}), extra
