"""A small decoder-only transformer with interleaved compression tokens.

Documents are laid out as ``[raw_0, ct_0, raw_1, ct_1, ...]`` where each
``ct_i`` block is a run of learned compression-token embeddings. A custom
attention mask gives raw tokens of chunk i visibility onto their own chunk
and the compression tokens of earlier chunks only, so the hidden states at
ct positions are the sole carriers of past-chunk information. A query is
appended as a trailing raw-only chunk, which by the same rule sees nothing
but compression tokens and itself.

Everything is float64 numpy with hand-written backpropagation, so gradients
can be validated against central finite differences and checkpoints are
byte-reproducible.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import AllocationPlan, Chunk

BYTE_VOCAB = 256

_RAW, _CT, _PAD = 0, 1, 2

_CHECKPOINT_MAGIC = b"CTALLOC1"


# ---------------------------------------------------------------------------
# Configuration and parameters


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = BYTE_VOCAB + 1  # bytes + BOS
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_positions: int = 512
    n_ct_embeddings: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                     "max_positions", "n_ct_embeddings"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def bos_id(self) -> int:
        """The reserved begin-of-sequence id (last vocabulary slot)."""
        return self.vocab_size - 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ToyModel:
    """Parameter tensors plus the config that shaped them."""

    params: dict[str, np.ndarray]
    config: ToyModelConfig

    def copy(self) -> "ToyModel":
        return ToyModel(
            params={k: v.copy() for k, v in self.params.items()},
            config=self.config,
        )


def _sinusoidal_table(n_positions: int, d_model: int, scale: float) -> np.ndarray:
    # Sinusoidal *initialization* for the learned position table: gives
    # offset-attending heads usable relative structure from step one.
    positions = np.arange(n_positions)[:, None].astype(np.float64)
    dims = np.arange(d_model)[None, :].astype(np.float64)
    angles = positions / np.power(10000.0, 2 * (dims // 2) / d_model)
    table = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    return scale * table


def init_model(config: ToyModelConfig) -> ToyModel:
    """Deterministically initialize parameters from ``config.seed``.

    The output head starts at zero, so a fresh model emits exactly uniform
    next-token distributions.
    """
    rng = np.random.default_rng(config.seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    params: dict[str, np.ndarray] = {}

    def normal(shape, scale):
        return rng.normal(0.0, scale, size=shape).astype(np.float64)

    params["tok_emb"] = normal((v, d), 0.05)
    params["ct_emb"] = normal((config.n_ct_embeddings, d), 0.05)
    params["pos_emb"] = _sinusoidal_table(config.max_positions, d, 0.08)
    for i in range(config.n_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = normal((d, d), 1.0 / math.sqrt(d))
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "ffn.w1"] = normal((d, ff), 1.0 / math.sqrt(d))
        params[p + "ffn.b1"] = np.zeros(ff)
        params[p + "ffn.w2"] = normal((ff, d), 1.0 / math.sqrt(ff))
        params[p + "ffn.b2"] = np.zeros(d)
    params["lnf.g"] = np.ones(d)
    params["lnf.b"] = np.zeros(d)
    params["head.w"] = np.zeros((d, v))
    params["head.b"] = np.zeros(v)
    return ToyModel(params=params, config=config)


# ---------------------------------------------------------------------------
# Sequence layout and mask


@dataclass(frozen=True)
class Segment:
    kind: str  # "raw" or "ct"
    chunk: int
    length: int


@dataclass(frozen=True)
class SequenceLayout:
    """Ordered raw/ct segments: per chunk a raw run, then its ct run.

    A chunk's ct run may be absent (zero allocation, or a trailing raw-only
    query chunk). Chunk indices are consecutive from 0.
    """

    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("layout must contain at least one segment")
        expected_chunk = 0
        prev: Segment | None = None
        for seg in self.segments:
            if seg.kind not in ("raw", "ct"):
                raise ValueError(f"unknown segment kind {seg.kind!r}")
            if seg.length < 1:
                raise ValueError("segment length must be >= 1")
            if seg.kind == "raw":
                if seg.chunk != expected_chunk:
                    raise ValueError("raw segments must have consecutive chunk indices")
                expected_chunk += 1
            else:
                if prev is None or prev.kind != "raw" or prev.chunk != seg.chunk:
                    raise ValueError("a ct segment must directly follow its chunk's raw segment")
            prev = seg

    @property
    def total_len(self) -> int:
        return sum(seg.length for seg in self.segments)

    @property
    def n_chunks(self) -> int:
        return 1 + max(seg.chunk for seg in self.segments)

    @cached_property
    def kinds(self) -> np.ndarray:
        out = np.empty(self.total_len, dtype=np.int8)
        at = 0
        for seg in self.segments:
            out[at : at + seg.length] = _RAW if seg.kind == "raw" else _CT
            at += seg.length
        return out

    @cached_property
    def chunk_ids(self) -> np.ndarray:
        out = np.empty(self.total_len, dtype=np.int32)
        at = 0
        for seg in self.segments:
            out[at : at + seg.length] = seg.chunk
            at += seg.length
        return out

    @cached_property
    def segment_offsets(self) -> np.ndarray:
        """Position index within the owning segment (drives ct cycling)."""
        out = np.empty(self.total_len, dtype=np.int32)
        at = 0
        for seg in self.segments:
            out[at : at + seg.length] = np.arange(seg.length)
            at += seg.length
        return out

    @cached_property
    def ct_positions(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == _CT)

    @cached_property
    def ct_ownership(self) -> dict[int, int]:
        """Map from ct order index (0..K-1, position order) to owning chunk."""
        chunk_ids = self.chunk_ids
        return {i: int(chunk_ids[p]) for i, p in enumerate(self.ct_positions)}

    def raw_span(self, chunk: int) -> tuple[int, int]:
        """Start position and length of a chunk's raw segment."""
        at = 0
        for seg in self.segments:
            if seg.kind == "raw" and seg.chunk == chunk:
                return at, seg.length
            at += seg.length
        raise ValueError(f"chunk {chunk} has no raw segment")


def build_compression_mask(layout: SequenceLayout) -> np.ndarray:
    """Boolean [T, T] matrix: entry (q, k) is True iff q may attend to k.

    Within causal order: raw tokens see their own chunk's raw prefix and the
    ct tokens of earlier chunks; ct tokens additionally see their own chunk's
    earlier ct tokens and themselves. Raw tokens never see raw tokens of
    earlier chunks.
    """
    kinds = layout.kinds
    chunks = layout.chunk_ids
    t = layout.total_len
    causal = np.tril(np.ones((t, t), dtype=bool))
    kq = kinds[:, None]
    kk = kinds[None, :]
    cq = chunks[:, None]
    ck = chunks[None, :]
    raw_key = (kk == _RAW) & (ck == cq)
    ct_key = (kk == _CT) & ((ck < cq) | ((ck == cq) & (kq == _CT)))
    return causal & (raw_key | ct_key)


def assemble_sequence(
    chunks: Sequence[Chunk],
    ct_counts: Sequence[int],
    query_tokens: Sequence[int] = (),
    *,
    bos_id: int | None = None,
) -> tuple[SequenceLayout, np.ndarray]:
    """Interleave chunk tokens with ct slots (token id -1) per the layout.

    With ``bos_id`` set, a BOS token is prepended to chunk 0's raw segment so
    the first real token has a predecessor to be predicted from. Query tokens
    become a trailing raw-only chunk.
    """
    if not chunks:
        raise ValueError("no chunks to assemble")
    if len(ct_counts) != len(chunks):
        raise ValueError("ct_counts must cover every chunk")
    segments: list[Segment] = []
    tokens: list[int] = []
    for chunk, count in zip(chunks, ct_counts):
        if count < 0:
            raise ValueError("ct counts must be >= 0")
        raw_len = len(chunk)
        if chunk.index == 0 and bos_id is not None:
            tokens.append(bos_id)
            raw_len += 1
        tokens.extend(chunk.tokens)
        segments.append(Segment("raw", chunk.index, raw_len))
        if count > 0:
            segments.append(Segment("ct", chunk.index, count))
            tokens.extend([-1] * count)
    if len(query_tokens) > 0:
        segments.append(Segment("raw", len(chunks), len(query_tokens)))
        tokens.extend(int(t) for t in query_tokens)
    return SequenceLayout(tuple(segments)), np.asarray(tokens, dtype=np.int64)


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class ForwardResult:
    logits: np.ndarray  # [T, vocab]
    attentions: list[np.ndarray]  # per layer, [n_heads, T, T]
    hidden: np.ndarray  # [T, d_model], after the final layer norm


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u)), u


def _gelu_backward(dy, x, u):
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _embed(model, token_mat, kind_mat, cyc_mat):
    cfg = model.config
    b, t = token_mat.shape
    emb = np.zeros((b, t, cfg.d_model))
    raw_sel = kind_mat == _RAW
    ct_sel = kind_mat == _CT
    if raw_sel.any():
        ids = token_mat[raw_sel]
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        emb[raw_sel] = model.params["tok_emb"][ids]
    if ct_sel.any():
        emb[ct_sel] = model.params["ct_emb"][cyc_mat[ct_sel] % cfg.n_ct_embeddings]
    emb += model.params["pos_emb"][:t][None, :, :]
    return emb


def _masked_softmax(scores, mask):
    """Row softmax over allowed keys; disallowed entries are exactly zero."""
    neg = np.where(mask, scores, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(neg - rowmax)
    z = e.sum(axis=-1, keepdims=True)
    z = np.where(z == 0.0, 1.0, z)
    return e / z


def _forward_batch(model, token_mat, kind_mat, cyc_mat, mask, keep_cache):
    """Run the full stack over padded batch tensors.

    ``mask`` is [B, T, T]; padded query rows may be all-False and then come
    out as all-zero attention rows, which nothing downstream reads.
    """
    cfg = model.config
    p = model.params
    scale = 1.0 / math.sqrt(cfg.head_dim)

    emb = _embed(model, token_mat, kind_mat, cyc_mat)
    x = emb
    mask4 = mask[:, None, :, :]
    layers = []
    attentions = []
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        h, ln1_cache = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = _split_heads(h @ p[pre + "attn.wq"], cfg.n_heads)
        k = _split_heads(h @ p[pre + "attn.wk"], cfg.n_heads)
        v = _split_heads(h @ p[pre + "attn.wv"], cfg.n_heads)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        attn = _masked_softmax(scores, mask4)
        ctx = _merge_heads(np.matmul(attn, v))
        x1 = x + ctx @ p[pre + "attn.wo"]
        h2, ln2_cache = _layer_norm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f1 = h2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
        g, u = _gelu(f1)
        x2 = x1 + g @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        attentions.append(attn)
        if keep_cache:
            layers.append(
                dict(x=x, h=h, ln1=ln1_cache, q=q, k=k, v=v, attn=attn, ctx=ctx,
                     x1=x1, h2=h2, ln2=ln2_cache, f1=f1, g=g, u=u)
            )
        x = x2
    xf, lnf_cache = _layer_norm(x, p["lnf.g"], p["lnf.b"])
    logits = xf @ p["head.w"] + p["head.b"]
    cache = dict(layers=layers, x_last=x, lnf=lnf_cache, xf=xf,
                 token_mat=token_mat, kind_mat=kind_mat, cyc_mat=cyc_mat)
    return logits, attentions, xf, cache


def _backward_batch(model, cache, dlogits):
    cfg = model.config
    p = model.params
    scale = 1.0 / math.sqrt(cfg.head_dim)
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    xf = cache["xf"]
    grads["head.w"] = np.einsum("btd,btv->dv", xf, dlogits)
    grads["head.b"] = dlogits.sum(axis=(0, 1))
    dxf = dlogits @ p["head.w"].T
    dx, dg, db = _layer_norm_backward(dxf, cache["lnf"], p["lnf.g"])
    grads["lnf.g"] = dg
    grads["lnf.b"] = db

    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        c = cache["layers"][i]
        # FFN branch
        dx1 = dx.copy()
        dgelu = dx @ p[pre + "ffn.w2"].T
        grads[pre + "ffn.w2"] = np.einsum("btf,btd->fd", c["g"], dx)
        grads[pre + "ffn.b2"] = dx.sum(axis=(0, 1))
        df1 = _gelu_backward(dgelu, c["f1"], c["u"])
        grads[pre + "ffn.w1"] = np.einsum("btd,btf->df", c["h2"], df1)
        grads[pre + "ffn.b1"] = df1.sum(axis=(0, 1))
        dh2 = df1 @ p[pre + "ffn.w1"].T
        dx1_ln, dg2, db2 = _layer_norm_backward(dh2, c["ln2"], p[pre + "ln2.g"])
        grads[pre + "ln2.g"] = dg2
        grads[pre + "ln2.b"] = db2
        dx1 += dx1_ln
        # Attention branch
        dx0 = dx1.copy()
        dctx = dx1 @ p[pre + "attn.wo"].T
        grads[pre + "attn.wo"] = np.einsum("btd,bte->de", c["ctx"], dx1)
        dctx_h = _split_heads(dctx, cfg.n_heads)
        dattn = np.matmul(dctx_h, c["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(c["attn"].transpose(0, 1, 3, 2), dctx_h)
        attn = c["attn"]
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = np.matmul(dscores, c["k"])
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), c["q"])
        dq_m, dk_m, dv_m = (_merge_heads(a) for a in (dq, dk, dv))
        h = c["h"]
        grads[pre + "attn.wq"] = np.einsum("btd,bte->de", h, dq_m)
        grads[pre + "attn.wk"] = np.einsum("btd,bte->de", h, dk_m)
        grads[pre + "attn.wv"] = np.einsum("btd,bte->de", h, dv_m)
        dh = dq_m @ p[pre + "attn.wq"].T
        dh += dk_m @ p[pre + "attn.wk"].T
        dh += dv_m @ p[pre + "attn.wv"].T
        dx_ln, dg1, db1 = _layer_norm_backward(dh, c["ln1"], p[pre + "ln1.g"])
        grads[pre + "ln1.g"] = dg1
        grads[pre + "ln1.b"] = db1
        dx = dx0 + dx_ln

    # Embedding scatter
    token_mat, kind_mat, cyc_mat = cache["token_mat"], cache["kind_mat"], cache["cyc_mat"]
    raw_sel = kind_mat == _RAW
    ct_sel = kind_mat == _CT
    if raw_sel.any():
        np.add.at(grads["tok_emb"], token_mat[raw_sel], dx[raw_sel])
    if ct_sel.any():
        np.add.at(grads["ct_emb"], cyc_mat[ct_sel] % cfg.n_ct_embeddings, dx[ct_sel])
    grads["pos_emb"][: dx.shape[1]] = dx.sum(axis=0)
    return grads


def _pack_batch(model, items: Sequence[tuple[np.ndarray, SequenceLayout]]):
    """Pad variable-length sequences into batch tensors plus per-item masks."""
    cfg = model.config
    lengths = [layout.total_len for _, layout in items]
    t_max = max(lengths)
    if t_max > cfg.max_positions:
        raise ValueError(
            f"sequence length {t_max} exceeds max_positions {cfg.max_positions}"
        )
    b = len(items)
    token_mat = np.zeros((b, t_max), dtype=np.int64)
    kind_mat = np.full((b, t_max), _PAD, dtype=np.int8)
    cyc_mat = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max, t_max), dtype=bool)
    for j, (tokens, layout) in enumerate(items):
        t = layout.total_len
        if len(tokens) != t:
            raise ValueError("token array length does not match layout")
        token_mat[j, :t] = np.where(layout.kinds == _CT, 0, tokens)
        kind_mat[j, :t] = layout.kinds
        cyc_mat[j, :t] = layout.segment_offsets
        mask[j, :t, :t] = build_compression_mask(layout)
    return token_mat, kind_mat, cyc_mat, mask, lengths


def forward(model: ToyModel, tokens: Sequence[int], layout: SequenceLayout) -> ForwardResult:
    """Run one sequence through the model under its compression mask.

    ``tokens`` must align with the layout; entries at ct positions are
    ignored (conventionally -1). Deterministic for fixed inputs.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    token_mat, kind_mat, cyc_mat, mask, _ = _pack_batch(model, [(tokens, layout)])
    logits, attentions, xf, _ = _forward_batch(
        model, token_mat, kind_mat, cyc_mat, mask, keep_cache=False
    )
    return ForwardResult(
        logits=logits[0],
        attentions=[a[0] for a in attentions],
        hidden=xf[0],
    )


# ---------------------------------------------------------------------------
# Log-probabilities, attention extraction, compression


def _log_softmax_rows(rows: np.ndarray) -> np.ndarray:
    top = rows.max(axis=-1, keepdims=True)
    return rows - (top + np.log(np.exp(rows - top).sum(axis=-1, keepdims=True)))


def _require_positive_counts(plan_counts: Sequence[int]):
    if any(c < 1 for c in plan_counts):
        raise ValueError("every chunk needs at least one compression token here")


def _chunk_prediction_rows(layout: SequenceLayout, chunk_index: int) -> np.ndarray:
    """Positions whose next-token logits predict the chunk's tokens, in order.

    Chunk 0 is predicted from its own segment (BOS included); later chunks
    get their first token predicted from the last ct position of the
    previous chunk, i.e. from the compressed memory.
    """
    start, seg_len = layout.raw_span(chunk_index)
    if chunk_index == 0:
        return np.arange(start, start + seg_len - 1)
    return np.arange(start - 1, start + seg_len - 1)


def chunk_logprobs(
    model: ToyModel,
    chunks: Sequence[Chunk],
    plan: AllocationPlan,
    chunk_index: int,
) -> np.ndarray:
    """Per-token log-probabilities of one chunk under compression visibility."""
    if not (0 <= chunk_index < len(chunks)):
        raise ValueError("chunk index out of range")
    _require_positive_counts(plan.counts)
    layout, tokens = assemble_sequence(chunks, plan.counts, bos_id=model.config.bos_id)
    result = forward(model, tokens, layout)
    return _gather_chunk_logprobs(result.logits, layout, tokens, chunks)[chunk_index]


def _gather_chunk_logprobs(logits, layout, tokens, chunks):
    logprob_rows = _log_softmax_rows(logits)
    out = []
    for chunk in chunks:
        rows = _chunk_prediction_rows(layout, chunk.index)
        targets = np.asarray(chunk.tokens, dtype=np.int64)
        out.append(logprob_rows[rows, targets])
    return out


def _ct_attention_from_result(result: ForwardResult, layout: SequenceLayout):
    ct_positions = layout.ct_positions
    if ct_positions.size == 0:
        raise ValueError("layout has no compression-token positions")
    last_row = result.attentions[-1].mean(axis=0)[layout.total_len - 1]
    mass = last_row[ct_positions]
    total = mass.sum()
    if total <= 0.0:
        raise ValueError("final position places no attention on compression tokens")
    return mass / total, dict(layout.ct_ownership)


def extract_last_token_attention(
    model: ToyModel,
    chunks: Sequence[Chunk],
    plan: AllocationPlan,
    query_tokens: Sequence[int] = (),
) -> tuple[np.ndarray, dict[int, int]]:
    """Attention of the final position onto ct keys, head-averaged, last layer.

    Returns the renormalized weights (summing to 1 over ct positions, in
    position order) and the ownership map from weight index to chunk. With no
    query appended, the final ct position itself serves as the probe.
    """
    _require_positive_counts(plan.counts)
    layout, tokens = assemble_sequence(
        chunks, plan.counts, query_tokens, bos_id=model.config.bos_id
    )
    result = forward(model, tokens, layout)
    return _ct_attention_from_result(result, layout)


@dataclass
class DocumentSignals:
    """Raw per-chunk signal material from a single scoring pass."""

    logprobs: list[np.ndarray]  # per chunk, one value per ground-truth token
    ct_weights: np.ndarray  # renormalized attention over ct positions
    ct_ownership: dict[int, int]


def document_signals(
    model: ToyModel,
    chunks: Sequence[Chunk],
    plan: AllocationPlan,
    query_tokens: Sequence[int] = (),
) -> DocumentSignals:
    """One forward pass yielding both scoring signals for a document."""
    _require_positive_counts(plan.counts)
    layout, tokens = assemble_sequence(
        chunks, plan.counts, query_tokens, bos_id=model.config.bos_id
    )
    result = forward(model, tokens, layout)
    weights, ownership = _ct_attention_from_result(result, layout)
    return DocumentSignals(
        logprobs=_gather_chunk_logprobs(result.logits, layout, tokens, chunks),
        ct_weights=weights,
        ct_ownership=ownership,
    )


def compress_sequence(
    model: ToyModel,
    chunks: Sequence[Chunk],
    plan: AllocationPlan,
    method: str = "full",
) -> np.ndarray:
    """Final hidden states at ct positions, `[sum(counts), d_model]`.

    ``method="full"`` runs one masked pass over the whole interleaved
    sequence; ``method="incremental"`` processes chunk by chunk, carrying
    only the per-layer keys/values of earlier ct positions, exactly as the
    chunk-wise construction prescribes. Both paths agree to float precision.
    """
    _require_positive_counts(plan.counts)
    if method == "full":
        layout, tokens = assemble_sequence(chunks, plan.counts, bos_id=model.config.bos_id)
        result = forward(model, tokens, layout)
        return result.hidden[layout.ct_positions]
    if method == "incremental":
        return _compress_incremental(model, chunks, plan.counts)
    raise ValueError(f"unknown method {method!r}")


def _compress_incremental(model, chunks, ct_counts):
    cfg = model.config
    p = model.params
    scale = 1.0 / math.sqrt(cfg.head_dim)
    k_cache = [np.zeros((0, cfg.d_model)) for _ in range(cfg.n_layers)]
    v_cache = [np.zeros((0, cfg.d_model)) for _ in range(cfg.n_layers)]
    collected = []
    offset = 0

    for chunk, count in zip(chunks, ct_counts):
        raw_tokens = list(chunk.tokens)
        if chunk.index == 0:
            raw_tokens = [cfg.bos_id] + raw_tokens
        n_raw, n_ct = len(raw_tokens), count
        t_new = n_raw + n_ct
        if offset + t_new > cfg.max_positions:
            raise ValueError("sequence exceeds max_positions")

        emb = np.zeros((t_new, cfg.d_model))
        emb[:n_raw] = p["tok_emb"][np.asarray(raw_tokens)]
        emb[n_raw:] = p["ct_emb"][np.arange(n_ct) % cfg.n_ct_embeddings]
        emb += p["pos_emb"][offset : offset + t_new]

        n_cached = k_cache[0].shape[0]
        # rows: new positions; cols: cached ct keys then new keys
        mask = np.zeros((t_new, n_cached + t_new), dtype=bool)
        mask[:, :n_cached] = True  # earlier chunks' ct memory
        new_block = np.tril(np.ones((t_new, t_new), dtype=bool))
        new_block[:n_raw, n_raw:] = False  # raw rows never see own-chunk ct
        mask[:, n_cached:] = new_block

        x = emb
        for i in range(cfg.n_layers):
            pre = f"l{i}."
            h, _ = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = h @ p[pre + "attn.wq"]
            k_new = h @ p[pre + "attn.wk"]
            v_new = h @ p[pre + "attn.wv"]
            keys = np.concatenate([k_cache[i], k_new], axis=0)
            values = np.concatenate([v_cache[i], v_new], axis=0)
            qh = q.reshape(t_new, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
            kh = keys.reshape(-1, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
            vh = values.reshape(-1, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
            scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
            attn = _masked_softmax(scores, mask[None, :, :])
            ctx = np.matmul(attn, vh).transpose(1, 0, 2).reshape(t_new, cfg.d_model)
            x = x + ctx @ p[pre + "attn.wo"]
            h2, _ = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            g, _ = _gelu(h2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
            x = x + g @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
            k_cache[i] = np.concatenate([k_cache[i], k_new[n_raw:]], axis=0)
            v_cache[i] = np.concatenate([v_cache[i], v_new[n_raw:]], axis=0)
        xf, _ = _layer_norm(x, p["lnf.g"], p["lnf.b"])
        collected.append(xf[n_raw:])
        offset += t_new

    return np.concatenate(collected, axis=0)


# ---------------------------------------------------------------------------
# Loss, gradients, training


@dataclass(frozen=True)
class TrainingExample:
    """One sequence with next-token targets (-1 marks no-loss positions)."""

    tokens: np.ndarray
    layout: SequenceLayout
    targets: np.ndarray


def make_training_example(
    chunks: Sequence[Chunk],
    ct_counts: Sequence[int],
    query_tokens: Sequence[int] = (),
    *,
    config: ToyModelConfig,
) -> TrainingExample:
    """Assemble a sequence and derive within-segment next-token targets.

    Targets live on raw positions whose successor is a raw token of the same
    segment; ct positions never carry loss.
    """
    layout, tokens = assemble_sequence(chunks, ct_counts, query_tokens, bos_id=config.bos_id)
    targets = np.full(layout.total_len, -1, dtype=np.int64)
    at = 0
    for seg in layout.segments:
        if seg.kind == "raw" and seg.length > 1:
            targets[at : at + seg.length - 1] = tokens[at + 1 : at + seg.length]
        at += seg.length
    return TrainingExample(tokens=tokens, layout=layout, targets=targets)


def _batch_tensors(model, examples: Sequence[TrainingExample]):
    token_mat, kind_mat, cyc_mat, mask, lengths = _pack_batch(
        model, [(ex.tokens, ex.layout) for ex in examples]
    )
    t_max = token_mat.shape[1]
    target_mat = np.full((len(examples), t_max), -1, dtype=np.int64)
    for j, ex in enumerate(examples):
        target_mat[j, : lengths[j]] = ex.targets
    return token_mat, kind_mat, cyc_mat, mask, target_mat


def _cross_entropy(logits, target_mat):
    rows_b, rows_t = np.nonzero(target_mat >= 0)
    if rows_b.size == 0:
        raise ValueError("no target positions")
    picked = logits[rows_b, rows_t]
    logprobs = _log_softmax_rows(picked)
    targets = target_mat[rows_b, rows_t]
    n = rows_b.size
    loss = -logprobs[np.arange(n), targets].mean()
    return loss, (rows_b, rows_t, targets, logprobs, n)


def loss_and_gradients(
    model: ToyModel,
    examples: Sequence[TrainingExample],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over target positions, plus gradients."""
    token_mat, kind_mat, cyc_mat, mask, target_mat = _batch_tensors(model, examples)
    logits, _, _, cache = _forward_batch(
        model, token_mat, kind_mat, cyc_mat, mask, keep_cache=True
    )
    loss, (rows_b, rows_t, targets, logprobs, n) = _cross_entropy(logits, target_mat)
    dpicked = np.exp(logprobs)
    dpicked[np.arange(n), targets] -= 1.0
    dpicked /= n
    dlogits = np.zeros_like(logits)
    dlogits[rows_b, rows_t] = dpicked
    grads = _backward_batch(model, cache, dlogits)
    return float(loss), grads


def _loss_only(model: ToyModel, examples: Sequence[TrainingExample]) -> float:
    token_mat, kind_mat, cyc_mat, mask, target_mat = _batch_tensors(model, examples)
    logits, _, _, _ = _forward_batch(
        model, token_mat, kind_mat, cyc_mat, mask, keep_cache=False
    )
    loss, _ = _cross_entropy(logits, target_mat)
    return float(loss)


def train(
    model: ToyModel,
    corpus: Sequence[Mapping],
    steps: int,
    step_size: float,
    seed: int,
    *,
    chunk_len: int = 32,
    ct_choices: Sequence[int] = (1, 2, 4, 8, 16),
    batch_size: int = 8,
) -> tuple[ToyModel, list[float]]:
    """Train on corpus documents with randomized per-chunk ct counts (Adam).

    Corpus entries are mappings with key ``doc`` (token ids) and optional
    ``query``/``answer`` ids, which are appended as a trailing raw chunk so
    answer prediction through the compressed memory is part of the loss.
    Deterministic for a fixed seed; the input model is left untouched.
    """
    from .core import segment_into_chunks

    if not corpus:
        raise ValueError("corpus must not be empty")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    trained = model.copy()
    losses: list[float] = []
    if steps == 0:
        return trained, losses

    cfg = trained.config
    rng = random.Random(seed)
    m_state = {k: np.zeros_like(v) for k, v in trained.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in trained.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def build_example(entry) -> TrainingExample:
        chunks = segment_into_chunks(entry["doc"], chunk_len)
        counts = [rng.choice(ct_choices) for _ in chunks]
        query = list(entry.get("query", ())) + list(entry.get("answer", ()))
        need = 1 + sum(len(c) for c in chunks) + sum(counts) + len(query)
        if need > cfg.max_positions:
            counts = [min(ct_choices)] * len(chunks)
            need = 1 + sum(len(c) for c in chunks) + sum(counts) + len(query)
            if need > cfg.max_positions:
                raise ValueError("document too long for max_positions")
        return make_training_example(chunks, counts, query, config=cfg)

    # Batches are drawn in rounds of four and bucketed by length so short
    # documents are not padded up to the longest one in the corpus.
    pending: list[list[TrainingExample]] = []

    def next_batch() -> list[TrainingExample]:
        if not pending:
            pool = [
                build_example(corpus[rng.randrange(len(corpus))])
                for _ in range(4 * batch_size)
            ]
            pool.sort(key=lambda ex: ex.layout.total_len)
            pending.extend(
                pool[i : i + batch_size] for i in range(0, len(pool), batch_size)
            )
        return pending.pop(0)

    for step in range(steps):
        batch = next_batch()
        loss, grads = loss_and_gradients(trained, batch)
        if not math.isfinite(loss):
            raise ValueError(f"training diverged at step {step}")
        losses.append(loss)
        t = step + 1
        for name, g in grads.items():
            m_state[name] = beta1 * m_state[name] + (1 - beta1) * g
            v_state[name] = beta2 * v_state[name] + (1 - beta2) * (g * g)
            m_hat = m_state[name] / (1 - beta1**t)
            v_hat = v_state[name] / (1 - beta2**t)
            trained.params[name] -= step_size * m_hat / (np.sqrt(v_hat) + eps)
    return trained, losses


def greedy_decode(
    model: ToyModel,
    chunks: Sequence[Chunk],
    counts: Sequence[int],
    query_tokens: Sequence[int],
    n_tokens: int,
) -> list[int]:
    """Greedily continue the query segment for ``n_tokens`` steps."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    generated: list[int] = []
    query = list(query_tokens)
    for _ in range(n_tokens):
        layout, tokens = assemble_sequence(chunks, counts, query, bos_id=model.config.bos_id)
        result = forward(model, tokens, layout)
        nxt = int(np.argmax(result.logits[-1]))
        generated.append(nxt)
        query.append(nxt)
    return generated


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(model: ToyModel, path: str | Path) -> None:
    """Write a byte-reproducible checkpoint (config + named float64 tensors)."""
    names = sorted(model.params)
    header = {
        "config": asdict(model.config),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            fh.write(arr.tobytes())


def load_model(path: str | Path) -> ToyModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError("not a toy model checkpoint")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ToyModelConfig(**header["config"])
        params = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            n_bytes = int(np.prod(shape)) * 8 if shape else 8
            data = fh.read(n_bytes)
            params[spec["name"]] = (
                np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
            )
    model = ToyModel(params=params, config=config)
    expected = set(init_model(config).params)
    if set(params) != expected:
        raise ValueError("checkpoint tensor names do not match the architecture")
    return model


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    samples: int
    tolerance: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradient_check(
    seed: int = 0,
    samples: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    config: ToyModelConfig | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Samples random parameter coordinates (every tensor eligible) on a small
    random model and batch. The relative error denominator is floored at
    1e-5 to keep near-zero gradients from inflating the ratio.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if config is None:
        config = ToyModelConfig(
            vocab_size=33, d_model=16, n_layers=2, n_heads=2, d_ff=24,
            max_positions=64, n_ct_embeddings=4, seed=seed,
        )
    model = init_model(config)
    # Give the zero-initialized head some signal so its gradients are generic.
    rng = np.random.default_rng(seed + 1)
    model.params["head.w"] += rng.normal(0, 0.05, model.params["head.w"].shape)

    def rand_chunk(index, length):
        return Chunk(index, tuple(rng.integers(0, config.vocab_size - 1, size=length)))

    examples = [
        make_training_example(
            [rand_chunk(0, 5), rand_chunk(1, 4)], [2, 1],
            list(rng.integers(0, config.vocab_size - 1, size=4)), config=config,
        ),
        make_training_example([rand_chunk(0, 6)], [3], config=config),
    ]
    _, grads = loss_and_gradients(model, examples)

    names = sorted(model.params)
    sizes = np.array([model.params[n].size for n in names], dtype=np.float64)
    probs = sizes / sizes.sum()
    max_rel, worst = 0.0, ""
    for _ in range(samples):
        name = names[int(rng.choice(len(names), p=probs))]
        flat = model.params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        original = flat[idx]
        flat[idx] = original + step
        loss_plus = _loss_only(model, examples)
        flat[idx] = original - step
        loss_minus = _loss_only(model, examples)
        flat[idx] = original
        numeric = (loss_plus - loss_minus) / (2 * step)
        analytic = grads[name].reshape(-1)[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
        if rel > max_rel:
            max_rel, worst = rel, f"{name}[{idx}]"
    return GradCheckReport(
        max_rel_err=max_rel, samples=samples, tolerance=tolerance, worst_param=worst
    )
