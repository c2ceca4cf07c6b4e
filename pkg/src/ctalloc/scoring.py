"""Chunk scoring: local perplexity, global attention mass, and their blend.

The combined score of chunk i is ``softmax(alpha * A_i - (1 - alpha) * P_i /
sum(P))``: attention mass pulls a chunk up, relatively high perplexity pushes
it down. Both signal vectors are normalized to sum to one before blending so
the two terms live on the same scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class ChunkSignals:
    """Per-chunk raw signals: summed token NLL (nats) and attention mass."""

    ppl: tuple[float, ...]
    attn: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ppl", tuple(float(p) for p in self.ppl))
        object.__setattr__(self, "attn", tuple(float(a) for a in self.attn))
        if len(self.ppl) == 0:
            raise ValueError("signals must cover at least one chunk")
        if len(self.ppl) != len(self.attn):
            raise ValueError("ppl and attn must have the same length")
        for name, values in (("ppl", self.ppl), ("attn", self.attn)):
            for v in values:
                if not math.isfinite(v) or v < 0.0:
                    raise ValueError(f"{name} entries must be finite and >= 0")

    @property
    def n_chunks(self) -> int:
        return len(self.ppl)


@dataclass(frozen=True)
class ScoreVector:
    """Post-softmax chunk scores; strictly positive and summing to one."""

    s: tuple[float, ...]
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "s", tuple(float(x) for x in self.s))
        if not self.s:
            raise ValueError("score vector must not be empty")
        if any(not math.isfinite(x) or x <= 0.0 for x in self.s):
            raise ValueError("scores must be finite and strictly positive")
        if abs(math.fsum(self.s) - 1.0) > 1e-9:
            raise ValueError("scores must sum to 1")
        if self.alpha is not None and not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.s)


def softmax(values: Sequence[float]) -> list[float]:
    """Numerically stable softmax (max subtraction, natural base)."""
    if len(values) == 0:
        raise ValueError("empty input")
    values = [float(v) for v in values]
    if any(not math.isfinite(v) for v in values):
        raise ValueError("softmax input must be finite")
    top = max(values)
    exps = [math.exp(v - top) for v in values]
    total = math.fsum(exps)
    return [e / total for e in exps]


def chunk_ppl(token_logprobs: Sequence[float]) -> float:
    """Summed negative log-likelihood of one chunk's ground-truth tokens.

    The ground truth is one-hot, so the chunk's cross-entropy sum collapses to
    minus the sum of the per-token log-probabilities. Lower means the model
    found the chunk more predictable, i.e. more relevant in context.
    """
    logprobs = [float(v) for v in token_logprobs]
    if not logprobs:
        raise ValueError("empty chunk")
    for lp in logprobs:
        if not math.isfinite(lp) or lp > 0.0:
            raise ValueError("invalid log-probability")
    return -math.fsum(logprobs)


def chunk_attention(
    weights: Sequence[float],
    ownership: Mapping[int, int],
    n_chunks: int,
) -> list[float]:
    """Sum attention weights over compression-token positions per owning chunk.

    ``weights[j]`` is the mass on the j-th compression-token key position and
    ``ownership[j]`` names the chunk that owns it. Chunks owning no positions
    get 0.
    """
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    mass = [0.0] * n_chunks
    for pos, w in enumerate(weights):
        w = float(w)
        if not math.isfinite(w) or w < 0.0:
            raise ValueError("invalid attention weight")
        if pos not in ownership:
            raise ValueError(f"position {pos} missing from ownership map")
        chunk = ownership[pos]
        if not (0 <= chunk < n_chunks):
            raise ValueError(f"ownership chunk index {chunk} out of range")
        mass[chunk] += w
    return mass


def combined_scores(signals: ChunkSignals, alpha: float) -> ScoreVector:
    """Blend attention and perplexity signals into per-chunk budget shares.

    The perplexity vector is normalized by its sum so a uniform rescaling of
    all chunk NLLs leaves the result unchanged; if every chunk has zero NLL
    the term carries no ranking information and is treated as uniform.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    n = signals.n_chunks
    total_ppl = math.fsum(signals.ppl)
    if total_ppl > 0.0:
        ppl_share = [p / total_ppl for p in signals.ppl]
    else:
        ppl_share = [1.0 / n] * n
    raw = [a * alpha - p * (1.0 - alpha) for a, p in zip(signals.attn, ppl_share)]
    return ScoreVector(s=tuple(softmax(raw)), alpha=alpha)
