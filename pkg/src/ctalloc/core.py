"""Shared value types: chunks, budgets, rate sets, and allocation plans.

Everything here is an immutable value object, safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence


class Strategy(str, Enum):
    """How a soft-token budget is spread across chunks."""

    DYNAMIC = "dynamic"
    UNIFORM = "uniform"
    RANDOM = "random"


@dataclass(frozen=True)
class Chunk:
    """A contiguous run of token ids, the unit the budget is allocated over."""

    index: int
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.index < 0:
            raise ValueError("chunk index must be >= 0")
        if len(self.tokens) == 0:
            raise ValueError("chunk must hold at least one token")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Budget:
    """Total number of soft tokens available for one document."""

    total: int

    def __post_init__(self):
        if self.total < 0:
            raise ValueError("budget must be >= 0")


@dataclass(frozen=True)
class RateSet:
    """Permitted compression rates over a fixed chunk length.

    Each rate r turns a chunk of ``chunk_len`` tokens into ``chunk_len // r``
    soft tokens, so every rate must divide the chunk length exactly.
    """

    rates: tuple[int, ...]
    chunk_len: int

    def __post_init__(self):
        rates = tuple(sorted(set(int(r) for r in self.rates)))
        object.__setattr__(self, "rates", rates)
        if not rates:
            raise ValueError("rate set must not be empty")
        if self.chunk_len < 1:
            raise ValueError("invalid chunk length")
        for r in rates:
            if r < 1:
                raise ValueError(f"rate {r} must be >= 1")
            if self.chunk_len % r != 0:
                raise ValueError(f"rate {r} does not divide chunk length {self.chunk_len}")

    @property
    def valid_counts(self) -> tuple[int, ...]:
        """Per-chunk soft-token counts reachable under these rates, ascending."""
        return tuple(sorted(self.chunk_len // r for r in self.rates))


@dataclass(frozen=True)
class AllocationPlan:
    """Integer soft-token counts per chunk.

    ``residual`` is the part of the budget a reallocation could not place;
    fresh plans always carry residual 0, so counts + residual add up to the
    budget either way.
    """

    counts: tuple[int, ...]
    budget: Budget
    strategy: Strategy
    alpha: float | None = None
    residual: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.counts:
            raise ValueError("plan must cover at least one chunk")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be >= 0")
        if self.residual < 0:
            raise ValueError("residual must be >= 0")
        if sum(self.counts) + self.residual != self.budget.total:
            raise ValueError(
                f"counts sum {sum(self.counts)} + residual {self.residual} "
                f"!= budget {self.budget.total}"
            )
        if self.alpha is not None and not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def n_chunks(self) -> int:
        return len(self.counts)


def segment_into_chunks(tokens: Sequence[int], chunk_len: int) -> tuple[Chunk, ...]:
    """Split a token sequence into consecutive chunks of ``chunk_len`` tokens.

    The final chunk may be shorter; concatenating the chunk token tuples
    reproduces the input exactly.
    """
    if chunk_len < 1:
        raise ValueError("invalid chunk length")
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("empty input")
    n_chunks = math.ceil(len(tokens) / chunk_len)
    return tuple(
        Chunk(index=i, tokens=tokens[i * chunk_len : (i + 1) * chunk_len])
        for i in range(n_chunks)
    )
