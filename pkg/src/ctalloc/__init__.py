"""Dynamic allocation of compression-token budgets across context chunks."""

from .core import AllocationPlan, Budget, Chunk, RateSet, Strategy, segment_into_chunks
from .scoring import ChunkSignals, ScoreVector, chunk_attention, chunk_ppl, combined_scores, softmax
from .allocator import dynamic_allocate, random_allocate, reallocate, uniform_allocate, valid_counts

__all__ = [
    "AllocationPlan",
    "Budget",
    "Chunk",
    "ChunkSignals",
    "RateSet",
    "ScoreVector",
    "Strategy",
    "chunk_attention",
    "chunk_ppl",
    "combined_scores",
    "dynamic_allocate",
    "random_allocate",
    "reallocate",
    "segment_into_chunks",
    "softmax",
    "uniform_allocate",
    "valid_counts",
]

__version__ = "0.1.0"
