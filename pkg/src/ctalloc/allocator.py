"""Turn chunk scores into integer soft-token allocations.

Three strategies produce plans that spend the budget exactly: dynamic
(largest-remainder apportionment of score shares), uniform, and seeded
random. ``reallocate`` then snaps a plan onto the counts a rate set permits
and greedily doubles high-scoring chunks until the leftover budget is spent.
"""

from __future__ import annotations

import math
import random
from collections import Counter

from .core import AllocationPlan, Budget, RateSet, Strategy
from .scoring import ScoreVector


def dynamic_allocate(
    scores: ScoreVector,
    budget: Budget,
    min_per_chunk: int = 0,
) -> AllocationPlan:
    """Give every chunk ``min_per_chunk`` tokens plus a score-proportional share.

    The fractional shares are rounded by the largest-remainder method, so the
    plan spends the budget exactly and a strictly higher score never receives
    fewer tokens.
    """
    if min_per_chunk < 0:
        raise ValueError("min_per_chunk must be >= 0")
    n = len(scores)
    if budget.total < n * min_per_chunk:
        raise ValueError("infeasible budget")
    remaining = budget.total - n * min_per_chunk
    shares = [s * remaining for s in scores.s]
    floors = [math.floor(x) for x in shares]
    leftover = remaining - sum(floors)
    # Hand out the leftover units by descending fractional part, index-stable.
    order = sorted(range(n), key=lambda i: (-(shares[i] - floors[i]), i))
    counts = [min_per_chunk + f for f in floors]
    for i in order[:leftover]:
        counts[i] += 1
    return AllocationPlan(
        counts=tuple(counts),
        budget=budget,
        strategy=Strategy.DYNAMIC,
        alpha=scores.alpha,
    )


def uniform_allocate(n_chunks: int, budget: Budget) -> AllocationPlan:
    """Spread the budget evenly; the ``M mod N`` surplus goes to the front."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    base, surplus = divmod(budget.total, n_chunks)
    counts = tuple(base + 1 if i < surplus else base for i in range(n_chunks))
    return AllocationPlan(counts=counts, budget=budget, strategy=Strategy.UNIFORM)


def random_allocate(n_chunks: int, budget: Budget, seed: int) -> AllocationPlan:
    """Assign each budget token to a uniformly drawn chunk (seeded)."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    rng = random.Random(seed)
    drawn = Counter(rng.choices(range(n_chunks), k=budget.total))
    counts = tuple(drawn.get(i, 0) for i in range(n_chunks))
    return AllocationPlan(counts=counts, budget=budget, strategy=Strategy.RANDOM)


def valid_counts(rateset: RateSet) -> tuple[int, ...]:
    """Per-chunk token counts permitted by the rate set, ascending."""
    return rateset.valid_counts


def _snap(count: int, counts_asc: tuple[int, ...]) -> int:
    # Nearest valid count; a distance tie snaps to the smaller one so the
    # doubling loop, not the snap, spends the leftover.
    return min(counts_asc, key=lambda v: (abs(v - count), v))


def reallocate(
    plan: AllocationPlan,
    scores: ScoreVector,
    budget: Budget,
    rateset: RateSet,
) -> AllocationPlan:
    """Constrain a plan to the rate set's valid counts without overspending.

    Step 1 snaps every count to the nearest valid count (ties snap down). If
    snapping overshot the budget, low-scoring chunks are stepped down to the
    next smaller valid count until the plan fits again. Step 2 repeatedly
    doubles the highest-scoring chunk whose doubled count is still valid and
    whose increment fits the remaining leftover; each chunk can be doubled at
    most once. Whatever cannot be spent is reported as the plan's residual.
    """
    vc = rateset.valid_counts
    vc_set = set(vc)
    n = len(plan.counts)
    if len(scores) != n:
        raise ValueError("plan and scores must cover the same chunks")
    if budget.total < n * vc[0]:
        raise ValueError("infeasible budget")

    counts = [_snap(c, vc) for c in plan.counts]

    while sum(counts) > budget.total:
        # Mirror of the growth rule: shrink the lowest score first,
        # breaking ties toward the highest index.
        shrinkable = [i for i in range(n) if counts[i] > vc[0]]
        j = min(shrinkable, key=lambda i: (scores.s[i], -i))
        counts[j] = max(v for v in vc if v < counts[j])

    removed: set[int] = set()
    while True:
        leftover = budget.total - sum(counts)
        if leftover <= 0:
            break
        candidates = [
            i
            for i in range(n)
            if i not in removed and 2 * counts[i] in vc_set and counts[i] <= leftover
        ]
        if not candidates:
            break
        best = min(candidates, key=lambda i: (-scores.s[i], i))
        counts[best] *= 2
        removed.add(best)

    return AllocationPlan(
        counts=tuple(counts),
        budget=budget,
        strategy=plan.strategy,
        alpha=plan.alpha,
        residual=budget.total - sum(counts),
    )
