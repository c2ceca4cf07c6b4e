"""Synthetic needle-retrieval tasks and allocation experiment sweeps.

Each task hides one key=value pair (the needle) in a known chunk among
distractor pairs, then asks for the value by key. A run of the full pipeline
is: segment, provisional uniform compression, score (chunk NLL + final-token
attention over ct keys), allocate, optionally reallocate onto the rate set,
and answer by greedy decoding through the compressed memory. Reports carry
one row per trial; aggregates are always recomputable from the rows.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .allocator import dynamic_allocate, random_allocate, reallocate, uniform_allocate
from .core import AllocationPlan, Budget, Chunk, RateSet, Strategy, segment_into_chunks
from .scoring import ChunkSignals, ScoreVector, chunk_attention, chunk_ppl, combined_scores
from .toymodel import (
    ToyModel,
    document_signals,
    greedy_decode,
    loss_and_gradients,
    make_training_example,
)

KEY_BASE = ord("A")
VALUE_BASE = ord("a")
QUERY_MARK = ord("?")
FILLER = ord(" ")
PAIR_BYTES = 2  # pairs are a bare [key, value] byte couple

CSV_COLUMNS = (
    "trial",
    "strategy",
    "alpha",
    "budget",
    "needle_position",
    "tokens_on_needle_chunk",
    "median_tokens_elsewhere",
    "retrieval_correct",
    "residual",
    "task_seed",
)


@dataclass(frozen=True)
class NeedleTaskConfig:
    n_chunks: int = 8
    chunk_len: int = 32
    needle_position: int = 0
    key_alphabet: int = 8
    value_alphabet: int = 8
    distractor_pairs: int = 15  # per chunk; every chunk holds this + 1 pairs
    trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        if not (0 <= self.needle_position < self.n_chunks):
            raise ValueError("needle_position out of range")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.key_alphabet < 2:
            raise ValueError("alphabet too small to guarantee a unique key")
        if self.key_alphabet > VALUE_BASE - KEY_BASE:
            raise ValueError("key alphabet overlaps the value byte range")
        if self.value_alphabet < 1 or VALUE_BASE + self.value_alphabet > 256:
            raise ValueError("value alphabet out of byte range")
        if PAIR_BYTES * self.pairs_per_chunk > self.chunk_len:
            raise ValueError("chunk_len too small for the requested pairs")

    @property
    def pairs_per_chunk(self) -> int:
        return self.distractor_pairs + 1


@dataclass(frozen=True)
class NeedleTask:
    doc_tokens: tuple[int, ...]
    query_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    needle_chunk: int


def _derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (platform independent)."""
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def _build_task(config: NeedleTaskConfig, rng: random.Random) -> NeedleTask:
    # Every document carries one consistent key -> value mapping. Distractor
    # keys recur across chunks with their mapped value, so predicting values
    # requires reading earlier chunks' compression tokens; the queried key is
    # the one key that appears in exactly one chunk.
    keys = [KEY_BASE + i for i in range(config.key_alphabet)]
    mapping = {k: VALUE_BASE + rng.randrange(config.value_alphabet) for k in keys}
    needle_key = rng.choice(keys)
    distractor_keys = [k for k in keys if k != needle_key]
    needle_slot = rng.randrange(config.pairs_per_chunk)

    doc: list[int] = []
    for c in range(config.n_chunks):
        chunk: list[int] = []
        for slot in range(config.pairs_per_chunk):
            if c == config.needle_position and slot == needle_slot:
                key = needle_key
            else:
                key = rng.choice(distractor_keys)
            chunk.extend((key, mapping[key]))
        chunk.extend([FILLER] * (config.chunk_len - len(chunk)))
        doc.extend(chunk)
    return NeedleTask(
        doc_tokens=tuple(doc),
        query_tokens=(QUERY_MARK, needle_key),
        answer_tokens=(mapping[needle_key],),
        needle_chunk=config.needle_position,
    )


def gen_needle_corpus(config: NeedleTaskConfig) -> list[NeedleTask]:
    """Deterministically generate ``config.trials`` tasks for one position."""
    rng = random.Random(config.seed)
    return [_build_task(config, rng) for _ in range(config.trials)]


def make_training_corpus(
    config: NeedleTaskConfig, n_docs: int, seed: int
) -> list[dict]:
    """Corpus entries (doc/query/answer) with needle positions cycled."""
    entries = []
    for i in range(n_docs):
        cfg = replace(
            config,
            needle_position=i % config.n_chunks,
            seed=_derive_seed(seed, "corpus", i),
            trials=1,
        )
        (task,) = gen_needle_corpus(cfg)
        entries.append(
            {
                "doc": list(task.doc_tokens),
                "query": list(task.query_tokens),
                "answer": list(task.answer_tokens),
            }
        )
    return entries


def write_corpus(path: str | Path, entries: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            if "doc" not in entry:
                raise ValueError(f"line {lineno}: corpus entry lacks 'doc'")
            entries.append(entry)
    return entries


# ---------------------------------------------------------------------------
# Pipeline pieces


def compute_signals(
    model: ToyModel,
    chunks: Sequence[Chunk],
    provisional: AllocationPlan,
    query_tokens: Sequence[int] = (),
) -> ChunkSignals:
    """Score a document under a provisional compression layout."""
    raw = document_signals(model, chunks, provisional, query_tokens)
    ppl = [chunk_ppl(lp.tolist()) for lp in raw.logprobs]
    attn = chunk_attention(raw.ct_weights.tolist(), raw.ct_ownership, len(chunks))
    return ChunkSignals(ppl=tuple(ppl), attn=tuple(attn))


def _uniform_scores(n: int) -> ScoreVector:
    return ScoreVector(s=(1.0 / n,) * n)


def make_plan(
    strategy: Strategy | str,
    scores: ScoreVector,
    budget: Budget,
    rateset: RateSet | None,
    seed: int,
) -> AllocationPlan:
    """Allocate under one strategy and optionally snap to the rate set."""
    strategy = Strategy(strategy)
    n = len(scores)
    if strategy is Strategy.DYNAMIC:
        plan = dynamic_allocate(scores, budget, min_per_chunk=1)
        realloc_scores = scores
    elif strategy is Strategy.UNIFORM:
        plan = uniform_allocate(n, budget)
        realloc_scores = _uniform_scores(n)
    else:
        plan = random_allocate(n, budget, seed=seed)
        realloc_scores = _uniform_scores(n)
    if rateset is not None:
        plan = reallocate(plan, realloc_scores, budget, rateset)
    return plan


def _answer_is_correct(model, chunks, plan, task) -> bool:
    predicted = greedy_decode(
        model, chunks, plan.counts, task.query_tokens, len(task.answer_tokens)
    )
    return tuple(predicted) == task.answer_tokens


def _trial_row(model, task, config, strategy, budget, alpha, rateset, scores, trial, task_seed):
    chunks = segment_into_chunks(task.doc_tokens, config.chunk_len)
    plan = make_plan(strategy, scores, budget, rateset, seed=_derive_seed(task_seed, "rand"))
    others = [c for i, c in enumerate(plan.counts) if i != task.needle_chunk]
    return {
        "trial": trial,
        "strategy": Strategy(strategy).value,
        "alpha": alpha,
        "budget": budget.total,
        "needle_position": task.needle_chunk,
        "tokens_on_needle_chunk": plan.counts[task.needle_chunk],
        "median_tokens_elsewhere": float(statistics.median(others)) if others else 0.0,
        "retrieval_correct": _answer_is_correct(model, chunks, plan, task),
        "residual": plan.residual,
        "task_seed": task_seed,
    }


def _ensure_model_ready(model: ToyModel, config: NeedleTaskConfig) -> None:
    """Reject models whose next-token loss is still at the uniform baseline."""
    cfg = replace(config, seed=_derive_seed(config.seed, "quality"), trials=4)
    tasks = gen_needle_corpus(cfg)
    examples = []
    for task in tasks:
        chunks = segment_into_chunks(task.doc_tokens, config.chunk_len)
        counts = [max(1, 4)] * len(chunks)
        examples.append(
            make_training_example(
                chunks, counts, list(task.query_tokens) + list(task.answer_tokens),
                config=model.config,
            )
        )
    loss, _ = loss_and_gradients(model, examples)
    baseline = math.log(model.config.vocab_size)
    if loss >= 0.98 * baseline:
        raise ValueError(
            f"model looks untrained: mean loss {loss:.3f} is at the uniform "
            f"baseline {baseline:.3f}"
        )


# ---------------------------------------------------------------------------
# Reports


@dataclass
class BenchReport:
    sweep: str
    rows: list[dict]
    group_keys: tuple[str, ...]
    aggregates: list[dict]

    def recompute_aggregates(self) -> list[dict]:
        return aggregate_rows(self.rows, self.group_keys)


def aggregate_rows(rows: Sequence[dict], group_keys: Sequence[str]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = tuple(row[k] for k in group_keys)
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups, key=repr):
        members = groups[key]
        agg = dict(zip(group_keys, key))
        agg["n_trials"] = len(members)
        agg["accuracy"] = sum(1 for r in members if r["retrieval_correct"]) / len(members)
        agg["mean_tokens_on_needle"] = statistics.fmean(
            r["tokens_on_needle_chunk"] for r in members
        )
        agg["mean_median_tokens_elsewhere"] = statistics.fmean(
            r["median_tokens_elsewhere"] for r in members
        )
        out.append(agg)
    return out


def write_report(report: BenchReport, csv_path: str | Path, summary_path: str | Path) -> None:
    """Per-trial rows as CSV plus a JSON summary with the aggregates."""
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)
    summary = {
        "sweep": report.sweep,
        "group_keys": list(report.group_keys),
        "aggregates": report.aggregates,
    }
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Sweeps


def _signals_for_task(model, task, config, budget, provisional_counts=None):
    chunks = segment_into_chunks(task.doc_tokens, config.chunk_len)
    provisional = (
        uniform_allocate(len(chunks), budget)
        if provisional_counts is None
        else AllocationPlan(
            tuple(provisional_counts), Budget(sum(provisional_counts)), Strategy.UNIFORM
        )
    )
    return compute_signals(model, chunks, provisional, task.query_tokens)


def _validate_budget(config: NeedleTaskConfig, budget: Budget) -> None:
    if budget.total < config.n_chunks:
        raise ValueError("budget must give every chunk at least one token")


def run_position_sweep(
    model: ToyModel,
    config: NeedleTaskConfig,
    budget: Budget,
    alpha: float,
    rateset: RateSet | None,
) -> BenchReport:
    """Dynamic vs uniform allocation with the needle planted at every position."""
    _validate_budget(config, budget)
    _ensure_model_ready(model, config)
    rows = []
    for position in range(config.n_chunks):
        cfg = replace(
            config,
            needle_position=position,
            seed=_derive_seed(config.seed, "position", position),
        )
        tasks = gen_needle_corpus(cfg)
        for trial, task in enumerate(tasks):
            task_seed = _derive_seed(cfg.seed, trial)
            signals = _signals_for_task(model, task, config, budget)
            scores = combined_scores(signals, alpha)
            for strategy in (Strategy.DYNAMIC, Strategy.UNIFORM):
                rows.append(
                    _trial_row(
                        model, task, config, strategy, budget, alpha, rateset,
                        scores, trial, task_seed,
                    )
                )
    keys = ("strategy", "needle_position")
    return BenchReport("position", rows, keys, aggregate_rows(rows, keys))


def run_strategy_comparison(
    model: ToyModel,
    config: NeedleTaskConfig,
    budget: Budget,
    alpha: float,
    rateset: RateSet | None,
    strategies: Sequence[Strategy | str] = (Strategy.DYNAMIC, Strategy.UNIFORM, Strategy.RANDOM),
) -> BenchReport:
    """Identical tasks under each strategy; needle positions cycle per trial."""
    _validate_budget(config, budget)
    _ensure_model_ready(model, config)
    strategies = [Strategy(s) for s in strategies]
    rows = []
    for trial in range(config.trials):
        cfg = replace(
            config,
            needle_position=trial % config.n_chunks,
            seed=_derive_seed(config.seed, "strategy", trial),
            trials=1,
        )
        (task,) = gen_needle_corpus(cfg)
        task_seed = _derive_seed(cfg.seed, trial)
        signals = _signals_for_task(model, task, config, budget)
        scores = combined_scores(signals, alpha)
        for strategy in strategies:
            rows.append(
                _trial_row(
                    model, task, config, strategy, budget, alpha, rateset,
                    scores, trial, task_seed,
                )
            )
    keys = ("strategy",)
    return BenchReport("strategy", rows, keys, aggregate_rows(rows, keys))


def run_constraint_sweep(
    model: ToyModel,
    config: NeedleTaskConfig,
    budgets: Sequence[Budget],
    alpha: float,
    rateset: RateSet | None,
) -> BenchReport:
    """Dynamic and uniform accuracy as the budget tightens (paired tasks)."""
    budgets = list(budgets)
    if len(budgets) < 1:
        raise ValueError("need at least one budget")
    totals = [b.total for b in budgets]
    if totals != sorted(totals, reverse=True) or len(set(totals)) != len(totals):
        raise ValueError("budgets must be strictly descending")
    for b in budgets:
        _validate_budget(config, b)
    _ensure_model_ready(model, config)

    tasks = []
    for trial in range(config.trials):
        cfg = replace(
            config,
            needle_position=trial % config.n_chunks,
            seed=_derive_seed(config.seed, "constraint", trial),
            trials=1,
        )
        tasks.append((gen_needle_corpus(cfg)[0], _derive_seed(cfg.seed, trial)))

    rows = []
    for budget in budgets:
        for trial, (task, task_seed) in enumerate(tasks):
            signals = _signals_for_task(model, task, config, budget)
            scores = combined_scores(signals, alpha)
            for strategy in (Strategy.DYNAMIC, Strategy.UNIFORM):
                rows.append(
                    _trial_row(
                        model, task, config, strategy, budget, alpha, rateset,
                        scores, trial, task_seed,
                    )
                )
    keys = ("strategy", "budget")
    report = BenchReport("constraint", rows, keys, aggregate_rows(rows, keys))
    return report


def constraint_degradations(report: BenchReport) -> dict[str, list[dict]]:
    """Relative accuracy drop per budget vs the loosest budget, per strategy."""
    out: dict[str, list[dict]] = {}
    by_strategy: dict[str, list[dict]] = {}
    for agg in report.aggregates:
        by_strategy.setdefault(agg["strategy"], []).append(agg)
    for strategy, aggs in by_strategy.items():
        aggs = sorted(aggs, key=lambda a: -a["budget"])
        base = aggs[0]["accuracy"]
        entries = []
        for agg in aggs:
            drop = 0.0 if base == 0 else (base - agg["accuracy"]) / base * 100.0
            entries.append(
                {"budget": agg["budget"], "accuracy": agg["accuracy"], "degradation_pct": drop}
            )
        out[strategy] = entries
    return out


def run_alpha_sweep(
    model: ToyModel,
    config: NeedleTaskConfig,
    budget: Budget,
    alphas: Sequence[float],
    rateset: RateSet | None,
) -> BenchReport:
    """Dynamic-allocation accuracy across the blend-weight grid."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("need at least one alpha")
    if any(not (0.0 <= a <= 1.0) for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    _validate_budget(config, budget)
    _ensure_model_ready(model, config)

    rows = []
    for trial in range(config.trials):
        cfg = replace(
            config,
            needle_position=trial % config.n_chunks,
            seed=_derive_seed(config.seed, "alpha", trial),
            trials=1,
        )
        (task,) = gen_needle_corpus(cfg)
        task_seed = _derive_seed(cfg.seed, trial)
        signals = _signals_for_task(model, task, config, budget)
        for alpha in alphas:
            scores = combined_scores(signals, alpha)
            rows.append(
                _trial_row(
                    model, task, config, Strategy.DYNAMIC, budget, alpha, rateset,
                    scores, trial, task_seed,
                )
            )
    keys = ("alpha",)
    return BenchReport("alpha", rows, keys, aggregate_rows(rows, keys))
