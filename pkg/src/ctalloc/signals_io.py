"""File formats for chunk signals and allocation plans.

Traces are JSON Lines: one chunk record per line with keys ``doc_id``,
``chunk_id``, ``len``, ``ppl``, ``attn``. Consecutive lines sharing a
``doc_id`` form one trace; within a trace the chunk ids run 0, 1, 2, ...
Plans are a single JSON document (see ``write_plan``). Both formats are UTF-8
and deterministic, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import AllocationPlan, Budget, Strategy
from .scoring import ScoreVector

PLAN_FORMAT_VERSION = 1

_TRACE_KEYS = ("doc_id", "chunk_id", "len", "ppl", "attn")


class TraceError(ValueError):
    """A trace file line that cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class SignalTrace:
    """Per-chunk signal records for one document."""

    doc_id: str
    lens: tuple[int, ...]
    ppl: tuple[float, ...]
    attn: tuple[float, ...]

    @property
    def n_chunks(self) -> int:
        return len(self.lens)


def _parse_trace_line(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(f"line {lineno}: malformed record: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise TraceError(f"line {lineno}: record must be an object")
    for key in _TRACE_KEYS:
        if key not in record:
            raise TraceError(f"line {lineno}: missing field {key!r}")

    doc_id = record["doc_id"]
    if not isinstance(doc_id, str):
        raise TraceError(f"line {lineno}: doc_id must be a string")
    chunk_id = record["chunk_id"]
    if not isinstance(chunk_id, int) or chunk_id < 0:
        raise TraceError(f"line {lineno}: chunk_id must be an integer >= 0")
    length = record["len"]
    if not isinstance(length, int) or length < 1:
        raise TraceError(f"line {lineno}: len must be >= 1")
    ppl = record["ppl"]
    if not isinstance(ppl, (int, float)) or not math.isfinite(ppl) or ppl < 0:
        raise TraceError(f"line {lineno}: ppl must be >= 0 and finite")
    attn = record["attn"]
    if not isinstance(attn, (int, float)) or not math.isfinite(attn) or attn < 0:
        raise TraceError(f"line {lineno}: attn must be >= 0 and finite")
    return record


def read_signals(path: str | Path) -> list[SignalTrace]:
    """Parse a trace file, validating invariants line by line.

    An empty file yields an empty list. A new ``doc_id`` starts a new trace;
    chunk ids must be consecutive from 0 within each trace.
    """
    traces: list[SignalTrace] = []
    current: dict | None = None

    def flush():
        nonlocal current
        if current is not None:
            traces.append(
                SignalTrace(
                    doc_id=current["doc_id"],
                    lens=tuple(current["lens"]),
                    ppl=tuple(current["ppl"]),
                    attn=tuple(current["attn"]),
                )
            )
            current = None

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = _parse_trace_line(line, lineno)
            if current is None or record["doc_id"] != current["doc_id"]:
                flush()
                current = {"doc_id": record["doc_id"], "lens": [], "ppl": [], "attn": []}
            expected = len(current["lens"])
            if record["chunk_id"] != expected:
                raise TraceError(
                    f"line {lineno}: chunk_id must be {expected} "
                    f"(consecutive from 0), got {record['chunk_id']}"
                )
            current["lens"].append(record["len"])
            current["ppl"].append(float(record["ppl"]))
            current["attn"].append(float(record["attn"]))
    flush()
    return traces


def write_signals(path: str | Path, traces: Sequence[SignalTrace]) -> None:
    """Write traces in the line-delimited format ``read_signals`` accepts."""
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            for i in range(trace.n_chunks):
                record = {
                    "doc_id": trace.doc_id,
                    "chunk_id": i,
                    "len": trace.lens[i],
                    "ppl": trace.ppl[i],
                    "attn": trace.attn[i],
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_plan(
    path: str | Path,
    plan: AllocationPlan,
    scores: ScoreVector,
    residual: int = 0,
) -> None:
    """Write an allocation plan as a single JSON document.

    Keys: ``format_version``, ``budget``, ``alpha``, ``strategy``,
    ``residual`` and ``allocations`` (a list of ``{chunk_id, score, count}``).
    The counts in the file sum to ``budget - residual``.
    """
    if len(scores) != plan.n_chunks:
        raise ValueError("scores and plan must cover the same chunks")
    if sum(plan.counts) + residual != plan.budget.total:
        raise ValueError("residual inconsistent with plan counts and budget")
    document = {
        "format_version": PLAN_FORMAT_VERSION,
        "budget": plan.budget.total,
        "alpha": plan.alpha,
        "strategy": plan.strategy.value,
        "residual": residual,
        "allocations": [
            {"chunk_id": i, "score": scores.s[i], "count": plan.counts[i]}
            for i in range(plan.n_chunks)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_plan(path: str | Path) -> tuple[AllocationPlan, ScoreVector, int]:
    """Read back a plan document written by ``write_plan``."""
    with open(path, "r", encoding="utf-8") as fh:
        document = json.load(fh)
    version = document.get("format_version")
    if version != PLAN_FORMAT_VERSION:
        raise ValueError(f"unsupported plan format version: {version!r}")
    allocations = sorted(document["allocations"], key=lambda a: a["chunk_id"])
    counts = tuple(int(a["count"]) for a in allocations)
    residual = int(document["residual"])
    plan = AllocationPlan(
        counts=counts,
        budget=Budget(int(document["budget"])),
        strategy=Strategy(document["strategy"]),
        alpha=document["alpha"],
        residual=residual,
    )
    scores = ScoreVector(
        s=tuple(float(a["score"]) for a in allocations),
        alpha=document["alpha"],
    )
    return plan, scores, residual
