"""Command-line entry point: train, score, allocate, bench, gradcheck.

Every command is deterministic given its flags (all randomness is seeded).
Informative messages go to stderr; data goes to files. Exit codes: 0 on
success, 1 for usage errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .allocator import dynamic_allocate, random_allocate, reallocate, uniform_allocate
from .bench import (
    NeedleTaskConfig,
    constraint_degradations,
    gen_needle_corpus,
    make_training_corpus,
    read_corpus,
    run_alpha_sweep,
    run_constraint_sweep,
    run_position_sweep,
    run_strategy_comparison,
    write_corpus,
    write_report,
)
from .core import Budget, RateSet, Strategy, segment_into_chunks
from .scoring import ChunkSignals, ScoreVector, combined_scores
from .signals_io import SignalTrace, read_signals, write_plan, write_signals
from .toymodel import (
    ToyModelConfig,
    document_signals,
    gradient_check,
    init_model,
    load_model,
    save_model,
    train,
)

SWEEP_KINDS = ("position", "strategy", "constraint", "alpha")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract here is 1.
    def error(self, message):
        raise _UsageError(message)


def _parse_rates(text: str | None) -> tuple[int, ...] | None:
    if text is None or text == "":
        return None
    try:
        rates = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise _UsageError(f"--rates must be comma-separated integers: {text!r}") from exc
    return rates


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctalloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic needle training corpus")
    p.add_argument("--out", required=True, help="output corpus path (JSONL)")
    p.add_argument("--n-docs", type=int, default=2000)
    p.add_argument("--n-chunks", type=int, default=8)
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--key-alphabet", type=int, default=16)
    p.add_argument("--value-alphabet", type=int, default=16)
    p.add_argument("--distractor-pairs", type=int, default=7)
    p.add_argument("--mixed-lengths", action="store_true",
                   help="vary document chunk counts from 1 up to --n-chunks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-toy", help="train the toy compression transformer")
    p.add_argument("--corpus", required=True, help="JSONL corpus path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--step-size", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--rates", default="2,4,8,16,32",
                   help="compression rates used to sample training ct counts")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--loss-log", default=None, help="optional per-step loss file")

    p = sub.add_parser("score", help="write per-chunk ppl/attention signals for a document")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="document file (raw bytes)")
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--out", required=True, help="trace output path (JSONL)")
    p.add_argument("--doc-id", default=None, help="defaults to the input file stem")
    p.add_argument("--ct-per-chunk", type=int, default=4,
                   help="provisional compression tokens per chunk for the scoring pass")

    p = sub.add_parser("allocate", help="turn a signal trace into an allocation plan")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="plan output path (JSON)")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="dynamic")
    p.add_argument("--rates", default=None,
                   help="comma-separated compression rates; omit to skip reallocation")
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-per-chunk", type=int, default=0)
    p.add_argument("--doc-id", default=None,
                   help="required when the trace holds more than one document")

    p = sub.add_parser("bench", help="run a needle-task sweep and write reports")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=["needle"], default="needle")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True, help="report path prefix (.csv/.json appended)")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-chunks", type=int, default=8)
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--key-alphabet", type=int, default=16)
    p.add_argument("--value-alphabet", type=int, default=16)
    p.add_argument("--distractor-pairs", type=int, default=7)
    p.add_argument("--budget", type=int, default=32)
    p.add_argument("--budgets", default="64,32,16,8",
                   help="descending budgets for the constraint sweep")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--alphas", default="0.0,0.25,0.5,0.75,1.0",
                   help="alpha grid for the alpha sweep")
    p.add_argument("--rates", default="2,4,8,16,32")

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _cmd_gen_corpus(args) -> int:
    config = NeedleTaskConfig(
        n_chunks=args.n_chunks,
        chunk_len=args.chunk_len,
        key_alphabet=args.key_alphabet,
        value_alphabet=args.value_alphabet,
        distractor_pairs=args.distractor_pairs,
        seed=args.seed,
    )
    if args.mixed_lengths:
        from dataclasses import replace

        entries = []
        for i in range(args.n_docs):
            n = 1 + i % args.n_chunks
            sub_cfg = replace(config, n_chunks=n, needle_position=0)
            entries.extend(make_training_corpus(sub_cfg, 1, seed=args.seed * 1_000_003 + i))
    else:
        entries = make_training_corpus(config, args.n_docs, seed=args.seed)
    write_corpus(args.out, entries)
    _log(f"wrote {len(entries)} corpus entries to {args.out}")
    return 0


def _cmd_train_toy(args) -> int:
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise _UsageError(f"--corpus: no such file: {corpus_path}")
    corpus = read_corpus(corpus_path)
    rates = _parse_rates(args.rates) or (2, 4, 8, 16, 32)
    rateset = RateSet(rates, args.chunk_len)
    config = ToyModelConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        seed=args.seed,
    )
    model = init_model(config)
    trained, losses = train(
        model,
        corpus,
        steps=args.steps,
        step_size=args.step_size,
        seed=args.seed,
        chunk_len=args.chunk_len,
        ct_choices=rateset.valid_counts,
        batch_size=args.batch_size,
    )
    save_model(trained, args.out)
    if args.loss_log:
        with open(args.loss_log, "w", encoding="utf-8") as fh:
            for step, loss in enumerate(losses):
                fh.write(f"{step}\t{loss:.6f}\n")
    if losses:
        _log(f"trained {args.steps} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    _log(f"checkpoint written to {args.out}")
    return 0


def _cmd_score(args) -> int:
    model = load_model(args.model)
    data = Path(args.input).read_bytes()
    if not data:
        raise _UsageError("--input: document is empty")
    chunks = segment_into_chunks(list(data), args.chunk_len)
    if args.ct_per_chunk < 1:
        raise _UsageError("--ct-per-chunk must be >= 1")
    provisional = uniform_allocate(len(chunks), Budget(args.ct_per_chunk * len(chunks)))
    raw = document_signals(model, chunks, provisional)
    from .scoring import chunk_attention, chunk_ppl

    ppl = tuple(chunk_ppl(lp.tolist()) for lp in raw.logprobs)
    attn = tuple(chunk_attention(raw.ct_weights.tolist(), raw.ct_ownership, len(chunks)))
    doc_id = args.doc_id if args.doc_id is not None else Path(args.input).stem
    trace = SignalTrace(
        doc_id=doc_id,
        lens=tuple(len(c) for c in chunks),
        ppl=ppl,
        attn=attn,
    )
    write_signals(args.out, [trace])
    _log(f"scored {len(chunks)} chunks of {doc_id!r} into {args.out}")
    return 0


def _cmd_allocate(args) -> int:
    traces = read_signals(args.trace)
    if not traces:
        raise _UsageError(f"--trace: {args.trace} holds no documents")
    if args.doc_id is not None:
        matching = [t for t in traces if t.doc_id == args.doc_id]
        if not matching:
            raise _UsageError(f"--doc-id: {args.doc_id!r} not present in trace")
        trace = matching[0]
    elif len(traces) == 1:
        trace = traces[0]
    else:
        ids = ", ".join(t.doc_id for t in traces)
        raise _UsageError(f"trace holds {len(traces)} documents ({ids}); pass --doc-id")

    budget = Budget(args.budget)
    strategy = Strategy(args.strategy)
    n = trace.n_chunks
    if strategy is Strategy.DYNAMIC:
        signals = ChunkSignals(ppl=trace.ppl, attn=trace.attn)
        scores = combined_scores(signals, args.alpha)
        plan = dynamic_allocate(scores, budget, min_per_chunk=args.min_per_chunk)
    elif strategy is Strategy.UNIFORM:
        scores = ScoreVector(s=(1.0 / n,) * n)
        plan = uniform_allocate(n, budget)
    else:
        scores = ScoreVector(s=(1.0 / n,) * n)
        plan = random_allocate(n, budget, seed=args.seed)

    rates = _parse_rates(args.rates)
    if rates is not None:
        rateset = RateSet(rates, args.chunk_len)
        plan = reallocate(plan, scores, budget, rateset)
    write_plan(args.out, plan, scores, residual=plan.residual)
    _log(
        f"{strategy.value} plan for {trace.doc_id!r}: counts={list(plan.counts)} "
        f"residual={plan.residual} -> {args.out}"
    )
    return 0


def _cmd_bench(args) -> int:
    if args.sweep not in SWEEP_KINDS:
        raise _UsageError(
            f"unknown sweep kind {args.sweep!r}; valid kinds: {', '.join(SWEEP_KINDS)}"
        )
    model = load_model(args.model)
    config = NeedleTaskConfig(
        n_chunks=args.n_chunks,
        chunk_len=args.chunk_len,
        key_alphabet=args.key_alphabet,
        value_alphabet=args.value_alphabet,
        distractor_pairs=args.distractor_pairs,
        trials=args.trials,
        seed=args.seed,
    )
    rates = _parse_rates(args.rates)
    rateset = RateSet(rates, args.chunk_len) if rates is not None else None
    budget = Budget(args.budget)

    if args.sweep == "position":
        report = run_position_sweep(model, config, budget, args.alpha, rateset)
    elif args.sweep == "strategy":
        report = run_strategy_comparison(model, config, budget, args.alpha, rateset)
    elif args.sweep == "constraint":
        try:
            budgets = [Budget(int(b)) for b in args.budgets.split(",")]
        except ValueError as exc:
            raise _UsageError(f"--budgets must be comma-separated integers: {args.budgets!r}") from exc
        report = run_constraint_sweep(model, config, budgets, args.alpha, rateset)
    else:
        try:
            alphas = [float(a) for a in args.alphas.split(",")]
        except ValueError as exc:
            raise _UsageError(f"--alphas must be comma-separated numbers: {args.alphas!r}") from exc
        report = run_alpha_sweep(model, config, budget, alphas, rateset)

    csv_path = args.out + ".csv"
    summary_path = args.out + ".json"
    write_report(report, csv_path, summary_path)
    for agg in report.aggregates:
        _log(str(agg))
    if args.sweep == "constraint":
        for strategy, entries in constraint_degradations(report).items():
            _log(f"{strategy} degradation: " + str(entries))
    _log(f"wrote {csv_path} and {summary_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    if args.samples < 1:
        raise _UsageError("samples must be >= 1")
    report = gradient_check(seed=args.seed, samples=args.samples, tolerance=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(
        f"{status}: max relative error {report.max_rel_err:.3e} over "
        f"{report.samples} sampled parameters (tolerance {report.tolerance:.0e}, "
        f"worst {report.worst_param})"
    )
    return 0 if report.passed else 2


_HANDLERS = {
    "gen-corpus": _cmd_gen_corpus,
    "train-toy": _cmd_train_toy,
    "score": _cmd_score,
    "allocate": _cmd_allocate,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _log(f"error: {exc}")
        return 1
    try:
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        _log(f"error: {exc}")
        return 1
    except (ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
