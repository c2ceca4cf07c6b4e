"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s``. Criteria 6-8 train a
small model from scratch (session fixture, a few minutes of CPU time); the
rest are fast properties with pinned tolerances.
"""

import itertools
import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest

from ctalloc import bench
from ctalloc import toymodel as tm
from ctalloc.allocator import (
    dynamic_allocate,
    random_allocate,
    reallocate,
    uniform_allocate,
)
from ctalloc.core import AllocationPlan, Budget, Chunk, RateSet, Strategy, segment_into_chunks
from ctalloc.scoring import ChunkSignals, ScoreVector, combined_scores, softmax
from ctalloc.signals_io import (
    SignalTrace,
    read_plan,
    read_signals,
    write_plan,
    write_signals,
)


def verdict(criterion: int, ok: bool, detail: str):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion}: {status} — {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. Budget conservation


def test_criterion_1_budget_conservation():
    rng = random.Random(20240501)
    t0 = time.time()
    cases = 10_000
    for case in range(cases):
        n = rng.randint(1, 64)
        m = rng.randint(0, 4096)
        alpha = rng.random()
        raw = [rng.uniform(-3, 3) for _ in range(n)]
        scores = ScoreVector(s=tuple(softmax(raw)), alpha=alpha)
        budget = Budget(m)
        for plan in (
            dynamic_allocate(scores, budget),
            uniform_allocate(n, budget),
            random_allocate(n, budget, seed=case),
        ):
            assert sum(plan.counts) == m, (plan.strategy, n, m)
    elapsed = time.time() - t0
    verdict(1, elapsed < 10.0, f"{cases} cases x 3 strategies conserved budget in {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------------------
# 2. Reallocation validity + oracle equivalence


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def _oracle(counts, score_values, total, vc):
    """Trace-enumerating re-derivation of the reallocation semantics."""
    vc = sorted(vc)
    n = len(counts)
    if total < n * vc[0]:
        raise ValueError("infeasible")
    snapped = []
    for c in counts:
        best = None
        for v in vc:
            if best is None or abs(v - c) < abs(best - c) or (
                abs(v - c) == abs(best - c) and v < best
            ):
                best = v
        snapped.append(best)
    while sum(snapped) > total:
        worst = None
        for i in range(n):
            if snapped[i] > vc[0]:
                if worst is None or score_values[i] < score_values[worst] or (
                    score_values[i] == score_values[worst] and i > worst
                ):
                    worst = i
        snapped[worst] = max(v for v in vc if v < snapped[worst])

    def qualifying(state, removed):
        leftover = total - sum(state)
        return [
            i for i in range(n)
            if i not in removed and 2 * state[i] in vc and state[i] <= leftover
        ]

    terminals = set()

    def explore(state, removed):
        cands = qualifying(state, removed)
        if total - sum(state) <= 0 or not cands:
            terminals.add(tuple(state))
            return
        for i in cands:
            nxt = list(state)
            nxt[i] *= 2
            explore(nxt, removed | {i})

    explore(list(snapped), frozenset())

    greedy, removed = list(snapped), set()
    while total - sum(greedy) > 0:
        cands = qualifying(greedy, removed)
        if not cands:
            break
        best = cands[0]
        for i in cands[1:]:
            if score_values[i] > score_values[best]:
                best = i
        greedy[best] *= 2
        removed.add(best)
    return tuple(greedy), terminals


def test_criterion_2_reallocation_oracle():
    families = {
        (1,): RateSet((8,), 8),
        (1, 2): RateSet((4, 8), 8),
        (2, 4): RateSet((2, 4), 8),
        (1, 2, 4): RateSet((2, 4, 8), 8),
        (1, 2, 4, 8): RateSet((1, 2, 4, 8), 8),
        (1, 3): RateSet((2, 6), 6),
    }

    def rankings(n):
        base = [0.5 - 0.08 * i for i in range(n)]
        total = sum(base)
        desc = tuple(b / total for b in base)
        asc = tuple(reversed(desc))
        flat = tuple(1.0 / n for _ in range(n))
        return [desc] if n == 1 else ([desc, asc] if n == 4 else [desc, asc, flat])

    t0 = time.time()
    checked = 0
    for vc, rateset in families.items():
        assert rateset.valid_counts == vc
        for n in (1, 2, 3, 4):
            patterns = rankings(n)
            for count_sum in range(0, 13):
                for counts in _compositions(count_sum, n):
                    plan = AllocationPlan(counts, Budget(count_sum), Strategy.DYNAMIC, 0.5)
                    for m in range(0, 13):
                        feasible = m >= n * vc[0]
                        for sv in patterns:
                            scores = ScoreVector(s=sv, alpha=0.5)
                            if not feasible:
                                with pytest.raises(ValueError):
                                    reallocate(plan, scores, Budget(m), rateset)
                                continue
                            got = reallocate(plan, scores, Budget(m), rateset)
                            want, terminals = _oracle(counts, sv, m, vc)
                            assert got.counts == want, (vc, counts, m, sv)
                            assert got.counts in terminals
                            assert all(c in vc for c in got.counts)
                            assert sum(got.counts) <= m
                            assert got.residual == m - sum(got.counts)
                            checked += 1

    # the appendix hand trace, reproduced exactly
    plan = AllocationPlan((5, 9, 2), Budget(16), Strategy.DYNAMIC, 0.5)
    scores = ScoreVector(s=(0.3, 0.5, 0.2), alpha=0.5)
    out = reallocate(plan, scores, Budget(16), RateSet((2, 4, 8, 16, 32), 32))
    assert out.counts == (4, 8, 4) and out.residual == 0
    verdict(
        2, True,
        f"{checked} bounded instances match the snap-then-double oracle in "
        f"{time.time()-t0:.1f}s; hand trace [5,9,2]->[4,8,4] reproduced",
    )


# ---------------------------------------------------------------------------
# 3. Combined-score worked example and boundary argmax properties


def test_criterion_3_blend_worked_example():
    s = combined_scores(ChunkSignals(ppl=(3.0, 1.0), attn=(0.5, 0.5)), alpha=0.5)
    assert abs(s.s[0] - 0.43782) < 1e-4
    assert abs(s.s[1] - 0.56218) < 1e-4

    rng = random.Random(77)
    for _ in range(1000):
        n = rng.randint(2, 12)
        ppl = tuple(rng.uniform(0, 50) for _ in range(n))
        attn_raw = [rng.random() for _ in range(n)]
        total = sum(attn_raw)
        attn = tuple(a / total for a in attn_raw)
        signals = ChunkSignals(ppl=ppl, attn=attn)
        s1 = combined_scores(signals, 1.0)
        assert max(range(n), key=lambda i: s1.s[i]) == max(range(n), key=lambda i: attn[i])
        s0 = combined_scores(signals, 0.0)
        assert max(range(n), key=lambda i: s0.s[i]) == min(range(n), key=lambda i: ppl[i])
    verdict(3, True, "worked example within 1e-4; alpha boundary argmax held on 1000 instances")


# ---------------------------------------------------------------------------
# 4. Mask soundness + compression equivalence


def _assert_mask_sound(layout):
    mask = tm.build_compression_mask(layout)
    kinds = layout.kinds
    chunks = layout.chunk_ids
    raw = kinds == 0
    t = layout.total_len
    for q in range(t):
        if not raw[q]:
            continue
        earlier_raw = raw & (chunks < chunks[q])
        assert not mask[q, earlier_raw].any()


def test_criterion_4_mask_soundness_and_equivalence():
    # exhaustive mask check for N <= 3, every raw/ct length in 1..4
    layouts_checked = 0
    for n in (1, 2, 3):
        for combo in itertools.product(range(1, 5), range(1, 5), repeat=n):
            segments = []
            for c in range(n):
                segments.append(tm.Segment("raw", c, combo[2 * c]))
                segments.append(tm.Segment("ct", c, combo[2 * c + 1]))
            _assert_mask_sound(tm.SequenceLayout(tuple(segments)))
            layouts_checked += 1
    # seeded samples for N in {4, 5}
    rng = random.Random(4)
    for _ in range(2000):
        n = rng.choice((4, 5))
        segments = []
        for c in range(n):
            segments.append(tm.Segment("raw", c, rng.randint(1, 4)))
            segments.append(tm.Segment("ct", c, rng.randint(1, 4)))
        _assert_mask_sound(tm.SequenceLayout(tuple(segments)))
        layouts_checked += 1

    # attention-map readout on a live model: leaked mass must be exactly 0
    config = tm.ToyModelConfig(
        vocab_size=41, d_model=16, n_layers=2, n_heads=2, d_ff=24,
        max_positions=64, n_ct_embeddings=4, seed=21,
    )
    model = tm.init_model(config)
    np_rng = np.random.default_rng(0)
    model.params["head.w"] += np_rng.normal(0, 0.1, model.params["head.w"].shape)
    forwards = 0
    for n in (1, 2, 3, 4, 5):
        for _ in range(12):
            lens = [int(np_rng.integers(1, 5)) for _ in range(n)]
            counts = [int(np_rng.integers(1, 5)) for _ in range(n)]
            chunks = [
                Chunk(i, tuple(np_rng.integers(0, 40, size=lens[i]))) for i in range(n)
            ]
            layout, tokens = tm.assemble_sequence(chunks, counts, bos_id=config.bos_id)
            result = tm.forward(model, tokens, layout)
            kinds, chunk_ids = layout.kinds, layout.chunk_ids
            raw = kinds == 0
            for attn in result.attentions:
                for q in np.flatnonzero(raw):
                    earlier = raw & (chunk_ids < chunk_ids[q])
                    assert attn[:, q, earlier].sum() == 0.0
            forwards += 1

    # incremental compression equals the full masked pass
    worst = 0.0
    for trial in range(10):
        n = int(np_rng.integers(1, 6))
        lens = [int(np_rng.integers(1, 5)) for _ in range(n)]
        counts = [int(np_rng.integers(1, 5)) for _ in range(n)]
        chunks = [Chunk(i, tuple(np_rng.integers(0, 40, size=lens[i]))) for i in range(n)]
        plan = AllocationPlan(tuple(counts), Budget(sum(counts)), Strategy.UNIFORM)
        full = tm.compress_sequence(model, chunks, plan, method="full")
        inc = tm.compress_sequence(model, chunks, plan, method="incremental")
        worst = max(worst, float(np.abs(full - inc).max()))
    assert worst < 1e-9
    verdict(
        4, True,
        f"{layouts_checked} masks sound (exhaustive N<=3, sampled N in 4..5); "
        f"{forwards} attention readouts leak-free; incremental vs full worst |diff| {worst:.2e} < 1e-9",
    )


# ---------------------------------------------------------------------------
# 5. Gradient check


def test_criterion_5_gradient_check():
    t0 = time.time()
    report = tm.gradient_check(seed=123, samples=200, step=1e-5, tolerance=1e-4)
    elapsed = time.time() - t0
    verdict(
        5, report.passed and elapsed < 60.0,
        f"max relative error {report.max_rel_err:.2e} over {report.samples} "
        f"sampled parameters in {elapsed:.1f}s (tolerance 1e-4, < 60s)",
    )


# ---------------------------------------------------------------------------
# 6-8. Trained-model benchmarks (directional analogs)

NEEDLE_CONFIG = bench.NeedleTaskConfig(
    n_chunks=8, chunk_len=32, key_alphabet=8, value_alphabet=8,
    distractor_pairs=15, trials=200, seed=0,
)
RATES = RateSet((2, 4, 8, 16, 32), 32)
TRAIN_STEPS = 5000


@pytest.fixture(scope="session")
def needle_model():
    """Train the benchmark model from scratch (a few minutes, CPU)."""
    config = tm.ToyModelConfig(seed=0)
    corpus = []
    sizes = (1, 2, 2, 3, 3, 4, 6, 8)
    for i in range(2400):
        cfg = replace(
            NEEDLE_CONFIG,
            n_chunks=sizes[i % len(sizes)],
            needle_position=i % sizes[i % len(sizes)],
            seed=10_000 + i,
            trials=1,
        )
        corpus.extend(bench.make_training_corpus(cfg, 1, seed=10_000 + i))
    t0 = time.time()
    model, losses = tm.train(
        tm.init_model(config), corpus, steps=TRAIN_STEPS, step_size=1e-3, seed=1,
        chunk_len=32, ct_choices=(1, 2, 4, 8, 16), batch_size=16,
    )
    print(
        f"[fixture] trained {TRAIN_STEPS} steps in {time.time()-t0:.0f}s: "
        f"loss {losses[0]:.3f} -> {sum(losses[-20:])/20:.3f}"
    )
    return model


def test_criterion_6_position_sweep_directional(needle_model):
    # reallocation is optional in the pipeline; the sweep exercises the raw
    # dynamic counts (budget 32 over 8 chunks snaps to near-uniform under
    # the {1,2,4,8,16} count set, which would mask the allocation signal)
    t0 = time.time()
    report = bench.run_position_sweep(
        needle_model, NEEDLE_CONFIG, Budget(32), alpha=0.5, rateset=None
    )
    rows = [r for r in report.rows if r["strategy"] == "dynamic"]
    worst_pos, worst_frac = None, 1.0
    for position in range(NEEDLE_CONFIG.n_chunks):
        mine = [r for r in rows if r["needle_position"] == position]
        assert len(mine) == NEEDLE_CONFIG.trials
        frac = sum(
            1 for r in mine
            if r["tokens_on_needle_chunk"] > r["median_tokens_elsewhere"]
        ) / len(mine)
        if frac < worst_frac:
            worst_pos, worst_frac = position, frac
    elapsed = time.time() - t0
    verdict(
        6, worst_frac >= 0.60,
        f"needle chunk out-allocated the median non-needle chunk in >= "
        f"{worst_frac:.0%} of dynamic trials at every position (worst: "
        f"position {worst_pos}); 200 trials x 8 positions in {elapsed:.0f}s",
    )


def test_criterion_7_strategy_ordering(needle_model):
    report = bench.run_strategy_comparison(
        needle_model, NEEDLE_CONFIG, Budget(32), alpha=0.5, rateset=RATES,
    )
    acc = {a["strategy"]: a["accuracy"] for a in report.aggregates}
    gap = (acc["dynamic"] - acc["random"]) * 100
    ok = acc["dynamic"] >= acc["uniform"] >= acc["random"] and gap >= 3.0
    verdict(
        7, ok,
        f"accuracy dynamic {acc['dynamic']:.3f} >= uniform {acc['uniform']:.3f} "
        f">= random {acc['random']:.3f}; dynamic-random gap {gap:.1f} points (>= 3)",
    )


def test_criterion_8_constraint_trend(needle_model):
    budgets = [Budget(64), Budget(32), Budget(16), Budget(8)]
    report = bench.run_constraint_sweep(
        needle_model, NEEDLE_CONFIG, budgets, alpha=0.5, rateset=RATES
    )
    degr = bench.constraint_degradations(report)["dynamic"]
    drops = [entry["degradation_pct"] for entry in degr]
    monotone = all(a <= b + 1e-9 for a, b in zip(drops, drops[1:]))
    verdict(
        8, monotone and drops[0] == 0.0,
        "dynamic-strategy degradation monotone non-decreasing over budgets "
        + ", ".join(f"{e['budget']}->{e['degradation_pct']:.1f}%" for e in degr),
    )


# ---------------------------------------------------------------------------
# 9. Determinism and round-trips


def test_criterion_9_determinism_and_round_trips(tmp_path):
    config = tm.ToyModelConfig(
        vocab_size=41, d_model=16, n_layers=1, n_heads=2, d_ff=24,
        max_positions=96, n_ct_embeddings=4, seed=33,
    )
    rng = random.Random(9)
    corpus = [
        {
            "doc": [rng.randrange(40) for _ in range(24)],
            "query": [1, 2],
            "answer": [3],
        }
        for _ in range(10)
    ]

    # checkpoints: same seed + same training flags => identical bytes
    paths = []
    for name in ("a.ckpt", "b.ckpt"):
        model, _ = tm.train(
            tm.init_model(config), corpus, steps=5, step_size=1e-3, seed=7,
            chunk_len=8, ct_choices=(1, 2), batch_size=2,
        )
        path = tmp_path / name
        tm.save_model(model, path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]

    # signal traces and plans: randomized round-trips, byte-stable writes
    rng = random.Random(10)
    for case in range(50):
        n_docs = rng.randint(1, 3)
        traces = []
        for d in range(n_docs):
            n = rng.randint(1, 6)
            traces.append(
                SignalTrace(
                    doc_id=f"doc-{case}-{d}",
                    lens=tuple(rng.randint(1, 64) for _ in range(n)),
                    ppl=tuple(round(rng.uniform(0, 80), 9) for _ in range(n)),
                    attn=tuple(round(rng.random(), 9) for _ in range(n)),
                )
            )
        t1, t2 = tmp_path / "t1.jsonl", tmp_path / "t2.jsonl"
        write_signals(t1, traces)
        write_signals(t2, traces)
        assert t1.read_bytes() == t2.read_bytes()
        assert read_signals(t1) == traces

        n = rng.randint(1, 8)
        raw = [rng.uniform(-1, 1) for _ in range(n)]
        scores = ScoreVector(s=tuple(softmax(raw)), alpha=0.5)
        counts = tuple(rng.randint(0, 6) for _ in range(n))
        residual = rng.randint(0, 3)
        plan = AllocationPlan(
            counts, Budget(sum(counts) + residual), Strategy.DYNAMIC, 0.5, residual
        )
        p1, p2 = tmp_path / "p1.json", tmp_path / "p2.json"
        write_plan(p1, plan, scores, residual)
        write_plan(p2, plan, scores, residual)
        assert p1.read_bytes() == p2.read_bytes()
        got_plan, got_scores, got_residual = read_plan(p1)
        assert got_plan == plan and got_scores == scores and got_residual == residual

    # bench reports: identical seeds => identical bytes
    task = bench.NeedleTaskConfig(
        n_chunks=2, chunk_len=16, key_alphabet=8, value_alphabet=8,
        distractor_pairs=3, trials=3, seed=5,
    )
    small_corpus = bench.make_training_corpus(task, 40, seed=2)
    model, _ = tm.train(
        tm.init_model(tm.ToyModelConfig(d_model=24, n_layers=2, n_heads=2, d_ff=32,
                                        max_positions=128, n_ct_embeddings=4, seed=1)),
        small_corpus, steps=50, step_size=5e-3, seed=3,
        chunk_len=16, ct_choices=(1, 2, 4), batch_size=4,
    )
    blobs = []
    for run in ("r1", "r2"):
        report = bench.run_position_sweep(
            model, task, Budget(8), 0.5, RateSet((2, 4, 8, 16), 16)
        )
        csv_path, js_path = tmp_path / f"{run}.csv", tmp_path / f"{run}.json"
        bench.write_report(report, csv_path, js_path)
        blobs.append(csv_path.read_bytes() + js_path.read_bytes())
    assert blobs[0] == blobs[1]
    verdict(9, True, "checkpoints, traces, plans and reports byte-identical; round-trips lossless")
