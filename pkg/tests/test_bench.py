import csv
import json
from dataclasses import replace

import pytest

from ctalloc import bench
from ctalloc import toymodel as tm
from ctalloc.core import Budget, RateSet, segment_into_chunks


TASK = bench.NeedleTaskConfig(
    n_chunks=2, chunk_len=16, key_alphabet=8, value_alphabet=8,
    distractor_pairs=3, trials=4, seed=0,
)


@pytest.fixture(scope="module")
def trained_model():
    config = tm.ToyModelConfig(
        d_model=24, n_layers=2, n_heads=1, d_ff=32, max_positions=128,
        n_ct_embeddings=4, seed=2,
    )
    corpus = bench.make_training_corpus(TASK, n_docs=60, seed=1)
    model, losses = tm.train(
        tm.init_model(config), corpus, steps=60, step_size=5e-3, seed=3,
        chunk_len=TASK.chunk_len, ct_choices=(1, 2, 4), batch_size=4,
    )
    assert losses[-1] < losses[0]
    return model


class TestNeedleCorpus:
    def test_single_chunk_forces_position_zero(self):
        cfg = replace(TASK, n_chunks=1, needle_position=0, trials=3)
        for task in bench.gen_needle_corpus(cfg):
            assert task.needle_chunk == 0

    def test_same_seed_identical(self):
        assert bench.gen_needle_corpus(TASK) == bench.gen_needle_corpus(TASK)

    def test_key_unique_to_needle_chunk(self):
        cfg = replace(TASK, n_chunks=4, needle_position=2, trials=12)
        for task in bench.gen_needle_corpus(cfg):
            key = task.query_tokens[1]
            chunks = segment_into_chunks(task.doc_tokens, cfg.chunk_len)
            holders = [c.index for c in chunks if key in c.tokens]
            assert holders == [2]

    def test_chunk_lengths_exact(self):
        for task in bench.gen_needle_corpus(TASK):
            assert len(task.doc_tokens) == TASK.n_chunks * TASK.chunk_len

    def test_answer_matches_needle_pair(self):
        for task in bench.gen_needle_corpus(TASK):
            key = task.query_tokens[1]
            doc = list(task.doc_tokens)
            at = doc.index(key)
            assert doc[at + 1] == task.answer_tokens[0]

    def test_consistent_mapping_within_doc(self):
        for task in bench.gen_needle_corpus(TASK):
            seen = {}
            doc = list(task.doc_tokens)
            for i, tok in enumerate(doc):
                if bench.KEY_BASE <= tok < bench.KEY_BASE + TASK.key_alphabet:
                    value = doc[i + 1]
                    assert seen.setdefault(tok, value) == value

    def test_tiny_key_alphabet_rejected(self):
        with pytest.raises(ValueError, match="alphabet too small"):
            bench.NeedleTaskConfig(key_alphabet=1)

    def test_chunk_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small for the requested pairs"):
            bench.NeedleTaskConfig(chunk_len=8, distractor_pairs=7)


class TestTrainingCorpus:
    def test_entries_shape(self):
        entries = bench.make_training_corpus(TASK, n_docs=5, seed=0)
        assert len(entries) == 5
        for entry in entries:
            assert len(entry["doc"]) == TASK.n_chunks * TASK.chunk_len
            assert len(entry["query"]) == 2
            assert len(entry["answer"]) == 1

    def test_corpus_round_trip(self, tmp_path):
        entries = bench.make_training_corpus(TASK, n_docs=4, seed=2)
        path = tmp_path / "corpus.jsonl"
        bench.write_corpus(path, entries)
        assert bench.read_corpus(path) == entries


class TestGate:
    def test_untrained_model_flagged(self):
        fresh = tm.init_model(tm.ToyModelConfig(d_model=16, n_layers=1, n_heads=1, d_ff=16))
        with pytest.raises(ValueError, match="untrained"):
            bench.run_position_sweep(fresh, TASK, Budget(4), 0.5, None)


class TestSweeps:
    RS = RateSet((2, 4, 8, 16), 16)

    def test_position_sweep_coverage_and_uniform_constant(self, trained_model):
        report = bench.run_position_sweep(trained_model, TASK, Budget(8), 0.5, self.RS)
        positions = {r["needle_position"] for r in report.rows}
        assert positions == {0, 1}
        uniform_rows = [r for r in report.rows if r["strategy"] == "uniform"]
        assert {r["tokens_on_needle_chunk"] for r in uniform_rows} == {4}
        assert report.recompute_aggregates() == report.aggregates

    def test_strategy_comparison_budgets_match(self, trained_model):
        report = bench.run_strategy_comparison(
            trained_model, TASK, Budget(8), 0.5, self.RS
        )
        for row in report.rows:
            assert row["budget"] == 8
            # all strategies spend at most the budget after reallocation
            assert row["residual"] >= 0
        strategies = {r["strategy"] for r in report.rows}
        assert strategies == {"dynamic", "uniform", "random"}

    def test_single_chunk_all_strategies_identical(self, trained_model):
        cfg = replace(TASK, n_chunks=1, needle_position=0, trials=3)
        report = bench.run_strategy_comparison(trained_model, cfg, Budget(4), 0.5, self.RS)
        counts = {r["tokens_on_needle_chunk"] for r in report.rows}
        assert counts == {4}

    def test_constraint_sweep_structure(self, trained_model):
        budgets = [Budget(8), Budget(4), Budget(2)]
        report = bench.run_constraint_sweep(trained_model, TASK, budgets, 0.5, self.RS)
        pairs = {(a["strategy"], a["budget"]) for a in report.aggregates}
        assert pairs == {(s, b.total) for s in ("dynamic", "uniform") for b in budgets}
        degr = bench.constraint_degradations(report)
        for strategy, entries in degr.items():
            assert entries[0]["degradation_pct"] == 0.0

    def test_constraint_sweep_requires_descending(self, trained_model):
        with pytest.raises(ValueError, match="descending"):
            bench.run_constraint_sweep(
                trained_model, TASK, [Budget(4), Budget(8)], 0.5, self.RS
            )

    def test_alpha_sweep_grid_and_boundaries(self, trained_model):
        report = bench.run_alpha_sweep(
            trained_model, TASK, Budget(8), [0.0, 0.5, 1.0], self.RS
        )
        assert {a["alpha"] for a in report.aggregates} == {0.0, 0.5, 1.0}
        for row in report.rows:
            assert row["residual"] >= 0
        assert report.recompute_aggregates() == report.aggregates

    def test_alpha_sweep_validates_range(self, trained_model):
        with pytest.raises(ValueError, match="alphas"):
            bench.run_alpha_sweep(trained_model, TASK, Budget(8), [0.5, 1.5], self.RS)

    def test_report_files(self, trained_model, tmp_path):
        report = bench.run_position_sweep(trained_model, TASK, Budget(8), 0.5, self.RS)
        csv_path, summary_path = tmp_path / "r.csv", tmp_path / "r.json"
        bench.write_report(report, csv_path, summary_path)
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(report.rows)
        assert set(rows[0]) == set(bench.CSV_COLUMNS)
        summary = json.loads(summary_path.read_text())
        assert summary["sweep"] == "position"
        assert summary["aggregates"] == report.aggregates
