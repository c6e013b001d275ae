from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_ap
from fos.evaluation import (
    PUBLISHED_MAP,
    AblationRow,
    ablation_table,
    average_precision,
    build_eval_set,
    mean_average_precision,
    topk_accuracy,
    write_ablation_report,
)
from fos.retrieval import build_index


def all_flag_lists(max_len: int):
    for n in range(1, max_len + 1):
        for flags in itertools.product((0, 1), repeat=n):
            if any(flags):
                yield flags


def test_ap_exact_on_short_lists():
    for flags in all_flag_lists(8):
        assert average_precision(flags) == brute_force_ap(flags)


def test_ap_long_random_lists():
    rng = np.random.default_rng(0)
    for _ in range(30):
        flags = rng.random(345) < rng.uniform(0.01, 0.5)
        flags[rng.integers(345)] = True
        assert abs(average_precision(flags) - brute_force_ap(flags)) <= 1e-12


@given(st.lists(st.booleans(), min_size=1, max_size=60).filter(any))
def test_ap_bounds(flags):
    ap = average_precision(flags)
    assert 0.0 < ap <= 1.0
    ideal = sorted(flags, reverse=True)
    assert average_precision(ideal) == 1.0
    assert ap <= average_precision(ideal)


def test_ap_known_values():
    assert average_precision([1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0, 1]) == 0.5
    with pytest.raises(ValueError):
        average_precision([0, 0])


def test_random_ranking_expectation():
    """Expected AP of a random ranking approaches the relevant fraction for large lists."""
    rng = np.random.default_rng(1)
    flags = np.array([1] * 50 + [0] * 150)
    aps = [average_precision(rng.permutation(flags)) for _ in range(2000)]
    assert np.mean(aps) == pytest.approx(0.25, abs=0.02)


def test_topk_accuracy():
    preds = [["a", "b"], ["b", "c"], ["c", "a"]]
    assert topk_accuracy(preds, ["a", "c", "b"], 1) == pytest.approx(1 / 3)
    assert topk_accuracy(preds, ["a", "c", "b"], 2) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        topk_accuracy(preds, ["a"], 1)


def test_eval_set_protocol(small_corpus):
    es = build_eval_set(small_corpus, min_pattern_size=6, per_pattern=1, n_queries=None, seed=0)
    assert len(es.store_ids) == len(small_corpus.patterns())
    assert all(small_corpus.instance(i).split == "test" for i in es.store_ids)
    assert all(q.split == "test" for q in es.queries)
    for q in es.queries:
        assert es.relevance[q.id] == set(small_corpus.compatibility[q.id])
    with pytest.raises(ValueError):
        build_eval_set(small_corpus, min_pattern_size=100)


def test_map_perfect_and_excluded(small_corpus):
    es = build_eval_set(small_corpus, min_pattern_size=6, per_pattern=1, n_queries=None, seed=0)
    pids = sorted(set(es.store_patterns))
    basis = {p: np.eye(len(pids))[k] for k, p in enumerate(pids)}
    store = build_index(np.stack([basis[p] for p in es.store_patterns]), es.store_ids, es.store_patterns)

    def oracle_embedder(queries):
        # points at the first relevant pattern: a perfect ranker for single-pattern relevance
        return np.stack([basis[sorted(es.relevance[q.id])[0]] for q in queries])

    result = mean_average_precision(es, oracle_embedder, store)
    assert result.map == 1.0 and result.pattern_map == 1.0
    assert len(result.per_query) == len(es.queries)
    assert result.random_baseline == pytest.approx(es.mean_relevant_fraction())
    summary = result.summary()
    assert summary["scored_queries"] == len(es.queries)


def test_ablation_report(tmp_path):
    rows = [AblationRow("full", "ok", 0.9, 0.95, 1.0, teacher_unchanged=True),
            AblationRow("early-fusion", "failed", error="boom")]
    table = ablation_table(rows)
    assert "| full | ok | 90.00 | 95.00 | 53.72 |" in table
    assert "| early-fusion | failed | - | - |" in table
    path = write_ablation_report(tmp_path / "abl.json", rows, config_hash="h", seed=3)
    doc = json.loads(path.read_text())
    assert doc["reference"]["published_mAP_percent"] == PUBLISHED_MAP
    assert path.with_suffix(".md").read_text() == table
