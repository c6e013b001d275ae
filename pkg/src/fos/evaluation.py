"""Test protocol and scoring: top-k pattern accuracy, non-interpolated AP, mAP, ablations."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import QueryInput
from .dataset import Corpus
from .retrieval import EmbeddingStore, build_index, pattern_centroids, search_instances, search_patterns

log = logging.getLogger(__name__)

# Published full-scale numbers (percent). Reported next to desk-scale results, never asserted.
PUBLISHED_MAP = {
    "baseline-proxy": 43.30,
    "early-fusion": 48.98,
    "no-aug": 51.91,
    "no-bg-freeze": 53.61,
    "multi-task": 54.48,
    "full": 53.72,
}
PUBLISHED_FG_TOP1 = 53.15
PUBLISHED_FG_TOP5 = 85.79
PUBLISHED_EVAL_PATTERNS = 69
PUBLISHED_EVAL_QUERIES = 100
PUBLISHED_MEAN_RELEVANT = (22.35, 6.07)

ABLATION_MODES = ("baseline-proxy", "early-fusion", "no-aug", "no-bg-freeze", "multi-task", "full")


def average_precision(flags: Sequence[int]) -> float:
    """Non-interpolated AP of a ranked list of binary relevance flags."""
    flags = np.asarray(flags, dtype=np.int64)
    n_rel = int(flags.sum())
    if n_rel == 0:
        raise ValueError("average precision is undefined without a relevant item")
    ranks = np.flatnonzero(flags) + 1
    precisions = np.arange(1, n_rel + 1) / ranks
    # left-to-right accumulation keeps the result independent of numpy's pairwise summation
    return sum(precisions.tolist()) / n_rel


def topk_accuracy(predictions: Sequence[Sequence[str]], truths: Sequence[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(predictions) == 0 or len(predictions) != len(truths):
        raise ValueError("need equally many (non-zero) predictions and truths")
    return float(np.mean([t in list(p)[:k] for p, t in zip(predictions, truths)]))


@dataclass
class EvalSet:
    store_ids: list[str]
    store_patterns: list[str]
    queries: list[QueryInput]
    relevance: dict[str, set[str]]
    excluded: list[str] = field(default_factory=list)
    seed: int = 0

    def mean_relevant(self) -> tuple[float, float]:
        """Mean number of relevant instances and patterns per query."""
        counts = [sum(p in self.relevance[q.id] for p in self.store_patterns) for q in self.queries]
        return float(np.mean(counts)), float(np.mean([len(self.relevance[q.id]) for q in self.queries]))

    def mean_relevant_fraction(self) -> float:
        n = len(self.store_ids)
        return float(np.mean([sum(p in self.relevance[q.id] for p in self.store_patterns) / n
                              for q in self.queries]))


def build_eval_set(corpus: Corpus, min_pattern_size: int = 20, per_pattern: int = 5,
                   n_queries: int | None = 100, seed: int = 0, split: str | None = "test") -> EvalSet:
    """Database: ``per_pattern`` random ``split`` instances from every pattern with at least
    ``min_pattern_size`` members. Queries: up to ``n_queries`` random ``split`` queries,
    keeping only those with a relevant instance in the database."""
    rng = np.random.default_rng([seed, 3])
    sizes = {p: len(m) for p, m in corpus.members().items()}
    pool = corpus.members(split)
    chosen = [p for p in sorted(sizes) if sizes[p] >= min_pattern_size and len(pool.get(p, ())) >= per_pattern]
    if not chosen:
        raise ValueError(f"no pattern has {min_pattern_size} members and {per_pattern} {split} instances")
    store_ids, store_patterns = [], []
    for p in chosen:
        picked = rng.choice(len(pool[p]), per_pattern, replace=False)
        for i in sorted(picked):
            store_ids.append(pool[p][i])
            store_patterns.append(p)
    candidates = [q for q in corpus.split_queries(split) if q.id in corpus.compatibility]
    if n_queries is not None and n_queries < len(candidates):
        keep = sorted(rng.choice(len(candidates), n_queries, replace=False))
        candidates = [candidates[i] for i in keep]
    in_db = set(chosen)
    queries, relevance, excluded = [], {}, []
    for q in candidates:
        rel = set(corpus.compatibility[q.id]) & in_db
        if rel:
            queries.append(q)
            relevance[q.id] = rel
        else:
            excluded.append(q.id)
    if not queries:
        raise ValueError("evaluation set has no query with a relevant database instance")
    return EvalSet(store_ids, store_patterns, queries, relevance, excluded, seed)


@dataclass
class MapResult:
    map: float
    per_query: dict[str, float]
    excluded: list[str]
    pattern_map: float
    pattern_per_query: dict[str, float]
    random_baseline: float

    def summary(self) -> dict:
        return {"mAP": self.map, "pattern_mAP": self.pattern_map, "scored_queries": len(self.per_query),
                "excluded_queries": len(self.excluded), "random_baseline": self.random_baseline}


def mean_average_precision(eval_set: EvalSet, query_embedder: Callable[[Sequence[QueryInput]], np.ndarray],
                           store: EmbeddingStore) -> MapResult:
    """Rank the whole database per query by cosine (ties by id) and average instance-level AP."""
    if not eval_set.queries:
        raise ValueError("empty evaluation set")
    q_emb = np.asarray(query_embedder(eval_set.queries), dtype=np.float64)
    pattern_of = dict(zip(store.ids, store.pattern_ids))
    pindex = pattern_centroids(store)
    per_query, per_query_pattern, excluded = {}, {}, list(eval_set.excluded)
    for q, e in zip(eval_set.queries, q_emb):
        rel = eval_set.relevance[q.id]
        ranked = search_instances(store, e, store.n)
        flags = [pattern_of[iid] in rel for iid, _ in ranked]
        if not any(flags):
            excluded.append(q.id)
            continue
        per_query[q.id] = average_precision(flags)
        pflags = [pid in rel for pid, _ in search_patterns(pindex, e, len(pindex.pattern_ids))]
        per_query_pattern[q.id] = average_precision(pflags)
    if not per_query:
        raise ValueError("no query could be scored")
    return MapResult(
        float(np.mean(list(per_query.values()))), per_query, excluded,
        float(np.mean(list(per_query_pattern.values()))), per_query_pattern,
        eval_set.mean_relevant_fraction(),
    )


def write_eval_report(path: str | Path, result: MapResult, *, topk: Mapping[str, float] | None = None,
                      config_hash: str = "", seeds: Mapping[str, int] | None = None, extra: dict | None = None) -> Path:
    doc = {
        "format": "fos-eval-report",
        "format_version": 1,
        "config_hash": config_hash,
        "seeds": dict(seeds or {}),
        **result.summary(),
        "topk_accuracy": dict(topk or {}),
        "per_query_ap": result.per_query,
        "per_query_pattern_ap": result.pattern_per_query,
        "excluded": result.excluded,
        "reference": {"published_mAP_full": PUBLISHED_MAP["full"],
                      "published_mAP_baseline": PUBLISHED_MAP["baseline-proxy"],
                      "published_fg_top1": PUBLISHED_FG_TOP1, "published_fg_top5": PUBLISHED_FG_TOP5,
                      "note": "full-scale published values; not reproducible at desk scale"},
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationRow:
    mode: str
    status: str
    map: float | None = None
    pattern_map: float | None = None
    seconds: float = 0.0
    error: str | None = None
    teacher_unchanged: bool | None = None

    @property
    def reference(self) -> float | None:
        return PUBLISHED_MAP.get(self.mode)


def evaluate_models(eval_set: EvalSet, corpus: Corpus, query_model, fg_model) -> MapResult:
    from .fg_encoder import embed_foregrounds
    from .query_encoder import embed_queries

    images = [corpus.instance(i).image for i in eval_set.store_ids]
    store = build_index(embed_foregrounds(fg_model, images), eval_set.store_ids, eval_set.store_patterns)
    return mean_average_precision(eval_set, lambda qs: embed_queries(query_model, qs), store)


def run_ablation_suite(corpus: Corpus, teacher, q_config, eval_set: EvalSet, seed: int,
                       modes: Sequence[str] = ABLATION_MODES) -> list[AblationRow]:
    """Train and score every mode from the same teacher, data and seeds; failures become rows."""
    from dataclasses import replace

    from .query_encoder import pretrain_background_extractor, train_query_encoder

    background = pretrain_background_extractor(corpus, q_config, teacher.class_ids, seed)
    rows = []
    for mode in modes:
        start = time.perf_counter()
        try:
            result = train_query_encoder(teacher, corpus, replace(q_config, mode=mode), seed, background=background)
            scored = evaluate_models(eval_set, corpus, result.model, result.foreground)
            rows.append(AblationRow(mode, "ok", scored.map, scored.pattern_map, time.perf_counter() - start,
                                    teacher_unchanged=result.teacher_checksum_before == result.teacher_checksum_after))
        except Exception as exc:  # a failing variant is reported, the suite continues
            log.exception("ablation mode %s failed", mode)
            rows.append(AblationRow(mode, "failed", seconds=time.perf_counter() - start, error=repr(exc)))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["| mode | status | mAP (%) | pattern mAP (%) | published mAP (%) |",
             "|---|---|---|---|---|"]
    for r in rows:
        fmt = lambda v: "-" if v is None else f"{100 * v:.2f}"
        ref = "-" if r.reference is None else f"{r.reference:.2f}"
        lines.append(f"| {r.mode} | {r.status} | {fmt(r.map)} | {fmt(r.pattern_map)} | {ref} |")
    return "\n".join(lines) + "\n"


def write_ablation_report(path: str | Path, rows: Sequence[AblationRow], *, config_hash: str = "",
                          seed: int = 0) -> Path:
    doc = {
        "format": "fos-ablation-report",
        "format_version": 1,
        "config_hash": config_hash,
        "seed": seed,
        "rows": [{"mode": r.mode, "status": r.status, "mAP": r.map, "pattern_mAP": r.pattern_map,
                  "seconds": r.seconds, "error": r.error, "teacher_unchanged": r.teacher_unchanged,
                  "published_mAP_percent": r.reference} for r in rows],
        "reference": {"published_mAP_percent": PUBLISHED_MAP, "note":
                      "published values need the full labelled dataset and large-scale training; "
                      "desk-scale rows are not comparable and their ordering is not asserted"},
        "table": ablation_table(rows),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    path.with_suffix(".md").write_text(ablation_table(rows))
    return path
