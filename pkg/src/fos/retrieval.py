"""Exact brute-force cosine search over instance embeddings and pattern centroids."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import UNIT_NORM_TOL, l2_normalize_rows

STORE_FORMAT = "fos-embedding-store"
STORE_VERSION = 1


class StoreError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingStore:
    matrix: np.ndarray  # (N, d) float32, unit rows
    ids: tuple[str, ...]
    pattern_ids: tuple[str | None, ...]

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True, eq=False)
class PatternIndex:
    matrix: np.ndarray  # (P, d) float64, unit rows
    pattern_ids: tuple[str, ...]
    members: dict


def build_index(embeddings: np.ndarray, ids: Sequence[str], pattern_ids: Sequence[str | None] | None = None,
                dim: int | None = None) -> EmbeddingStore:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.size == 0:
        d = dim if dim is not None else (embeddings.shape[1] if embeddings.ndim == 2 else 0)
        embeddings = embeddings.reshape(0, d)
    if embeddings.ndim != 2:
        raise StoreError(f"embeddings must be 2-D, got shape {embeddings.shape}")
    ids = tuple(str(i) for i in ids)
    pattern_ids = tuple(pattern_ids) if pattern_ids is not None else (None,) * len(ids)
    if not len(ids) == len(pattern_ids) == embeddings.shape[0]:
        raise StoreError("embeddings, ids and pattern_ids must have the same length")
    if len(set(ids)) != len(ids):
        raise StoreError("duplicate ids")
    try:
        rows = l2_normalize_rows(embeddings)
    except ValueError as exc:
        raise StoreError(str(exc)) from exc
    return EmbeddingStore(_frozen(rows.astype(np.float32)), ids, pattern_ids)


def _rank(matrix: np.ndarray, ids: Sequence[str], q: np.ndarray, k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(ids) == 0:
        return []
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != matrix.shape[1]:
        raise ValueError(f"query dim {q.shape[0]} does not match index dim {matrix.shape[1]}")
    if abs(np.linalg.norm(q) - 1.0) > UNIT_NORM_TOL:
        raise ValueError("query must be unit-norm")
    scores = np.clip(matrix.astype(np.float64) @ q, -1.0, 1.0)
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object)))
    order = np.lexsort((id_rank, -scores))[: min(k, len(ids))]
    return [(ids[i], float(scores[i])) for i in order]


def search_instances(store: EmbeddingStore, q: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k (id, cosine) pairs, descending score, ties by ascending id; k > N returns all N."""
    return _rank(store.matrix, store.ids, q, k)


def pattern_centroids(store: EmbeddingStore) -> PatternIndex:
    """Per-pattern mean of member embeddings, then L2-normalized."""
    groups: dict[str, list[int]] = {}
    for row, pid in enumerate(store.pattern_ids):
        if pid is None:
            raise StoreError(f"instance {store.ids[row]!r} has no pattern id")
        groups.setdefault(pid, []).append(row)
    pids = sorted(groups)
    rows = []
    for pid in pids:
        mean = store.matrix[groups[pid]].astype(np.float64).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise StoreError(f"pattern {pid!r} has a degenerate (zero) centroid")
        rows.append(mean / norm)
    matrix = np.stack(rows) if rows else np.zeros((0, store.dim))
    members = {pid: tuple(store.ids[r] for r in groups[pid]) for pid in pids}
    return PatternIndex(_frozen(matrix), tuple(pids), members)


def search_patterns(index: PatternIndex, q: np.ndarray, k: int) -> list[tuple[str, float]]:
    return _rank(index.matrix, index.pattern_ids, q, k)


def stratified_results(store: EmbeddingStore, index: PatternIndex, q: np.ndarray, k: int,
                       per_pattern: int) -> list[tuple[str, float, list[tuple[str, float]]]]:
    """Top-k patterns, each expanded to its ``per_pattern`` members closest to the query."""
    out = []
    for pid, score in search_patterns(index, q, k):
        member_set = set(index.members[pid])
        rows = [i for i, iid in enumerate(store.ids) if iid in member_set]
        sub = _rank(store.matrix[rows], [store.ids[i] for i in rows], q, per_pattern)
        out.append((pid, score, sub))
    return out


# ---------------------------------------------------------------------------
# persistence: JSON manifest + sibling little-endian float32 matrix


def write_store(store: EmbeddingStore, path: str | Path, config_hash: str = "") -> Path:
    """Write ``<path>`` (manifest) and ``<path>.f32``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = store.matrix.astype("<f4", copy=False).tobytes(order="C")
    bin_path = path.with_name(path.name + ".f32")
    bin_path.write_bytes(blob)
    doc = {
        "format": STORE_FORMAT,
        "format_version": STORE_VERSION,
        "d": store.dim,
        "N": store.n,
        "ids": list(store.ids),
        "pattern_ids": list(store.pattern_ids),
        "matrix_file": bin_path.name,
        "checksum": hashlib.sha256(blob).hexdigest(),
        "config_hash": config_hash,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_store(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != STORE_FORMAT or doc.get("format_version") != STORE_VERSION:
        raise StoreError(f"{path} is not a version-{STORE_VERSION} embedding store")
    blob = (path.parent / doc["matrix_file"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != doc["checksum"]:
        raise StoreError(f"{path}: matrix checksum mismatch")
    n, d = int(doc["N"]), int(doc["d"])
    if len(blob) != 4 * n * d or len(doc["ids"]) != n:
        raise StoreError(f"{path}: size does not match N={n}, d={d}")
    matrix = np.frombuffer(blob, dtype="<f4").reshape(n, d).astype(np.float32)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    if n and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise StoreError(f"{path}: rows are not unit-norm")
    return EmbeddingStore(_frozen(matrix), tuple(doc["ids"]), tuple(doc["pattern_ids"]))
