"""Content-based retrieval over learned embeddings and mAP@k scoring.

Queries come from the validation split, the gallery is the test split, and
an item is relevant when it shares the query's hidden class. All functions
here are read-only over a frozen model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset

logger = logging.getLogger(__name__)

RESULTS_HEADER = ("iteration", "bits", "strategy", "seed", "map_at_5",
                  "labeled_pairs", "transitive_pairs")


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    gallery_ids: tuple[int, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    bits: float
    map_at_5: float
    labeled_pairs: int
    transitive_pairs: int


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def rank_gallery(query_embedding: np.ndarray, gallery_embeddings: np.ndarray,
                 gallery_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order gallery ids by cosine similarity descending, ties by id."""
    q = query_embedding / (np.linalg.norm(query_embedding) or 1.0)
    scores = _normalize_rows(gallery_embeddings) @ q
    order = np.lexsort((gallery_ids, -scores))
    return gallery_ids[order], scores[order]


def retrieve_topk(model, query_features, gallery: Dataset | Sequence,
                  k: int, query_id: int = -1) -> RetrievalResult:
    """Top-k gallery items for one query by embedding cosine similarity."""
    records = gallery.records if isinstance(gallery, Dataset) else list(gallery)
    if not records:
        raise ValueError("gallery is empty")
    if k > len(records):
        logger.warning("k=%d exceeds gallery size %d; truncating",
                       k, len(records))
        k = len(records)
    ids = np.array([r.id for r in records], dtype=np.int64)
    emb = model.embed_many(np.stack([r.features for r in records]))
    q_emb = model.embed(np.asarray(query_features, dtype=np.float64))
    ranked, scores = rank_gallery(q_emb, emb, ids)
    return RetrievalResult(query_id=query_id,
                           gallery_ids=tuple(int(i) for i in ranked[:k]),
                           scores=tuple(float(s) for s in scores[:k]))


def average_precision_at_k(relevance: Sequence[int],
                           total_relevant_in_gallery: int) -> float:
    """Sum of precision-at-hit over the top k, normalized by min(R, k).

    Defined as 0 when the gallery holds no relevant items.
    """
    k = len(relevance)
    if k < 1:
        raise ValueError("relevance list must be non-empty")
    denom = min(total_relevant_in_gallery, k)
    if denom == 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / i
    return total / denom


def map_at_k(model, dataset: Dataset, k: int = 5,
             query_split: str = "validation",
             gallery_split: str = "test") -> float:
    """Mean AP@k: validation queries ranked against the test gallery.

    Relevance is equality of hidden classes. Queries without any relevant
    gallery item contribute AP 0 (their count is logged).
    """
    query_ids = dataset.ids(query_split)
    gallery_ids = dataset.ids(gallery_split)
    if not query_ids or not gallery_ids:
        raise ValueError("both query and gallery splits must be non-empty")
    k = min(k, len(gallery_ids))

    g_ids = np.array(gallery_ids, dtype=np.int64)
    g_classes = dataset.classes_for(gallery_ids)
    g_emb = _normalize_rows(model.embed_many(dataset.features_for(gallery_ids)))
    q_emb = _normalize_rows(model.embed_many(dataset.features_for(query_ids)))
    q_classes = dataset.classes_for(query_ids)

    scores = q_emb @ g_emb.T
    ap_sum = 0.0
    zero_relevant = 0
    for row in range(len(query_ids)):
        order = np.lexsort((g_ids, -scores[row]))
        relevant = g_classes[order[:k]] == q_classes[row]
        total_relevant = int(np.sum(g_classes == q_classes[row]))
        if total_relevant == 0:
            zero_relevant += 1
        ap_sum += average_precision_at_k(relevant.astype(int).tolist(),
                                         total_relevant)
    if zero_relevant:
        logger.info("%d queries had no relevant gallery item (AP counted as 0)",
                    zero_relevant)
    return ap_sum / len(query_ids)


def format_float(value: float) -> str:
    """Canonical 9-significant-digit rendering used in all result CSVs."""
    return f"{value:.9g}"


def dump_rankings(model, dataset: Dataset, path, k: int = 5,
                  query_split: str = "validation",
                  gallery_split: str = "test") -> None:
    """Per-query ranking CSV: query_id,rank,gallery_id,score,relevant."""
    query_ids = dataset.ids(query_split)
    gallery_ids = dataset.ids(gallery_split)
    if not query_ids or not gallery_ids:
        raise ValueError("both query and gallery splits must be non-empty")
    k = min(k, len(gallery_ids))
    g_ids = np.array(gallery_ids, dtype=np.int64)
    g_emb = _normalize_rows(model.embed_many(dataset.features_for(gallery_ids)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id,rank,gallery_id,score,relevant\n")
        for qid in query_ids:
            q = model.embed(dataset.by_id[qid].features)
            ranked, scores = rank_gallery(q, g_emb, g_ids)
            q_class = dataset.by_id[qid].oracle_class
            for rank in range(k):
                gid = int(ranked[rank])
                rel = int(dataset.by_id[gid].oracle_class == q_class)
                fh.write(f"{qid},{rank + 1},{gid},"
                         f"{format_float(float(scores[rank]))},{rel}\n")


def export_curve(history: Sequence[HistoryRow], path, strategy: str,
                 seed: int) -> None:
    """Write the per-iteration results CSV for external plotting."""
    if not history:
        raise ValueError("history is empty; nothing to export")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(RESULTS_HEADER) + "\n")
        for row in history:
            fh.write(",".join([
                str(row.iteration),
                format_float(row.bits),
                strategy,
                str(seed),
                format_float(row.map_at_5),
                str(row.labeled_pairs),
                str(row.transitive_pairs),
            ]) + "\n")
