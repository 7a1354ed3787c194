"""Retrieval metrics and the end-to-end scoring pipeline.

Rankings sort scores descending with ties broken by lower gallery index,
which keeps every number bit-reproducible.  R@K and AP@N are
percentages; mAP lives in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import refinement
from .data import Corpus

DEFAULT_AP_N = 50


def ranking(scores: np.ndarray) -> np.ndarray:
    """Per-query gallery permutation, best first; equal scores keep index
    order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError(f"ranking: need a non-empty score matrix, got shape {scores.shape}")
    return np.argsort(-scores, axis=1, kind="stable")


def _check_relevance(scores: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    relevance = np.asarray(relevance, dtype=bool)
    if relevance.shape != scores.shape:
        raise ValueError(f"metrics: relevance shape {relevance.shape} != scores {np.shape(scores)}")
    missing = np.flatnonzero(~relevance.any(axis=1))
    if missing.size:
        raise ValueError(f"metrics: query {int(missing[0])} has no relevant gallery item")
    return relevance


def rank_at_k(scores: np.ndarray, relevance: np.ndarray, k: int) -> float:
    """Percent of queries with a relevant item somewhere in the top k."""
    if k < 1:
        raise ValueError(f"rank_at_k: k must be >= 1, got {k}")
    order = ranking(scores)
    relevance = _check_relevance(np.asarray(scores), relevance)
    hits = np.take_along_axis(relevance, order[:, :k], axis=1).any(axis=1)
    return float(hits.sum()) / hits.size * 100.0


def mean_average_precision(scores: np.ndarray, relevance: np.ndarray) -> float:
    """Mean over queries of average precision over all relevant items."""
    order = ranking(scores)
    relevance = _check_relevance(np.asarray(scores), relevance)
    aps = []
    for q in range(order.shape[0]):
        rel_sorted = relevance[q, order[q]]
        hit_ranks = np.flatnonzero(rel_sorted)
        precisions = np.arange(1, hit_ranks.size + 1, dtype=np.float64) / (hit_ranks + 1.0)
        aps.append(float(np.sum(precisions)) / hit_ranks.size)
    return float(np.sum(np.asarray(aps))) / len(aps)


def ap_at_n(scores: np.ndarray, query_classes, gallery_classes, n: int) -> float:
    """Fraction of top-n sharing the query's class, averaged per class and
    then across classes, as a percentage."""
    scores = np.asarray(scores, dtype=np.float64)
    query_classes = np.asarray(query_classes)
    gallery_classes = np.asarray(gallery_classes)
    if scores.ndim != 2 or query_classes.shape != (scores.shape[0],) \
            or gallery_classes.shape != (scores.shape[1],):
        raise ValueError(f"ap_at_n: shapes {scores.shape} / {query_classes.shape} / "
                         f"{gallery_classes.shape} do not line up")
    if n < 1 or n > scores.shape[1]:
        raise ValueError(f"ap_at_n: n={n} invalid for a gallery of {scores.shape[1]}")
    order = ranking(scores)
    top = gallery_classes[order[:, :n]]
    frac = (top == query_classes[:, None]).sum(axis=1).astype(np.float64) / n
    class_means = []
    for c in np.unique(query_classes):
        members = frac[query_classes == c]
        class_means.append(float(np.sum(members)) / members.size)
    return float(np.sum(np.asarray(class_means))) / len(class_means) * 100.0


@dataclass
class RetrievalResult:
    rankings: np.ndarray   # (nq, ng) gallery permutations
    relevance: np.ndarray  # (nq, ng) bool
    metrics: dict[str, float]


def encode_split(model, corpus: Corpus, split: str):
    """-> (text features, image features, labels) as plain arrays."""
    if split == "test":
        pairs = corpus.test_pairs
    elif split == "train":
        pairs = corpus.train_pairs
    else:
        raise ValueError(f"encode_split: unknown split {split!r}")
    if not pairs:
        raise ValueError(f"encode_split: split {split!r} is empty")
    text, _, _ = model.text_encoder.encode_batch([p.tokens for p in pairs])
    image = model.image_encoder.encode_batch(np.stack([p.image for p in pairs]))
    labels = np.asarray([p.identity_id for p in pairs], dtype=np.int64)
    return text.data, image.data, labels


def run_retrieval(model, corpus: Corpus, split: str = "test",
                  direction: str = "t2i", use_refine: bool = False,
                  w: float = 0.5, ap_n: int | None = None) -> RetrievalResult:
    """Score a whole split in one direction and aggregate every metric.

    t2i ranks images by text queries; i2t transposes.  With use_refine,
    scores become base + w * reference-space cosine through the bank.
    """
    if direction not in ("t2i", "i2t"):
        raise ValueError(f"run_retrieval: direction {direction!r}")
    text, image, labels = encode_split(model, corpus, split)
    queries, gallery = (text, image) if direction == "t2i" else (image, text)
    if use_refine:
        scores = refinement.refined_scores(queries, gallery, model.bank.matrix(), w)
    else:
        scores = refinement.cosine_scores(queries, gallery)
    relevance = labels[:, None] == labels[None, :]
    n = min(DEFAULT_AP_N, scores.shape[1]) if ap_n is None else ap_n
    metrics = {
        "R@1": rank_at_k(scores, relevance, 1),
        "R@5": rank_at_k(scores, relevance, 5),
        "R@10": rank_at_k(scores, relevance, 10),
        "mAP": mean_average_precision(scores, relevance),
        f"AP@{n}": ap_at_n(scores, labels, labels, n),
    }
    return RetrievalResult(rankings=ranking(scores), relevance=relevance, metrics=metrics)
