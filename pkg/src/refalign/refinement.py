"""Inference-time reranking through the reference bank.

Both modalities are projected onto the bank (one coordinate per
reference), compared by cosine in that space, and the resulting score is
fused with the base similarity at weight w.  Pure numpy: nothing here
trains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RefinedScore:
    """One query-gallery entry decomposed into its fusion parts."""
    base: float
    reference: float
    weight: float

    @property
    def final(self) -> float:
        return self.base + self.weight * self.reference


def project_to_reference_space(features: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """(n, d) features x (m, d) bank -> (n, m) coordinates."""
    features = np.asarray(features, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    if features.ndim != 2 or bank.ndim != 2 or features.shape[1] != bank.shape[1]:
        raise ValueError(f"projection: shapes {features.shape} / {bank.shape} do not pair")
    return features @ bank.T


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine; zero-norm rows are an error, never an epsilon."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine: shapes {a.shape} / {b.shape} do not pair")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0):
        raise ValueError(f"cosine: zero-norm row {int(np.argmax(na == 0.0))} on the left "
                         f"(projected feature orthogonal to every reference?)")
    if np.any(nb == 0.0):
        raise ValueError(f"cosine: zero-norm row {int(np.argmax(nb == 0.0))} on the right")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def reference_similarity(query_feats: np.ndarray, gallery_feats: np.ndarray,
                         bank: np.ndarray) -> np.ndarray:
    """Cosine between bank-space projections of queries and gallery."""
    q = project_to_reference_space(query_feats, bank)
    g = project_to_reference_space(gallery_feats, bank)
    return cosine_scores(q, g)


def fuse_scores(base: np.ndarray, reference: np.ndarray, weight: float) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if base.shape != reference.shape:
        raise ValueError(f"fusion: score shapes differ, {base.shape} vs {reference.shape}")
    if not np.isfinite(weight) or weight < 0.0:
        raise ValueError(f"fusion: bad weight {weight}")
    return base + weight * reference


def refined_scores(query_feats: np.ndarray, gallery_feats: np.ndarray,
                   bank: np.ndarray, weight: float) -> np.ndarray:
    """Base cosine plus w times reference-space cosine."""
    base = cosine_scores(query_feats, gallery_feats)
    ref = reference_similarity(query_feats, gallery_feats, bank)
    return fuse_scores(base, ref, weight)
