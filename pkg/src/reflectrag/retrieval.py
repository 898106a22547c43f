"""Image-query retrieval over the knowledge base.

An entry's retrieval score is the mean of two cosine similarities: query image
vs. entry image (cross-modal in the CLIP sense the KB was built with) and query
image vs. entry title (uni-modal). The single-similarity modes exist for
ablations.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .knowledge_base import KbEntry, KnowledgeBase


class RetrievalMode(str, enum.Enum):
    CROSS_MODAL_ONLY = "cross_modal_only"
    UNI_MODAL_ONLY = "uni_modal_only"
    COMBINED = "combined"


@dataclass(frozen=True)
class RetrievalHit:
    entry_id: str
    rank: int
    score: float
    cross_modal_sim: float
    uni_modal_sim: float

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b)) / (na * nb)


def combine(cross_modal_sim: float, uni_modal_sim: float, mode: RetrievalMode) -> float:
    mode = RetrievalMode(mode)
    if mode is RetrievalMode.COMBINED:
        return (cross_modal_sim + uni_modal_sim) / 2
    if mode is RetrievalMode.CROSS_MODAL_ONLY:
        return cross_modal_sim
    return uni_modal_sim


def score_entry(
    query_image_emb: Sequence[float] | np.ndarray,
    entry: KbEntry,
    mode: RetrievalMode = RetrievalMode.COMBINED,
) -> tuple[float, float, float]:
    """Return ``(score, cross_modal_sim, uni_modal_sim)`` for one entry."""
    cross = cosine_similarity(query_image_emb, entry.image_embedding)
    uni = cosine_similarity(query_image_emb, entry.title_embedding)
    return combine(cross, uni, mode), cross, uni


def _scan(q: np.ndarray, kb: KnowledgeBase, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    # row-wise products + sums: each row's result is independent of the slice bounds
    cross = (kb.image_matrix[lo:hi] * q).sum(axis=1) / kb.image_norms[lo:hi]
    uni = (kb.title_matrix[lo:hi] * q).sum(axis=1) / kb.title_norms[lo:hi]
    return cross, uni


def score_all(
    query_image_emb: Sequence[float] | np.ndarray,
    kb: KnowledgeBase,
    mode: RetrievalMode = RetrievalMode.COMBINED,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score every KB entry; arrays are aligned with ``kb.entries``."""
    q = np.asarray(query_image_emb, dtype=np.float64)
    if q.ndim != 1 or q.size != kb.dim:
        raise DataError(f"query embedding has dimension {q.size}, knowledge base has D={kb.dim}")
    qn = float(np.linalg.norm(q))
    if qn == 0.0 or not math.isfinite(qn):
        raise DataError("query embedding must be finite and non-zero")
    q = q / qn
    n = len(kb)
    kb.record_scan()
    if workers <= 1 or n < 2 * workers:
        cross, uni = _scan(q, kb, 0, n)
    else:
        bounds = np.linspace(0, n, workers + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _scan(q, kb, b[0], b[1]), zip(bounds[:-1], bounds[1:])))
        cross = np.concatenate([p[0] for p in parts])
        uni = np.concatenate([p[1] for p in parts])
    mode = RetrievalMode(mode)
    if mode is RetrievalMode.COMBINED:
        score = (cross + uni) / 2
    elif mode is RetrievalMode.CROSS_MODAL_ONLY:
        score = cross
    else:
        score = uni
    return score, cross, uni


def top_n(
    query_image_emb: Sequence[float] | np.ndarray,
    kb: KnowledgeBase,
    n: int = 5,
    mode: RetrievalMode = RetrievalMode.COMBINED,
    workers: int = 1,
) -> list[RetrievalHit]:
    """Top ``min(n, len(kb))`` entries by score, ties broken by entry_id ascending."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(kb) == 0:
        raise DataError("knowledge base is empty")
    score, cross, uni = score_all(query_image_emb, kb, mode, workers)
    # kb.entries is sorted by entry_id, so position is the secondary key
    order = np.lexsort((np.arange(len(kb)), -score))[:n]
    entries = kb.entries
    return [
        RetrievalHit(
            entries[i].entry_id, rank, float(score[i]), float(cross[i]), float(uni[i])
        )
        for rank, i in enumerate(order.tolist(), start=1)
    ]


def recall_at_k(runs: Iterable[tuple[str, Sequence[RetrievalHit | str]]], k: int) -> float:
    """Fraction of runs whose gold entry id is among the first ``k`` hits."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = found = 0
    for gold, hits in runs:
        ids = [h if isinstance(h, str) else h.entry_id for h in hits[:k]]
        total += 1
        found += gold in ids
    if total == 0:
        raise ValueError("recall_at_k needs at least one run")
    return found / total
