"""Retrieval evaluation over a closed candidate pool.

Each eval query scores every pool candidate (all eval positives plus
all eval hard negatives); ties in score break toward the lower
candidate id so rankings are fully deterministic. Metrics are Hit@1,
Recall@K, and NDCG@K with gain = relevance and discount 1/log2(rank+1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .geometry import apply_whitening, centroid_gap, covariance_gap, fit_whitening
from .synth import Dataset, ModelParams, encode_batch


@dataclass(frozen=True)
class RankedList:
    """One query's candidates ordered best-first, plus the relevant id set."""

    query_id: int
    candidate_ids: tuple[int, ...]
    relevant_ids: frozenset[int]

    def __post_init__(self):
        if len(self.candidate_ids) == 0:
            raise ContractViolation("ranked list must contain at least one candidate")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise ContractViolation("candidate ids must be unique")
        if not self.relevant_ids:
            raise ContractViolation("ranked list must declare at least one relevant id")


def hit_at_1(ranked: Sequence[RankedList]) -> float:
    """Fraction of queries whose top candidate is relevant."""
    if not ranked:
        raise ContractViolation("need at least one ranked list")
    hits = sum(1 for r in ranked if r.candidate_ids[0] in r.relevant_ids)
    return hits / len(ranked)


def recall_at_k(ranked: Sequence[RankedList], k: int) -> float:
    """Mean fraction of each query's relevant ids found in its top k."""
    if not ranked:
        raise ContractViolation("need at least one ranked list")
    if k < 1:
        raise ContractViolation(f"k must be positive, got {k}")
    total = 0.0
    for r in ranked:
        top = set(r.candidate_ids[:k])
        total += len(top & r.relevant_ids) / len(r.relevant_ids)
    return total / len(ranked)


def ndcg_at_k(ranked: Sequence[RankedList], k: int = 5) -> float:
    """Mean normalized DCG@k with binary gains and 1/log2(rank+1) discounts.

    The ideal DCG places every relevant item first; a query with zero
    relevant candidates would make the normalizer vanish and is rejected
    upstream by RankedList.
    """
    if not ranked:
        raise ContractViolation("need at least one ranked list")
    if k < 1:
        raise ContractViolation(f"k must be positive, got {k}")
    total = 0.0
    for r in ranked:
        dcg = 0.0
        for rank, cid in enumerate(r.candidate_ids[:k], start=1):
            if cid in r.relevant_ids:
                dcg += 1.0 / math.log2(rank + 1)
        ideal_hits = min(len(r.relevant_ids), k)
        ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, ideal_hits + 1))
        total += dcg / ideal
    return total / len(ranked)


def rank_candidates(scores: np.ndarray, candidate_ids: Sequence[int]) -> tuple[int, ...]:
    """Order candidate ids by descending score, ties toward the lower id."""
    ids = np.asarray(candidate_ids)
    if ids.shape != np.asarray(scores).shape:
        raise ContractViolation("scores and candidate ids must align")
    order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
    return tuple(int(ids[i]) for i in order)


@dataclass(frozen=True)
class EvalOptions:
    use_whitened: bool = False  # score in the whitened space instead of raw
    jitter: float = 1e-4  # whitening jitter when use_whitened is set

    def as_dict(self) -> dict:
        return {"use_whitened": self.use_whitened, "jitter": self.jitter}


def evaluate(params: ModelParams, dataset: Dataset, options: EvalOptions | None = None) -> dict:
    """Score the eval split against its closed candidate pool.

    Pool ids: positive i gets id i (relevant to query i); hard negatives
    get ids from len(eval) upward in tuple order. Scoring uses raw
    normalized embeddings by default; with use_whitened a transform is
    fitted on queries plus pool and both sides are re-normalized after
    whitening.
    """
    options = options or EvalOptions()
    rows = dataset.eval
    if not rows:
        raise ContractViolation("dataset has an empty eval split")
    queries = [t.query for t in rows]
    pool_items = [t.positive for t in rows]
    for t in rows:
        pool_items.extend(t.hard_negatives)
    query_emb, _ = encode_batch(params, queries)
    pool_emb, _ = encode_batch(params, pool_items)
    positives = pool_emb[: len(rows)]

    if options.use_whitened:
        transform = fit_whitening(query_emb, pool_emb, options.jitter)
        query_scored = _renormalize(apply_whitening(transform, query_emb))
        pool_scored = _renormalize(apply_whitening(transform, pool_emb))
    else:
        query_scored = query_emb
        pool_scored = pool_emb

    scores = query_scored @ pool_scored.T
    ids = np.arange(pool_emb.shape[0])
    ranked = [
        RankedList(
            query_id=i,
            candidate_ids=rank_candidates(scores[i], ids),
            relevant_ids=frozenset({i}),
        )
        for i in range(len(rows))
    ]
    return {
        "num_queries": len(rows),
        "pool_size": int(pool_emb.shape[0]),
        "use_whitened": options.use_whitened,
        "metrics": {
            "hit_at_1": hit_at_1(ranked),
            "recall_at_1": recall_at_k(ranked, 1),
            "recall_at_5": recall_at_k(ranked, 5),
            "ndcg_at_5": ndcg_at_k(ranked, 5),
        },
        "diagnostics": {
            "centroid_gap": centroid_gap(query_emb, positives),
            "covariance_gap": covariance_gap(query_emb, positives),
        },
    }


def _renormalize(batch: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(batch, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ContractViolation("whitened embedding collapsed to zero norm")
    return batch / norms
