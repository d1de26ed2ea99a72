"""Top-K evaluation: Recall@K and NDCG@K over the full item catalog.

Items are ranked by descending score with ties broken by ascending item id,
and a user's train positives are masked out of the candidate list.  Binary
relevance; aggregate numbers are arithmetic means over evaluated users.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset
from .errors import EmptyRelevantError
from .evaluator import forward_batch
from .graph import MetricGraph


@dataclass
class EvalReport:
    recall: float
    ndcg: float
    k: int
    split: str
    user_ids: np.ndarray
    per_user_recall: np.ndarray
    per_user_ndcg: np.ndarray
    wall_time: float

    def to_text(self) -> str:
        return (f"split = {self.split}\n"
                f"k = {self.k}\n"
                f"users_evaluated = {len(self.user_ids)}\n"
                f"recall@{self.k} = {self.recall!r}\n"
                f"ndcg@{self.k} = {self.ndcg!r}\n")

    def to_dict(self) -> dict:
        return {"split": self.split, "k": self.k,
                "users_evaluated": int(len(self.user_ids)),
                "recall": self.recall, "ndcg": self.ndcg,
                "wall_time": self.wall_time}


def order_scores(scores: np.ndarray, mask=None) -> np.ndarray:
    """Item ids by descending score, ties by ascending id, masked ids dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    if mask is not None and len(mask):
        scores = scores.copy()
        scores[np.asarray(mask, dtype=np.int64)] = -np.inf
    order = np.argsort(-scores, kind="stable")
    if mask is not None and len(mask):
        order = order[: len(scores) - len(mask)]
    return order


def rank_items(metric: MetricGraph, table, user: int, mask=None,
               epsilon: float = 1e-12) -> np.ndarray:
    """Full ranked item list for one user, train positives excluded."""
    n_items = table.items.shape[0]
    users = np.repeat(table.users[user][None, :], n_items, axis=0)
    scores = forward_batch(metric, users, table.items, epsilon=epsilon)
    return order_scores(scores, mask)


def metrics_at_k(ranked, relevant, k: int) -> tuple[float, float]:
    """(recall@k, ndcg@k) for one ranked list against a relevant set.

    DCG counts 1/log2(rank+1) for relevant items at ranks 1..k; the ideal
    DCG places min(k, |relevant|) relevant items at the top.
    """
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise EmptyRelevantError("relevant set is empty")
    top = [int(i) for i in ranked[:k]]
    hits = [rank for rank, item in enumerate(top, start=1) if item in relevant]
    recall = len(hits) / len(relevant)
    dcg = sum(1.0 / math.log2(rank + 1) for rank in hits)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
    return recall, dcg / idcg


def evaluate(metric: MetricGraph, table, ds: InteractionDataset, split: str = "valid",
             k: int = 20, epsilon: float = 1e-12, chunk: int = 256) -> EvalReport:
    """Mean Recall@K / NDCG@K over users holding at least one positive in
    `split`, with train positives masked; deterministic."""
    start = time.perf_counter()
    held = ds.split(split)
    users = np.array([u for u in range(ds.n_users) if len(held[u])], dtype=np.int64)
    n_items = ds.n_items
    recalls = np.empty(len(users))
    ndcgs = np.empty(len(users))
    # ideal DCG by relevant-set size, precomputed once
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    idcg_by_size = np.concatenate([[0.0], np.cumsum(discounts)])

    for block_start in range(0, len(users), chunk):
        block = users[block_start:block_start + chunk]
        b = len(block)
        U = np.repeat(table.users[block], n_items, axis=0)
        V = np.tile(table.items, (b, 1))
        scores = forward_batch(metric, U, V, epsilon=epsilon).reshape(b, n_items)
        mask_rows = np.concatenate([np.full(len(ds.train[u]), row)
                                    for row, u in enumerate(block)]) if b else []
        mask_items = np.concatenate([ds.train[u] for u in block]) if b else []
        if len(mask_items):
            scores[mask_rows, mask_items] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        relevant = np.zeros((b, n_items), dtype=bool)
        rel_rows = np.concatenate([np.full(len(held[u]), row)
                                   for row, u in enumerate(block)])
        relevant[rel_rows, np.concatenate([held[u] for u in block])] = True
        hit = relevant[np.arange(b)[:, None], top]
        n_rel = np.array([len(held[u]) for u in block])
        sl = slice(block_start, block_start + b)
        recalls[sl] = hit.sum(axis=1) / n_rel
        dcg = (hit * discounts[: top.shape[1]]).sum(axis=1)
        ndcgs[sl] = dcg / idcg_by_size[np.minimum(k, n_rel)]
    return EvalReport(
        recall=float(np.mean(recalls)) if len(users) else 0.0,
        ndcg=float(np.mean(ndcgs)) if len(users) else 0.0,
        k=k, split=split, user_ids=users,
        per_user_recall=recalls, per_user_ndcg=ndcgs,
        wall_time=time.perf_counter() - start)
