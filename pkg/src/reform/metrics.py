"""Ranking metrics under the all-ranking protocol."""

from __future__ import annotations

import numpy as np


def rank_items(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Item indices by descending score, ties by ascending index, ``exclude`` removed."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        order = order[~np.isin(order, np.asarray(list(exclude), dtype=np.int64))]
    return order


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(int(x) for x in relevant)
    if not relevant:
        return 0.0
    hits = sum(1 for x in list(ranked)[:k] if int(x) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(int(x) for x in relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / np.log2(p + 2) for p, x in enumerate(list(ranked)[:k]) if int(x) in relevant)
    idcg = sum(1.0 / np.log2(p + 2) for p in range(min(k, len(relevant))))
    return dcg / idcg


def topk_metrics(user_emb: np.ndarray, item_emb: np.ndarray, exclude: list[np.ndarray],
                 relevant: list[np.ndarray], ks=(10, 20), chunk: int = 1024) -> dict[str, float]:
    """Mean Recall@K / NDCG@K over users with a non-empty relevant set.

    Users are processed in index order so the reduction is deterministic.
    """
    ks = sorted(ks)
    kmax = ks[-1]
    num_users = len(user_emb)
    sums = {f"{m}@{k}": 0.0 for m in ("recall", "ndcg") for k in ks}
    counted = 0
    disc = 1.0 / np.log2(np.arange(2, kmax + 2))
    for lo in range(0, num_users, chunk):
        hi = min(num_users, lo + chunk)
        scores = user_emb[lo:hi] @ item_emb.T
        for row, u in enumerate(range(lo, hi)):
            rel = relevant[u]
            if len(rel) == 0:
                continue
            counted += 1
            s = scores[row].copy()
            if len(exclude[u]):
                s[exclude[u]] = -np.inf
            top = np.argsort(-s, kind="stable")[:kmax]
            hit = np.isin(top, rel)
            for k in ks:
                h = hit[:k]
                sums[f"recall@{k}"] += h.sum() / len(rel)
                idcg = disc[:min(k, len(rel))].sum()
                sums[f"ndcg@{k}"] += (disc[:len(h)][h]).sum() / idcg
    if counted == 0:
        return {key: 0.0 for key in sums}
    return {key: v / counted for key, v in sums.items()}
