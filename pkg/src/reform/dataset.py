"""Review ingestion, k-core filtering, 3:1:1 splitting and the bipartite graph."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .seeding import stream_rng

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Review:
    user_id: str
    item_id: str
    text: str
    rating: float | None = None
    timestamp: int | None = None
    review_id: int = -1

    def to_json(self) -> dict:
        out = {"user_id": self.user_id, "item_id": self.item_id, "text": self.text}
        if self.rating is not None:
            out["rating"] = self.rating
        if self.timestamp is not None:
            out["timestamp"] = self.timestamp
        if self.review_id >= 0:
            out["review_id"] = self.review_id
        return out


def _parse_record(obj: dict, position: int) -> Review:
    user_id, item_id, text = obj["user_id"], obj["item_id"], obj["text"]
    if not isinstance(text, str) or not text.strip():
        raise ValueError("empty review text")
    rating = obj.get("rating")
    if rating is not None:
        rating = float(rating)
        if not 1.0 <= rating <= 5.0:
            raise ValueError(f"rating {rating} outside [1, 5]")
    ts = obj.get("timestamp")
    if ts is not None:
        ts = int(ts)
    rid = int(obj.get("review_id", position))
    return Review(str(user_id), str(item_id), text, rating, ts, rid)


def _parse_tsv(line: str, position: int) -> Review:
    cols = line.rstrip("\n").split("\t")
    if not 3 <= len(cols) <= 5:
        raise ValueError(f"expected 3-5 tab-separated columns, got {len(cols)}")
    obj = {"user_id": cols[0], "item_id": cols[1], "text": cols[2]}
    if len(cols) > 3 and cols[3]:
        obj["rating"] = cols[3]
    if len(cols) > 4 and cols[4]:
        obj["timestamp"] = cols[4]
    return _parse_record(obj, position)


def load_reviews(path, fmt: str = "jsonl") -> tuple[list[Review], int]:
    """Read a review corpus.

    Returns ``(reviews, malformed_count)``. Malformed lines (bad JSON, missing
    keys, blank text, duplicate (user, item, timestamp)) are skipped but counted
    and logged; more than half malformed is treated as a wrong-format file.
    Review ids default to the record's position among valid records.
    """
    if fmt not in ("jsonl", "tsv"):
        raise ValueError(f"unknown review format {fmt!r}")
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]

    reviews: list[Review] = []
    seen: set[tuple] = set()
    malformed = 0
    for lineno, line in enumerate(lines, 1):
        try:
            if fmt == "jsonl":
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not a JSON object")
                rec = _parse_record(obj, len(reviews))
            else:
                rec = _parse_tsv(line, len(reviews))
        except (ValueError, KeyError, TypeError) as exc:
            malformed += 1
            log.warning("%s:%d: malformed review (%s)", path, lineno, exc)
            continue
        key = (rec.user_id, rec.item_id, rec.timestamp)
        if key in seen:
            malformed += 1
            log.warning("%s:%d: duplicate (user, item, timestamp) %s", path, lineno, key)
            continue
        seen.add(key)
        reviews.append(rec)

    if lines and malformed * 2 > len(lines):
        raise DatasetFormatError(
            f"{path}: {malformed} of {len(lines)} lines are malformed; is this {fmt}?"
        )
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", path, malformed)
    return reviews, malformed


def write_reviews(path, reviews) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in reviews:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def k_core_filter(reviews: list[Review], k: int) -> list[Review]:
    """Peel users and items with fewer than ``k`` distinct partners until stable.

    Users and items are peeled alternately. All reviews of surviving
    (user, item) pairs are kept, duplicates included.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    user_items: dict[str, set[str]] = defaultdict(set)
    item_users: dict[str, set[str]] = defaultdict(set)
    for r in reviews:
        user_items[r.user_id].add(r.item_id)
        item_users[r.item_id].add(r.user_id)

    while True:
        weak_users = [u for u, its in user_items.items() if len(its) < k]
        for u in weak_users:
            for i in user_items.pop(u):
                item_users[i].discard(u)
        weak_items = [i for i, us in item_users.items() if len(us) < k]
        for i in weak_items:
            for u in item_users.pop(i):
                user_items[u].discard(i)
        if not weak_users and not weak_items:
            break

    kept = [r for r in reviews if r.item_id in user_items.get(r.user_id, ())]
    if not kept and reviews:
        log.warning("%d-core filtering removed every interaction", k)
    return kept


@dataclass(frozen=True)
class IdMap:
    users: dict[str, int]
    items: dict[str, int]

    @classmethod
    def from_reviews(cls, reviews) -> "IdMap":
        users = sorted({r.user_id for r in reviews})
        items = sorted({r.item_id for r in reviews})
        return cls({u: n for n, u in enumerate(users)}, {i: n for n, i in enumerate(items)})

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump({"users": self.users, "items": self.items}, fh, sort_keys=True,
                      ensure_ascii=False, indent=1)

    @classmethod
    def load(cls, path) -> "IdMap":
        with Path(path).open("r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls({k: int(v) for k, v in obj["users"].items()},
                   {k: int(v) for k, v in obj["items"].items()})


@dataclass(frozen=True)
class DataSplit:
    num_users: int
    num_items: int
    train: list[tuple[int, int]]
    val: list[tuple[int, int]]
    test: list[tuple[int, int]]
    id_map: IdMap | None = None

    def parts(self):
        return zip(SPLIT_NAMES, (self.train, self.val, self.test))

    def by_user(self, which: str = "train") -> list[np.ndarray]:
        """Per-user sorted item arrays for one split."""
        rows: list[list[int]] = [[] for _ in range(self.num_users)]
        for u, i in getattr(self, which):
            rows[u].append(i)
        return [np.array(sorted(r), dtype=np.int64) for r in rows]


def split_interactions(reviews: list[Review], ratios=(3, 1, 1), seed: int = 0,
                       id_map: IdMap | None = None) -> DataSplit:
    """Per-user random partition of the unique (user, item) pairs.

    Validation and test take ``floor(n * r / sum(ratios))`` of each user's n
    pairs; the remainder goes to train, so a one-interaction user is all train.
    """
    if len(ratios) != 3 or min(ratios) < 0 or ratios[0] <= 0:
        raise ValueError(f"bad split ratios {ratios}")
    id_map = id_map or IdMap.from_reviews(reviews)
    per_user: dict[int, set[int]] = defaultdict(set)
    for r in reviews:
        per_user[id_map.users[r.user_id]].add(id_map.items[r.item_id])

    total = float(sum(ratios))
    rng = stream_rng(seed, "split")
    train, val, test = [], [], []
    for u in sorted(per_user):
        items = np.array(sorted(per_user[u]), dtype=np.int64)
        rng.shuffle(items)
        n = len(items)
        n_val = math.floor(n * ratios[1] / total)
        n_test = math.floor(n * ratios[2] / total)
        val += [(u, int(i)) for i in items[:n_val]]
        test += [(u, int(i)) for i in items[n_val:n_val + n_test]]
        train += [(u, int(i)) for i in items[n_val + n_test:]]
    return DataSplit(len(id_map.users), len(id_map.items), sorted(train), sorted(val),
                     sorted(test), id_map)


def write_split_tsv(path, split: DataSplit) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for name, pairs in split.parts():
            for u, i in pairs:
                fh.write(f"{u}\t{i}\t{name}\n")


def read_split_tsv(path, id_map: IdMap) -> DataSplit:
    parts: dict[str, list] = {name: [] for name in SPLIT_NAMES}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 3 or cols[2] not in parts:
                raise DatasetFormatError(f"{path}:{lineno}: bad interaction row {line!r}")
            parts[cols[2]].append((int(cols[0]), int(cols[1])))
    return DataSplit(len(id_map.users), len(id_map.items), parts["train"], parts["val"],
                     parts["test"], id_map)


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Bipartite train graph: CSR user->items view and its transpose.

    ``norm`` is the user x item matrix with entries 1/sqrt(|N_u| |N_i|).
    Nodes without training edges keep degree 0 and propagate nothing.
    """

    num_users: int
    num_items: int
    user_indptr: np.ndarray
    user_indices: np.ndarray
    item_indptr: np.ndarray
    item_indices: np.ndarray
    user_degree: np.ndarray
    item_degree: np.ndarray
    norm: sp.csr_matrix = field(repr=False)
    norm_t: sp.csr_matrix = field(repr=False)

    def user_items(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_users(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    def neighbors(self, side: str, anchor: int) -> np.ndarray:
        return self.user_items(anchor) if side == "user" else self.item_users(anchor)

    def dense_norm_adjacency(self) -> np.ndarray:
        """(U+I) x (U+I) symmetric normalized adjacency, for small instances only."""
        n = self.num_users + self.num_items
        a = np.zeros((n, n))
        r = self.norm.toarray()
        a[:self.num_users, self.num_users:] = r
        a[self.num_users:, :self.num_users] = r.T
        return a


def _inv_sqrt(deg: np.ndarray) -> np.ndarray:
    out = np.zeros(len(deg), dtype=np.float64)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def graph_from_pairs(num_users: int, num_items: int, pairs) -> InteractionGraph:
    pairs = sorted(set((int(u), int(i)) for u, i in pairs))
    if not pairs:
        raise ValueError("cannot build a graph without training interactions")
    rows = np.array([u for u, _ in pairs], dtype=np.int64)
    cols = np.array([i for _, i in pairs], dtype=np.int64)
    r = sp.csr_matrix((np.ones(len(pairs)), (rows, cols)), shape=(num_users, num_items))
    r.sort_indices()
    rt = r.T.tocsr()
    rt.sort_indices()
    user_deg = np.diff(r.indptr).astype(np.int64)
    item_deg = np.diff(rt.indptr).astype(np.int64)
    du, di = _inv_sqrt(user_deg), _inv_sqrt(item_deg)
    norm = sp.diags(du) @ r @ sp.diags(di)
    norm = norm.tocsr()
    norm_t = norm.T.tocsr()
    return InteractionGraph(num_users, num_items, r.indptr.astype(np.int64),
                            r.indices.astype(np.int64), rt.indptr.astype(np.int64),
                            rt.indices.astype(np.int64), user_deg, item_deg, norm, norm_t)


def build_graph(split: DataSplit) -> InteractionGraph:
    """Graph over the TRAIN interactions only."""
    return graph_from_pairs(split.num_users, split.num_items, split.train)


def split_stats(reviews, split: DataSplit, graph: InteractionGraph, k: int) -> dict:
    return {
        "k_core": k,
        "reviews": len(reviews),
        "users": split.num_users,
        "items": split.num_items,
        "interactions": len(split.train) + len(split.val) + len(split.test),
        "train": len(split.train),
        "val": len(split.val),
        "test": len(split.test),
        "items_without_train_edges": int((graph.item_degree == 0).sum()),
        "density": (len(split.train) + len(split.val) + len(split.test))
        / max(1, split.num_users * split.num_items),
    }
