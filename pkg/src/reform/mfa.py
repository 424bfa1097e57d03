"""Multi-factor attention: profile projections, multi-key cross attention with
pooled attention maps, factor averaging, and the exact backward pass.

Shapes: M factors, d profile dim, D attention dim (d*), n keys, B anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import stream_rng

PROJECTION_NAMES = ("W_Qu", "W_Ki", "W_Vu", "W_Qi", "W_Ku", "W_Vi")
# anchor side -> (query, key, value) projections; keys come from the counterpart
SIDE_WEIGHTS = {
    "user": ("W_Qu", "W_Ki", "W_Vu"),
    "item": ("W_Qi", "W_Ku", "W_Vi"),
}
POOLS = ("max", "mean")


class NumericalError(FloatingPointError):
    pass


def init_projections(d: int, d_star: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Six d x d* matrices, uniform in +-sqrt(6 / (d + d*))."""
    bound = np.sqrt(6.0 / (d + d_star))
    return {name: rng.uniform(-bound, bound, size=(d, d_star)) for name in PROJECTION_NAMES}


def project(profile: np.ndarray, W: np.ndarray) -> np.ndarray:
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape[-1] != W.shape[0]:
        raise ValueError(f"profile dim {profile.shape[-1]} does not match projection {W.shape}")
    return profile @ W


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def factor_average(output: np.ndarray) -> np.ndarray:
    return np.asarray(output).mean(axis=-2)


@dataclass
class AttentionState:
    """Everything the backward pass needs from one batched forward."""

    Q: np.ndarray  # (B, M, D)
    K: np.ndarray  # (B, n, M, D)
    V: np.ndarray  # (B, M, D)
    A: np.ndarray  # (B, n, M, M) per-key row-softmax maps
    P: np.ndarray  # (B, M, M) pooled map
    src: np.ndarray  # (B, M, M) key index each pooled cell came from (max pooling)
    mask: np.ndarray  # (B, n) valid keys
    pool: str

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def attention_forward(Q, K, V, mask=None, pool: str = "max"):
    """Batched multi-key attention.

    Returns ``(out, state)`` with out = pool_j(softmax(Q K_j^T / sqrt(D))) V.
    Anchors with no valid key fall back to a uniform map.
    """
    if pool not in POOLS:
        raise ValueError(f"unknown pooling {pool!r}")
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    B, n, M, D = K.shape
    if Q.shape != (B, M, D) or V.shape != (B, M, D):
        raise ValueError(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if mask is None:
        mask = np.ones((B, n), dtype=bool)
    mask = np.asarray(mask, dtype=bool)

    logits = (Q[:, None] @ K.swapaxes(-1, -2)) / np.sqrt(D)  # (B, n, M, M)
    if not np.isfinite(logits[mask]).all():
        raise NumericalError("non-finite attention logits")
    A = softmax(logits)

    counts = mask.sum(axis=1)
    if pool == "max":
        masked = np.where(mask[:, :, None, None], A, -1.0)
        src = masked.argmax(axis=1)  # first index wins ties
        P = np.take_along_axis(masked, src[:, None], axis=1)[:, 0]
    else:
        src = np.zeros((B, M, M), dtype=np.int64)
        P = (A * mask[:, :, None, None]).sum(axis=1) / np.maximum(counts, 1)[:, None, None]
    empty = counts == 0
    if empty.any():
        P[empty] = 1.0 / M

    out = P @ V
    return out, AttentionState(Q, K, V, A, P, src, mask, pool)


def attention_backward(state: AttentionState, grad_out: np.ndarray):
    """Gradients of (Q, K, V) given d loss / d out (shape (B, M, D))."""
    Q, K, V, A, P, mask = state.Q, state.K, state.V, state.A, state.P, state.mask
    B, n, M, D = K.shape
    grad_out = np.asarray(grad_out, dtype=np.float64)

    dV = np.einsum("bmk,bmd->bkd", P, grad_out)
    dP = np.einsum("bmd,bkd->bmk", grad_out, V)
    counts = state.counts
    if state.pool == "max":
        route = state.src[:, None] == np.arange(n)[None, :, None, None]
        dA = np.where(route & mask[:, :, None, None], dP[:, None], 0.0)
    else:
        w = mask / np.maximum(counts, 1)[:, None]
        dA = dP[:, None] * w[:, :, None, None]
    dlogits = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(D)
    dQ = np.einsum("bjmk,bjkd->bmd", dlogits, K)
    dK = np.einsum("bjmk,bmd->bjkd", dlogits, Q)
    return dQ, dK, dV


def argmax_margin(state: AttentionState) -> float:
    """Smallest gap between the winning and runner-up map over all pooled cells.

    Max pooling is not differentiable where this is ~0; finite-difference checks
    skip such instances.
    """
    if state.pool != "max":
        return np.inf
    A = np.where(state.mask[:, :, None, None], state.A, -np.inf)
    if A.shape[1] < 2:
        return np.inf
    top2 = -np.sort(-A, axis=1)[:, :2]
    gap = top2[:, 0] - top2[:, 1]
    gap = gap[np.isfinite(gap)]
    return float(gap.min()) if gap.size else np.inf


def mfa_forward(Q, K_list, V, pool: str = "max"):
    """Single-anchor MFA: ``(output, pooled_map, argmax_sources)``."""
    if len(K_list) < 1:
        raise ValueError("need at least one key")
    K = np.stack([np.asarray(k, dtype=np.float64) for k in K_list])
    out, st = attention_forward(np.asarray(Q)[None], K[None], np.asarray(V)[None], pool=pool)
    return out[0], st.P[0], st.src[0]


# -- one side of the model (user-side or item-side attentive embeddings) ----------


@dataclass
class SideState:
    X_anchor: np.ndarray  # (B, M, d)
    X_keys: np.ndarray  # (B, n, M, d)
    attn: AttentionState


def side_forward(X_anchor, X_keys, mask, W_Q, W_K, W_V, pool: str = "max"):
    """Attentive embeddings e^a (B, D) for a batch of anchors on one side."""
    Q = X_anchor @ W_Q
    V = X_anchor @ W_V
    K = X_keys @ W_K
    out, st = attention_forward(Q, K, V, mask, pool)
    return factor_average(out), SideState(X_anchor, X_keys, st)


def side_backward(state: SideState, grad_e: np.ndarray):
    """Gradients of (W_Q, W_K, W_V) given d loss / d e^a (shape (B, D))."""
    M = state.X_anchor.shape[1]
    grad_out = np.repeat(np.asarray(grad_e)[:, None, :] / M, M, axis=1)
    dQ, dK, dV = attention_backward(state.attn, grad_out)
    Xa = state.X_anchor
    gQ = np.einsum("bmd,bme->de", Xa, dQ)
    gV = np.einsum("bmd,bme->de", Xa, dV)
    gK = np.einsum("bjmd,bjme->de", state.X_keys, dK)
    return gQ, gK, gV


# -- key sampling --------------------------------------------------------------


@dataclass
class KeyTable:
    """Per-anchor key lists, padded to width n; ``mask`` marks real entries."""

    index: np.ndarray  # (num_anchors, n) int
    mask: np.ndarray  # (num_anchors, n) bool

    def rows(self, anchors):
        return self.index[anchors], self.mask[anchors]

    def keys_of(self, anchor: int) -> np.ndarray:
        return self.index[anchor][self.mask[anchor]]


def _csr(graph, side: str):
    if side == "user":
        return graph.user_indptr, graph.user_indices
    if side == "item":
        return graph.item_indptr, graph.item_indices
    raise ValueError(f"side must be 'user' or 'item', not {side!r}")


def sample_keys(graph, side: str, anchor: int, n: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Uniform draw of up to ``n`` distinct training neighbours of one anchor."""
    indptr, indices = _csr(graph, side)
    neigh = indices[indptr[anchor]:indptr[anchor + 1]]
    if len(neigh) == 0:
        raise ValueError(f"{side} {anchor} has no training neighbours")
    rng = stream_rng(seed, "keys", epoch, 0 if side == "user" else 1, anchor)
    return rng.choice(neigh, size=min(n, len(neigh)), replace=False)


def epoch_keys(graph, side: str, n: int, seed: int, epoch: int) -> KeyTable:
    """Key table for every anchor of one side, redrawn each epoch."""
    indptr, indices = _csr(graph, side)
    num = len(indptr) - 1
    deg = np.diff(indptr)
    row = np.repeat(np.arange(num), deg)
    rng = stream_rng(seed, "keys", epoch, 0 if side == "user" else 1)
    order = np.lexsort((rng.random(len(indices)), row))
    pos = np.arange(len(indices)) - indptr[row]
    keep = pos < n
    index = np.zeros((num, n), dtype=np.int64)
    mask = np.zeros((num, n), dtype=bool)
    index[row[keep], pos[keep]] = indices[order][keep]
    mask[row[keep], pos[keep]] = True
    return KeyTable(index, mask)


def inference_keys(graph, side: str, cap: int = 50) -> KeyTable:
    """Deterministic keys: the first ``cap`` neighbours in index order."""
    indptr, indices = _csr(graph, side)
    num = len(indptr) - 1
    width = max(1, min(cap, int(np.diff(indptr).max(initial=0))))
    index = np.zeros((num, width), dtype=np.int64)
    mask = np.zeros((num, width), dtype=bool)
    for a in range(num):
        neigh = indices[indptr[a]:indptr[a + 1]][:width]
        index[a, :len(neigh)] = neigh
        mask[a, :len(neigh)] = True
    return KeyTable(index, mask)


def mfa_embed(direction: str, anchor: int, keys, profiles, proj: dict, pool: str = "max"):
    """Attentive embedding of one anchor given explicit key entities.

    ``direction`` is "user" (user queries, item keys) or "item" (reversed).
    ``profiles`` exposes ``users`` and ``items`` arrays of shape (N, M, d).
    """
    own, other = (profiles.users, profiles.items) if direction == "user" else \
        (profiles.items, profiles.users)
    other_kind = "item" if direction == "user" else "user"
    if not 0 <= anchor < len(own):
        raise KeyError(f"no profile for {direction} {anchor}")
    keys = np.asarray(keys, dtype=np.int64)
    bad = [int(k) for k in keys if not 0 <= k < len(other)]
    if bad:
        raise KeyError(f"no profile for {other_kind}(s) {bad}")
    wq, wk, wv = (proj[name] for name in SIDE_WEIGHTS[direction])
    e, _ = side_forward(own[anchor][None], other[keys][None], None, wq, wk, wv, pool)
    return e[0]
