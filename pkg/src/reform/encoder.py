"""Factor texts -> M x d profile matrices, plus the binary embedding format."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = "rfmemb1"


class EmbeddingFormatError(ValueError):
    pass


class EncoderError(RuntimeError):
    pass


@dataclass
class ProfileStore:
    """Encoded profiles for every user and item: arrays of shape (N, M, d)."""

    users: np.ndarray
    items: np.ndarray

    @property
    def M(self) -> int:
        return self.users.shape[1]

    @property
    def d(self) -> int:
        return self.users.shape[2]

    def matrix(self, kind: str, index: int) -> np.ndarray:
        table = self.users if kind == "user" else self.items
        if not 0 <= index < len(table):
            raise KeyError(f"no profile matrix for {kind} {index}")
        return table[index]

    def masked(self, factor: int) -> "ProfileStore":
        """Copy with factor row ``factor`` zeroed for every entity."""
        if not 0 <= factor < self.M:
            raise ValueError(f"factor index {factor} outside [0, {self.M})")
        users, items = self.users.copy(), self.items.copy()
        users[:, factor] = 0.0
        items[:, factor] = 0.0
        return ProfileStore(users, items)


@dataclass(frozen=True)
class EncoderProvider:
    kind: str = "hash_mock"  # hash_mock | file_import | http_embeddings
    dim: int = 32
    path: str | None = None
    endpoint: str | None = None
    model_name: str = "bert-base-uncased"
    api_key_env: str = "REFORM_EMBEDDINGS_API_KEY"
    max_retries: int = 5
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind not in ("hash_mock", "file_import", "http_embeddings"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")


def hash_vector(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector seeded by a 64-bit hash of ``text``."""
    seed = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class Encoder:
    """Wraps a provider with a thread-safe text -> vector cache."""

    def __init__(self, provider: EncoderProvider, client=None, sleep=time.sleep):
        self.provider = provider
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._client = client
        self._sleep = sleep
        self._imported: ProfileStore | None = None
        self.requests = 0

    def _http(self, texts: list[str]) -> list[np.ndarray]:
        import httpx

        p = self.provider
        client = self._client or httpx.Client(timeout=p.timeout)
        headers = {}
        key = os.environ.get(p.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        for attempt in range(p.max_retries + 1):
            try:
                self.requests += 1
                resp = client.post(p.endpoint, json={"model": p.model_name, "input": texts},
                                   headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError("retryable", request=resp.request, response=resp)
                resp.raise_for_status()
                data = resp.json()["data"]
                break
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                retryable = not isinstance(exc, httpx.HTTPStatusError) or \
                    exc.response.status_code == 429 or exc.response.status_code >= 500
                if not retryable or attempt == p.max_retries:
                    raise EncoderError(f"embedding request failed: {exc}") from exc
                self._sleep(2.0 ** attempt)
        vecs = []
        for row in data:
            v = np.asarray(row["embedding"], dtype=np.float64)
            if v.ndim == 2:  # token vectors
                v = v.mean(axis=0)
            vecs.append(v)
        return vecs

    def encode_texts(self, texts) -> np.ndarray:
        texts = list(texts)
        with self._lock:
            missing = sorted({t for t in texts if t not in self._cache})
        if missing:
            if self.provider.kind == "hash_mock":
                fresh = [hash_vector(t, self.provider.dim) for t in missing]
            elif self.provider.kind == "http_embeddings":
                fresh = self._http(missing)
            else:
                raise EncoderError("file_import encodes whole profiles, not free text")
            for t, v in zip(missing, fresh):
                if v.shape != (self.provider.dim,):
                    raise EncoderError(
                        f"provider returned dim {v.shape} but the run expects {self.provider.dim}")
            with self._lock:
                self._cache.update(zip(missing, fresh))
        with self._lock:
            return np.stack([self._cache[t] for t in texts]) if texts else \
                np.zeros((0, self.provider.dim))

    def imported(self) -> ProfileStore:
        if self._imported is None:
            self._imported = load_embedding_file(self.provider.path,
                                                 expect={"d": self.provider.dim})
        return self._imported


def encode_profile(encoder: Encoder, profile) -> np.ndarray:
    """M x d matrix for one FactorProfile, rows in factor order."""
    if encoder.provider.kind == "file_import":
        m = encoder.imported().matrix(profile.entity_kind, profile.entity_index)
        if m.shape[0] != len(profile.factors):
            raise EmbeddingFormatError(
                f"imported matrix has {m.shape[0]} rows, profile has {len(profile.factors)} factors")
        return m.copy()
    return encoder.encode_texts(profile.factors)


def encode_profiles(encoder: Encoder, user_profiles, item_profiles) -> ProfileStore:
    users = np.stack([encode_profile(encoder, p) for p in user_profiles])
    items = np.stack([encode_profile(encoder, p) for p in item_profiles])
    if not (np.isfinite(users).all() and np.isfinite(items).all()):
        raise EncoderError("encoder produced non-finite values")
    return ProfileStore(users, items)


# -- binary format: JSON header line, then little-endian f32 user then item matrices


def save_embeddings(path, store: ProfileStore) -> None:
    users = np.asarray(store.users)
    items = np.asarray(store.items)
    M, d = users.shape[1:] if len(users) else items.shape[1:]
    header = {"magic": MAGIC, "M": int(M), "d": int(d), "users": len(users), "items": len(items)}
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(users, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(items, dtype="<f4").tobytes())


def load_embedding_file(path, expect: dict | None = None) -> ProfileStore:
    """Load matrices, validating the header against ``expect`` (subset of M, d, users, items)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise EmbeddingFormatError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EmbeddingFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("magic") != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {header.get('magic')!r}")
    if expect:
        diff = {k: (v, header.get(k)) for k, v in expect.items() if header.get(k) != v}
        if diff:
            lines = ", ".join(f"{k}: expected {a}, found {b}" for k, (a, b) in diff.items())
            raise EmbeddingFormatError(f"{path}: header mismatch ({lines})")
    M, d, nu, ni = (int(header[k]) for k in ("M", "d", "users", "items"))
    start = nl + 1
    need = (nu + ni) * M * d * 4
    have = len(raw) - start
    if have != need:
        raise EmbeddingFormatError(
            f"{path}: payload should end at byte offset {start + need} but the file ends at "
            f"offset {len(raw)} ({'trailing' if have > need else 'missing'} "
            f"{abs(have - need)} bytes)")
    flat = np.frombuffer(raw, dtype="<f4", offset=start).astype(np.float64)
    users = flat[:nu * M * d].reshape(nu, M, d)
    items = flat[nu * M * d:].reshape(ni, M, d)
    return ProfileStore(users, items)
