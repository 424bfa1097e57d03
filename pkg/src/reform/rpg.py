"""Review-aggregated profile generation.

Reviews are sampled per entity, wrapped in a factor-aware prompt, sent to a
chat LLM (or the deterministic mock), and the JSON answer becomes an ordered
list of factor descriptions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import string
import threading
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Review
from .seeding import stream_rng

log = logging.getLogger(__name__)

UNKNOWN = "unknown"


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class FactorSet:
    names: tuple[str, ...]
    descriptions: tuple[str, ...]
    # vocabulary the mock backend looks for under each factor; optional
    keywords: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if not self.names:
            raise ValueError("a factor set needs at least one factor")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"factor names must be unique: {self.names}")
        if len(self.descriptions) != len(self.names):
            raise ValueError("one description per factor is required")
        if self.keywords and len(self.keywords) != len(self.names):
            raise ValueError("keywords, when given, need one tuple per factor")

    @property
    def M(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown factor {name!r}; known: {', '.join(self.names)}") from None

    def subset(self, idx: int) -> "FactorSet":
        kw = (self.keywords[idx],) if self.keywords else ()
        return FactorSet((self.names[idx],), (self.descriptions[idx],), kw)

    def to_json(self) -> dict:
        return {"factors": [
            {"name": n, "description": d, "keywords": list(self.keywords[k]) if self.keywords else []}
            for k, (n, d) in enumerate(zip(self.names, self.descriptions))]}

    @classmethod
    def from_json(cls, obj: dict) -> "FactorSet":
        rows = obj["factors"]
        kws = tuple(tuple(r.get("keywords", ())) for r in rows)
        return cls(tuple(r["name"] for r in rows), tuple(r["description"] for r in rows),
                   kws if any(kws) else ())

    @classmethod
    def load(cls, path) -> "FactorSet":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


RESTAURANT_FACTORS = FactorSet(
    names=("cuisine type", "flavor", "atmosphere", "price", "time", "waiting", "companion"),
    descriptions=(
        "Which cuisines and dishes are favoured, and any diet the eater follows "
        "(e.g. Greek, seafood, vegan, gluten-free).",
        "How the food tastes: spice level, sweetness, richness, seasoning.",
        "The setting and mood of the place: decor, noise, how casual or formal it feels.",
        "Cost relative to what is served and how much money matters.",
        "When the visits happen: breakfast, lunch, dinner, late night, weekends.",
        "How long it takes to get seated or served, and tolerance for queues.",
        "Who comes along: family, friends, a date, colleagues, or alone.",
    ),
    keywords=(
        ("greek", "italian", "mexican", "japanese", "korean", "indian", "thai", "chinese",
         "french", "vietnamese", "seafood", "vegan", "bbq"),
        ("spicy", "sweet", "savory", "salty", "sour", "smoky", "tangy", "bland", "rich"),
        ("cozy", "lively", "quiet", "romantic", "casual", "noisy", "elegant", "rustic"),
        ("cheap", "affordable", "reasonable", "pricey", "expensive", "overpriced", "bargain"),
        ("breakfast", "brunch", "lunch", "dinner", "late-night", "weekend", "weekday"),
        ("quick", "slow", "long-wait", "no-wait", "reservation", "crowded"),
        ("family", "friends", "date", "solo", "kids", "coworkers", "group"),
    ),
)


@dataclass(frozen=True)
class FactorProfile:
    entity_kind: str  # "user" | "item"
    entity_index: int
    factors: tuple[str, ...]
    provenance: tuple[int, ...] = ()
    noise_ratio: float = 0.0

    def to_json(self, factor_set: FactorSet) -> dict:
        return {
            "kind": self.entity_kind,
            "index": self.entity_index,
            "factors": dict(zip(factor_set.names, self.factors)),
            "provenance": list(self.provenance),
            "noise_ratio": self.noise_ratio,
        }

    @classmethod
    def from_json(cls, obj: dict, factor_set: FactorSet) -> "FactorProfile":
        f = obj["factors"]
        return cls(obj["kind"], int(obj["index"]), tuple(f.get(n, UNKNOWN) for n in factor_set.names),
                   tuple(obj.get("provenance", ())), float(obj.get("noise_ratio", 0.0)))


def write_profiles(path, profiles, factor_set: FactorSet) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_json(factor_set), ensure_ascii=False) + "\n")


def read_profiles(path, factor_set: FactorSet) -> tuple[list[FactorProfile], list[FactorProfile]]:
    users, items = [], []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                p = FactorProfile.from_json(json.loads(line), factor_set)
                (users if p.entity_kind == "user" else items).append(p)
    users.sort(key=lambda p: p.entity_index)
    items.sort(key=lambda p: p.entity_index)
    return users, items


# -- review sampling --------------------------------------------------------------


def sample_user_reviews(reviews: list[Review], n_max: int = 100, seed: int = 0,
                        entity: int = 0) -> list[Review]:
    """Uniform sample without replacement, kept in input order."""
    if len(reviews) <= n_max:
        return list(reviews)
    rng = stream_rng(seed, "sample", entity)
    idx = np.sort(rng.choice(len(reviews), size=n_max, replace=False))
    return [reviews[k] for k in idx]


def sample_item_reviews(reviews: list[Review], n_max: int = 100) -> list[Review]:
    """Longest reviews first; equal lengths ordered by review id."""
    return sorted(reviews, key=lambda r: (-len(r.text), r.review_id))[:n_max]


def inject_noise(own: list[Review], pool: list[Review], ratio: float, seed: int = 0,
                 entity: int = 0) -> list[Review]:
    """Swap ``round(ratio * len(own))`` of ``own`` for reviews drawn from ``pool``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio {ratio} outside [0, 1]")
    n_rep = math.floor(ratio * len(own) + 0.5)
    if n_rep == 0:
        return list(own)
    own_ids = {r.review_id for r in own}
    pool = [r for r in pool if r.review_id not in own_ids]
    if not pool:
        raise ValueError("noise injection needs a non-empty pool of other users' reviews")
    rng = stream_rng(seed, "noise", entity)
    slots = rng.choice(len(own), size=n_rep, replace=False)
    replace = len(pool) < n_rep
    if replace:
        log.warning("noise pool has %d reviews for %d replacements; sampling with replacement",
                    len(pool), n_rep)
    picks = rng.choice(len(pool), size=n_rep, replace=replace)
    out = list(own)
    for s, p in zip(slots, picks):
        out[s] = pool[p]
    return out


# -- prompts ------------------------------------------------------------------------

DEFAULT_TEMPLATE = """$role

Read the reviews below and describe the following $num_factors factors:
$factor_lines

Reviews:
$reviews

$format"""

ROLE_TEXT = {
    "user": "You are given restaurant reviews written by a single user. Infer what this "
            "user looks for when choosing a restaurant.",
    "item": "You are given reviews that many visitors wrote about a single restaurant. "
            "Summarise what this restaurant offers and how visitors experience it.",
}

REPAIR_TEXT = ("\n\nYour previous answer could not be parsed. Reply with the JSON object "
               "only, no prose and no code fences.")

_REVIEW_RE = re.compile(r'<review id="(-?\d+)">\n(.*?)\n</review>', re.DOTALL)


def load_template(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _review_block(r: Review) -> str:
    text = r.text.replace("</review>", "</ review>")
    return f'<review id="{r.review_id}">\n{text}\n</review>'


def build_prompt(factor_set: FactorSet, reviews: list[Review], entity_kind: str,
                 template: str = DEFAULT_TEMPLATE, max_tokens: int | None = None) -> str:
    """Single prompt covering every factor of ``factor_set``.

    Token counts are estimated at four characters per token; over budget, reviews
    are dropped from the end.
    """
    if not reviews:
        raise ValueError("cannot build a prompt without reviews")
    if entity_kind not in ROLE_TEXT:
        raise ValueError(f"entity kind must be 'user' or 'item', not {entity_kind!r}")
    keys = ", ".join(json.dumps(n) for n in factor_set.names)
    fields = {
        "role": ROLE_TEXT[entity_kind],
        "num_factors": str(factor_set.M),
        "factor_lines": "\n".join(f"- {n}: {d}" for n, d in
                                  zip(factor_set.names, factor_set.descriptions)),
        "format": f"Answer with a single JSON object whose keys are exactly {keys}. Each value "
                  f"is a short phrase; write \"{UNKNOWN}\" when the reviews say nothing about "
                  "that factor.",
    }
    tmpl = string.Template(template)
    blocks = [_review_block(r) for r in reviews]
    prompt = tmpl.substitute(fields, reviews="\n".join(blocks))
    if max_tokens is not None and len(prompt) / 4 > max_tokens:
        dropped = 0
        while len(blocks) > 1 and len(prompt) / 4 > max_tokens:
            blocks.pop()
            dropped += 1
            prompt = tmpl.substitute(fields, reviews="\n".join(blocks))
        log.warning("prompt over %d-token budget; dropped %d trailing review(s)",
                    max_tokens, dropped)
    return prompt


def prompt_reviews(prompt: str) -> list[str]:
    return [m.group(2) for m in _REVIEW_RE.finditer(prompt)]


# -- backends -------------------------------------------------------------------------


@dataclass(frozen=True)
class LlmBackendConfig:
    kind: str = "mock"  # mock | http_chat
    endpoint: str | None = None
    model_name: str = "gpt-4o-mini"
    max_retries: int = 5
    timeout: float = 60.0
    temperature: float = 0.0
    api_key_env: str = "OPENAI_API_KEY"
    backoff_base: float = 1.0
    max_prompt_tokens: int = 100_000
    mock_top_k: int = 1
    per_factor_prompts: bool = False

    def __post_init__(self):
        if self.kind not in ("mock", "http_chat"):
            raise ValueError(f"unknown LLM backend kind {self.kind!r}")
        if self.kind == "http_chat" and not self.endpoint:
            raise ValueError("http_chat backend needs an endpoint")


_WORD_RE = re.compile(r"[a-z]+(?:[-'][a-z]+)*")
STOP_WORDS = frozenset("""
a about above after again all also am an and any are as at be because been before being
below between both but by came can come could did do does doing down during each few for
from further get got had has have having he her here hers him his how i if in into is it its
itself just me more most my no nor not now of off on once only or other our ours out over own
place really same she should so some such than that the their them then there these they
this those through to too under until up very was we went were what when where which while
who whom why will with would you your food time visit
""".split())


class MockLlm:
    """Deterministic stand-in: per factor, the most frequent content words of the reviews.

    When the factor set carries keywords, only that factor's keywords count.
    """

    def __init__(self, config: LlmBackendConfig, factor_set: FactorSet):
        self.config = config
        self.factor_set = factor_set
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        counts = Counter(w for text in prompt_reviews(prompt)
                         for w in _WORD_RE.findall(text.lower()) if w not in STOP_WORDS)
        answer = {}
        fs = self.factor_set
        for m, name in enumerate(fs.names):
            if f'"{name}"' not in prompt:
                continue
            vocab = set(fs.keywords[m]) if fs.keywords else None
            ranked = sorted(((-c, w) for w, c in counts.items() if vocab is None or w in vocab))
            words = [w for _, w in ranked[:self.config.mock_top_k]]
            answer[name] = f"{name}: {', '.join(words)}" if words else UNKNOWN
        return json.dumps(answer)


class HttpChatLlm:
    """Chat-completions style endpoint with exponential backoff."""

    def __init__(self, config: LlmBackendConfig, client=None, sleep=time.sleep):
        self.config = config
        self.calls = 0
        self._client = client
        self._sleep = sleep
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        import httpx

        c = self.config
        client = self._client or httpx.Client(timeout=c.timeout)
        headers = {}
        key = os.environ.get(c.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": c.model_name, "messages": [{"role": "user", "content": prompt}],
                "temperature": c.temperature}
        last = None
        for attempt in range(c.max_retries + 1):
            with self._lock:
                self.calls += 1
            try:
                resp = client.post(c.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendError(f"unexpected chat response shape: {exc}") from exc
                if resp.status_code != 429 and resp.status_code < 500:
                    raise BackendError(f"chat endpoint returned HTTP {resp.status_code}")
                last = f"HTTP {resp.status_code}"
            if attempt < c.max_retries:
                delay = c.backoff_base * 2.0 ** attempt
                log.warning("chat request failed (%s); retry %d/%d in %.1fs",
                            last, attempt + 1, c.max_retries, delay)
                self._sleep(delay)
        raise BackendError(f"chat endpoint failed after {c.max_retries} retries: {last}")


def make_backend(config: LlmBackendConfig, factor_set: FactorSet, client=None):
    if config.kind == "mock":
        return MockLlm(config, factor_set)
    return HttpChatLlm(config, client=client)


class ResponseCache:
    """Prompt-hash -> raw response, thread safe, optionally persisted as JSONL."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        if self.path and self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._data[row["key"]] = row["response"]

    @staticmethod
    def key(model_name: str, prompt: str) -> str:
        return hashlib.sha256(f"{model_name}\0{prompt}".encode("utf-8")).hexdigest()

    def lock_for(self, key: str) -> threading.Lock:
        """Per-prompt lock so concurrent identical prompts reach the backend once."""
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, response: str) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = response
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "response": response}) + "\n")

    def __len__(self):
        with self._lock:
            return len(self._data)


def _norm_key(k: str) -> str:
    return re.sub(r"[\s_\-]+", " ", str(k)).strip().lower()


def parse_response(text: str, factor_set: FactorSet) -> tuple[str, ...]:
    """Ordered factor strings from a JSON answer; raises ValueError if unparseable."""
    body = text.strip()
    body = re.sub(r"^```(?:json)?\s*|\s*```$", "", body)
    lo, hi = body.find("{"), body.rfind("}")
    if lo < 0 or hi < lo:
        raise ValueError("no JSON object in response")
    obj = json.loads(body[lo:hi + 1])
    if not isinstance(obj, dict):
        raise ValueError("response JSON is not an object")
    by_key = {_norm_key(k): v for k, v in obj.items()}
    out = []
    for name in factor_set.names:
        v = by_key.get(_norm_key(name))
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        if v is None or not str(v).strip():
            log.warning("response has no usable %r entry; using %r", name, UNKNOWN)
            v = UNKNOWN
        out.append(str(v).strip())
    return tuple(out)


def _ask(backend, prompt: str, factor_set: FactorSet, cache: ResponseCache | None):
    if cache is None:
        return _query(backend, prompt, factor_set, None, "")
    key = ResponseCache.key(backend.config.model_name, prompt)
    with cache.lock_for(key):
        hit = cache.get(key)
        if hit is not None:
            return parse_response(hit, factor_set)
        return _query(backend, prompt, factor_set, cache, key)


def _query(backend, prompt: str, factor_set: FactorSet, cache, key: str):
    raw = backend.complete(prompt)
    try:
        factors = parse_response(raw, factor_set)
    except ValueError as first:
        log.warning("unparseable LLM response (%s); asking once more", first)
        raw = backend.complete(prompt + REPAIR_TEXT)
        try:
            factors = parse_response(raw, factor_set)
        except ValueError as exc:
            raise BackendError(f"LLM response still unparseable after repair: {exc}") from exc
    if cache is not None:
        cache.put(key, raw)
    return factors


def generate_profile(backend, prompt: str, factor_set: FactorSet,
                     cache: ResponseCache | None = None, *, entity_kind: str = "user",
                     entity_index: int = 0, provenance=(), noise_ratio: float = 0.0) -> FactorProfile:
    """Query the backend (or the cache) and parse the answer into M factor strings."""
    factors = _ask(backend, prompt, factor_set, cache)
    return FactorProfile(entity_kind, entity_index, factors, tuple(provenance), noise_ratio)


# -- whole-corpus pipeline ---------------------------------------------------------------


@dataclass
class ProfileRun:
    users: list[FactorProfile]
    items: list[FactorProfile]
    backend_calls: int = 0
    est_tokens: int = 0
    prompts: int = 0
    stats: dict = field(default_factory=dict)


def build_profiles(reviews: list[Review], split, factor_set: FactorSet, backend,
                   cache: ResponseCache | None = None, *, seed: int = 0, n_max: int = 100,
                   noise_ratio: float = 0.0, workers: int = 4,
                   template: str = DEFAULT_TEMPLATE) -> ProfileRun:
    """Profiles for every user and item from reviews of TRAIN interactions.

    Noise is injected on the user side only. Items without training reviews get
    an all-"unknown" profile and cost no backend call.
    """
    id_map = split.id_map
    train = set(split.train)
    by_user: dict[int, list[Review]] = defaultdict(list)
    by_item: dict[int, list[Review]] = defaultdict(list)
    for r in reviews:
        u, i = id_map.users.get(r.user_id), id_map.items.get(r.item_id)
        if (u, i) in train:
            by_user[u].append(r)
            by_item[i].append(r)
    everything = [r for u in sorted(by_user) for r in by_user[u]]
    cfg = backend.config
    max_tokens = cfg.max_prompt_tokens

    jobs = []  # (kind, index, reviews used)
    for u in range(split.num_users):
        own = sample_user_reviews(by_user.get(u, []), n_max, seed, u)
        if noise_ratio > 0 and own:
            pool = [r for r in everything if r.user_id != own[0].user_id]
            own = inject_noise(own, pool, noise_ratio, seed, u)
        jobs.append(("user", u, own))
    for i in range(split.num_items):
        jobs.append(("item", i, sample_item_reviews(by_item.get(i, []), n_max)))

    calls_before = backend.calls
    tokens = 0
    tok_lock = threading.Lock()

    def run(job):
        nonlocal tokens
        kind, idx, revs = job
        ratio = noise_ratio if kind == "user" else 0.0
        prov = tuple(r.review_id for r in revs)
        if not revs:
            return FactorProfile(kind, idx, (UNKNOWN,) * factor_set.M, (), ratio)
        subsets = [factor_set.subset(m) for m in range(factor_set.M)] \
            if cfg.per_factor_prompts else [factor_set]
        parts = []
        for fs in subsets:
            prompt = build_prompt(fs, revs, kind, template, max_tokens)
            with tok_lock:
                tokens += len(prompt) // 4
            parts.extend(_ask(backend, prompt, fs, cache))
        return FactorProfile(kind, idx, tuple(parts), prov, ratio)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        profiles = list(pool.map(run, jobs))
    calls = backend.calls - calls_before
    users = [p for p in profiles if p.entity_kind == "user"]
    items = [p for p in profiles if p.entity_kind == "item"]
    return ProfileRun(users, items, calls, tokens, len(jobs))
