"""Synthetic restaurant corpus with planted per-user factor preferences.

Each item gets one keyword value per factor. Each user gets a dominant factor
(drawn from ``dominant``) and a preferred value for it; the user's interactions
land on items carrying that value with probability ``1 - noise_rate`` and on
other items otherwise. Every interaction yields a template review that names
the item's values, so the mock LLM can recover them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Review
from .rpg import RESTAURANT_FACTORS, FactorSet
from .seeding import stream_rng

PHRASES = (
    ("The {} dishes were the reason I came.", "Loved their {} menu.", "Great {} cooking."),
    ("Everything tasted {}.", "Really {} plates.", "The sauce was {}."),
    ("The room felt {}.", "A {} spot overall.", "Pretty {} vibe."),
    ("Prices felt {}.", "The bill was {}.", "Honestly {} for what you get."),
    ("We went for {}.", "Perfect for {}.", "Stopped by at {}."),
    ("Service was {}.", "Expect it to be {}.", "Seating was {}."),
    ("Came with {}.", "Good place for {}.", "Went there with {}."),
)
FILLER = ("Would come back.", "Staff were friendly.", "Parking was easy.", "Menu is large.",
          "Nice portions.", "Clean tables.")


@dataclass
class SynthConfig:
    num_users: int = 200
    num_items: int = 300
    values_per_factor: int = 5
    interactions_per_user: float = 10.0
    noise_rate: float = 0.1
    # factor name -> probability of being a user's dominant factor
    dominant: dict = field(default_factory=lambda: {"cuisine type": 0.6, "flavor": 0.25,
                                                     "atmosphere": 0.15})
    mention_rate: float = 0.9
    seed: int = 0

    def factor_set(self) -> FactorSet:
        return RESTAURANT_FACTORS


@dataclass
class SynthData:
    reviews: list[Review]
    item_values: np.ndarray  # (items, M) value index per factor
    dominant: np.ndarray  # (users,) factor index
    preferred: np.ndarray  # (users,) value index on the dominant factor
    expected_interactions: float
    factor_set: FactorSet

    def truth_json(self) -> dict:
        fs = self.factor_set
        return {
            "factors": list(fs.names),
            "users": [{"user_id": f"u{u:04d}", "dominant": fs.names[m],
                       "value": fs.keywords[m][self.preferred[u]]}
                      for u, m in enumerate(self.dominant)],
            "items": [{"item_id": f"i{i:04d}", "values": {fs.names[m]: fs.keywords[m][v]
                                                         for m, v in enumerate(row)}}
                      for i, row in enumerate(self.item_values)],
            "expected_interactions": self.expected_interactions,
        }


def _review(rng, values, factor_set, dominant, mention_rate) -> str:
    parts = []
    for m, v in enumerate(values):
        if m == dominant or rng.random() < mention_rate:
            tmpl = PHRASES[m % len(PHRASES)][rng.integers(len(PHRASES[0]))]
            parts.append(tmpl.format(factor_set.keywords[m][v]))
    parts.append(FILLER[rng.integers(len(FILLER))])
    order = rng.permutation(len(parts))
    return " ".join(parts[k] for k in order)


def generate(cfg: SynthConfig) -> SynthData:
    fs = cfg.factor_set()
    M = fs.M
    # a factor with a short lexicon uses all of its keywords
    sizes = np.array([min(cfg.values_per_factor, len(k)) for k in fs.keywords])
    if cfg.values_per_factor < 2:
        raise ValueError("values_per_factor must be >= 2")
    rng = stream_rng(cfg.seed, "synth")
    item_values = (rng.random((cfg.num_items, M)) * sizes).astype(np.int64)
    names = list(cfg.dominant)
    probs = np.array([cfg.dominant[n] for n in names], dtype=np.float64)
    probs /= probs.sum()
    dom_idx = np.array([fs.index(n) for n in names])
    dominant = dom_idx[rng.choice(len(names), size=cfg.num_users, p=probs)]
    preferred = (rng.random(cfg.num_users) * sizes[dominant]).astype(np.int64)

    reviews: list[Review] = []
    expected = 0.0
    ts = 0
    for u in range(cfg.num_users):
        match = item_values[:, dominant[u]] == preferred[u]
        n_match, n_other = int(match.sum()), int((~match).sum())
        k = cfg.interactions_per_user
        p = np.where(match, (1 - cfg.noise_rate) * k / max(n_match, 1),
                     cfg.noise_rate * k / max(n_other, 1))
        p = np.minimum(p, 1.0)
        expected += p.sum()
        hits = np.flatnonzero(rng.random(cfg.num_items) < p)
        for i in hits:
            text = _review(rng, item_values[i], fs, dominant[u], cfg.mention_rate)
            rating = 5.0 if match[i] else 3.0
            reviews.append(Review(f"u{u:04d}", f"i{i:04d}", text, rating, ts, len(reviews)))
            ts += 1
    return SynthData(reviews, item_values, dominant, preferred, expected, fs)


def write_synth(outdir, data: SynthData, cfg: SynthConfig) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "reviews.jsonl").open("w", encoding="utf-8") as fh:
        for r in data.reviews:
            fh.write(json.dumps(r.to_json()) + "\n")
    with (out / "synth_truth.json").open("w", encoding="utf-8") as fh:
        json.dump(data.truth_json(), fh, indent=1)
    with (out / "factors.json").open("w", encoding="utf-8") as fh:
        json.dump(data.factor_set.to_json(), fh, indent=1)
    meta = {"config": asdict(cfg), "reviews": len(data.reviews),
            "expected_interactions": data.expected_interactions}
    with (out / "synth_meta.json").open("w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return meta
