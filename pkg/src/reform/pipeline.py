"""Reviews -> split, graph, profiles and encoded profile store, in one call."""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import Review, build_graph, k_core_filter, split_interactions
from .encoder import Encoder, EncoderProvider, encode_profiles
from .rpg import FactorSet, LlmBackendConfig, ProfileRun, ResponseCache, build_profiles, make_backend
from .trainer import TrainData


@dataclass
class Prepared:
    data: TrainData
    profiles: ProfileRun
    reviews: list[Review]


def prepare(reviews: list[Review], factor_set: FactorSet, *, seed: int = 0, k_core: int = 3,
            noise_ratio: float = 0.0, llm: LlmBackendConfig | None = None,
            encoder: EncoderProvider | None = None, cache: ResponseCache | None = None,
            n_max: int = 100, workers: int = 1, backend=None) -> Prepared:
    kept = k_core_filter(reviews, k_core)
    split = split_interactions(kept, seed=seed)
    graph = build_graph(split)
    if backend is None:
        backend = make_backend(llm or LlmBackendConfig(), factor_set)
    run = build_profiles(kept, split, factor_set, backend, cache, seed=seed, n_max=n_max,
                         noise_ratio=noise_ratio, workers=workers)
    store = encode_profiles(Encoder(encoder or EncoderProvider()), run.users, run.items)
    return Prepared(TrainData(split, graph, store), run, kept)
