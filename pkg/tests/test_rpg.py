import json
import logging

import httpx
import pytest

from reform.dataset import Review, split_interactions
from reform.rpg import (RESTAURANT_FACTORS, UNKNOWN, BackendError, FactorSet, HttpChatLlm,
                        LlmBackendConfig, MockLlm, ResponseCache, build_profiles, build_prompt,
                        generate_profile, inject_noise, parse_response, prompt_reviews,
                        read_profiles, sample_item_reviews, sample_user_reviews, write_profiles)

FS = RESTAURANT_FACTORS


def reviews_of(user, n, start=0, text="Loved the spicy greek plates, cozy room."):
    return [Review(user, f"i{k}", f"{text} #{k}", None, k, start + k) for k in range(n)]


class TestFactorSet:
    def test_restaurant_factors(self):
        assert FS.names == ("cuisine type", "flavor", "atmosphere", "price", "time", "waiting",
                            "companion")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            FactorSet((), ())

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            FactorSet(("a", "a"), ("x", "y"))

    def test_json_round_trip(self, tmp_path):
        p = tmp_path / "f.json"
        p.write_text(json.dumps(FS.to_json()))
        assert FactorSet.load(p) == FS


class TestSampling:
    def test_fewer_than_cap(self):
        rs = reviews_of("u", 30)
        assert sample_user_reviews(rs, 100, seed=1) == rs

    def test_cap(self):
        rs = reviews_of("u", 250)
        got = sample_user_reviews(rs, 100, seed=1)
        assert len(got) == 100 and len({r.review_id for r in got}) == 100

    def test_seeded(self):
        rs = reviews_of("u", 250)
        assert sample_user_reviews(rs, 100, seed=7, entity=3) == \
            sample_user_reviews(rs, 100, seed=7, entity=3)

    def test_item_longest_first(self):
        rs = [Review("a", "i", "x" * n, None, None, k) for k, n in enumerate((5, 300, 40))]
        assert [len(r.text) for r in sample_item_reviews(rs, 2)] == [300, 40]

    def test_item_single(self):
        r = Review("a", "i", "hello", None, None, 0)
        assert sample_item_reviews([r]) == [r]

    def test_item_tie_by_review_id(self):
        rs = [Review("a", "i", "same", None, None, 9), Review("b", "i", "same", None, None, 2)]
        assert [r.review_id for r in sample_item_reviews(rs, 2)] == [2, 9]


class TestNoise:
    def test_zero_is_identity(self):
        own = reviews_of("u", 6)
        assert inject_noise(own, reviews_of("v", 10, 100), 0.0) == own

    def test_full_replaces_everything(self):
        own = reviews_of("u", 6)
        out = inject_noise(own, reviews_of("v", 10, 100), 1.0, seed=2)
        assert len(out) == 6 and not set(out) & set(own)

    def test_half_of_ten(self):
        own = reviews_of("u", 10)
        out = inject_noise(own, reviews_of("v", 20, 100), 0.5, seed=3)
        assert sum(r in own for r in out) == 5

    def test_small_pool_samples_with_replacement(self, caplog):
        own = reviews_of("u", 5)
        with caplog.at_level(logging.WARNING):
            out = inject_noise(own, reviews_of("v", 2, 100), 1.0)
        assert all(r.user_id == "v" for r in out)
        assert "with replacement" in caplog.text

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            inject_noise([], [], 1.5)


class TestPrompt:
    def test_contains_factors_in_order(self):
        p = build_prompt(FS, reviews_of("u", 3), "user")
        pos = [p.index(f'"{n}"') for n in FS.names]
        assert pos == sorted(pos)

    def test_deterministic(self):
        rs = reviews_of("u", 3)
        assert build_prompt(FS, rs, "item") == build_prompt(FS, rs, "item")

    def test_reviews_recoverable(self):
        rs = reviews_of("u", 4)
        assert prompt_reviews(build_prompt(FS, rs, "user")) == [r.text for r in rs]

    def test_truncates_from_the_end(self):
        rs = reviews_of("u", 50)
        p = build_prompt(FS, rs, "user", max_tokens=400)
        kept = prompt_reviews(p)
        assert 0 < len(kept) < 50 and kept == [r.text for r in rs[:len(kept)]]

    def test_needs_reviews(self):
        with pytest.raises(ValueError):
            build_prompt(FS, [], "user")


class TestParse:
    def test_fenced_json(self):
        body = {n: n.upper() for n in FS.names}
        out = parse_response("```json\n" + json.dumps(body) + "\n```", FS)
        assert out == tuple(n.upper() for n in FS.names)

    def test_missing_key_gets_sentinel(self, caplog):
        body = {n: "x" for n in FS.names if n != "waiting"}
        with caplog.at_level(logging.WARNING):
            out = parse_response(json.dumps(body), FS)
        assert out[FS.index("waiting")] == UNKNOWN
        assert "waiting" in caplog.text

    def test_key_normalisation(self):
        body = {"Cuisine_Type": "thai", "FLAVOR": ["spicy", "sour"]}
        out = parse_response(json.dumps(body), FS)
        assert out[:2] == ("thai", "spicy, sour")

    def test_garbage(self):
        with pytest.raises(ValueError):
            parse_response("no idea", FS)


class TestMockAndCache:
    def test_mock_deterministic_profile(self):
        be = MockLlm(LlmBackendConfig(), FS)
        prompt = build_prompt(FS, reviews_of("u", 5), "user")
        a = generate_profile(be, prompt, FS)
        b = generate_profile(be, prompt, FS)
        assert a == b and len(a.factors) == 7
        assert a.factors[0] == "cuisine type: greek"
        assert a.factors[FS.index("price")] == UNKNOWN

    def test_cache_hit_skips_backend(self, tmp_path):
        be = MockLlm(LlmBackendConfig(), FS)
        cache = ResponseCache(tmp_path / "c.jsonl")
        prompt = build_prompt(FS, reviews_of("u", 5), "user")
        generate_profile(be, prompt, FS, cache)
        generate_profile(be, prompt, FS, cache)
        assert be.calls == 1
        reloaded = ResponseCache(tmp_path / "c.jsonl")
        be2 = MockLlm(LlmBackendConfig(), FS)
        generate_profile(be2, prompt, FS, reloaded)
        assert be2.calls == 0

    def test_repair_then_fail(self):
        class Bad:
            config = LlmBackendConfig()
            calls = 0

            def complete(self, prompt):
                self.calls += 1
                return "sorry"
        be = Bad()
        with pytest.raises(BackendError):
            generate_profile(be, "p", FS)
        assert be.calls == 2


def _chat(content):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


class TestHttpChat:
    def cfg(self, **kw):
        return LlmBackendConfig(kind="http_chat", endpoint="http://llm.test/v1/chat", **kw)

    def test_retries_on_429_then_succeeds(self):
        seen = []

        def handler(req):
            seen.append(json.loads(req.content))
            return httpx.Response(429) if len(seen) < 3 else _chat('{"flavor": "sweet"}')
        sleeps = []
        be = HttpChatLlm(self.cfg(backoff_base=0.5), httpx.Client(transport=httpx.MockTransport(handler)),
                         sleep=sleeps.append)
        out = parse_response(be.complete("hi"), FS)
        assert out[1] == "sweet"
        assert sleeps == [0.5, 1.0]
        assert seen[0]["temperature"] == 0.0 and seen[0]["messages"][0]["content"] == "hi"

    def test_gives_up(self):
        client = httpx.Client(transport=httpx.MockTransport(lambda req: httpx.Response(503)))
        be = HttpChatLlm(self.cfg(max_retries=2), client, sleep=lambda s: None)
        with pytest.raises(BackendError):
            be.complete("hi")
        assert be.calls == 3

    def test_client_error_is_fatal_immediately(self):
        client = httpx.Client(transport=httpx.MockTransport(lambda req: httpx.Response(401)))
        be = HttpChatLlm(self.cfg(), client, sleep=lambda s: None)
        with pytest.raises(BackendError):
            be.complete("hi")
        assert be.calls == 1

    def test_api_key_header(self, monkeypatch):
        monkeypatch.setenv("REFORM_TEST_KEY", "sekret")
        got = {}

        def handler(req):
            got["auth"] = req.headers.get("authorization")
            return _chat("{}")
        be = HttpChatLlm(self.cfg(api_key_env="REFORM_TEST_KEY"),
                         httpx.Client(transport=httpx.MockTransport(handler)))
        be.complete("x")
        assert got["auth"] == "Bearer sekret"


class TestBuildProfiles:
    def corpus(self):
        words = ["greek spicy", "italian sweet", "thai sour"]
        rs = []
        for u in range(6):
            for i in range(5):
                rs.append(Review(f"u{u}", f"i{i}", f"{words[(u + i) % 3]} food, cozy room",
                                 None, None, len(rs)))
        return rs

    def test_shapes_and_determinism(self, tmp_path):
        rs = self.corpus()
        split = split_interactions(rs, seed=0)
        runs = [build_profiles(rs, split, FS, MockLlm(LlmBackendConfig(), FS), seed=0, workers=w)
                for w in (1, 4)]
        for run in runs:
            assert len(run.users) == split.num_users and len(run.items) == split.num_items
            assert all(len(p.factors) == FS.M for p in run.users + run.items)
        assert runs[0].users == runs[1].users and runs[0].items == runs[1].items
        write_profiles(tmp_path / "p.jsonl", runs[0].users + runs[0].items, FS)
        assert read_profiles(tmp_path / "p.jsonl", FS) == (runs[0].users, runs[0].items)

    def test_only_train_reviews_used(self):
        rs = self.corpus()
        split = split_interactions(rs, seed=0)
        run = build_profiles(rs, split, FS, MockLlm(LlmBackendConfig(), FS), seed=0)
        by_id = {r.review_id: r for r in rs}
        train = set(split.train)
        for p in run.users + run.items:
            for rid in p.provenance:
                r = by_id[rid]
                pair = (split.id_map.users[r.user_id], split.id_map.items[r.item_id])
                assert pair in train

    def test_noise_only_on_user_side(self):
        rs = self.corpus()
        split = split_interactions(rs, seed=0)
        run = build_profiles(rs, split, FS, MockLlm(LlmBackendConfig(), FS), seed=0,
                             noise_ratio=0.5)
        assert all(p.noise_ratio == 0.5 for p in run.users)
        assert all(p.noise_ratio == 0.0 for p in run.items)

    def test_cache_one_call_per_prompt_under_threads(self):
        rs = self.corpus()
        split = split_interactions(rs, seed=0)
        cache = ResponseCache()
        be = MockLlm(LlmBackendConfig(), FS)
        run = build_profiles(rs, split, FS, be, cache, seed=0, workers=8)
        assert be.calls == len(cache) <= run.prompts
        again = build_profiles(rs, split, FS, be, cache, seed=0, workers=8)
        assert again.backend_calls == 0
