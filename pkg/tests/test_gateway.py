"""Gateway: cache keys, record/replay, scripted and live backends."""

import json
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chartforge.errors import BackendError, CacheMissError, ConfigError
from chartforge.gateway import (
    ChatRequest,
    LiveBackend,
    LlmGateway,
    ScriptedBackend,
    cache_key,
)


def make_request(**kwargs):
    defaults = dict(system_text="sys", user_text="hello", temperature=0.7,
                    max_tokens=64, model_id="gpt-4")
    defaults.update(kwargs)
    return ChatRequest(**defaults)


class TestCacheKey:
    def test_identical_requests_identical_digests(self):
        assert cache_key(make_request()) == cache_key(make_request())

    def test_trailing_newline_normalized(self):
        assert cache_key(make_request(user_text="hello\n")) == cache_key(
            make_request(user_text="hello")
        )
        assert cache_key(make_request(user_text="a\r\nb")) == cache_key(
            make_request(user_text="a\nb")
        )

    def test_temperature_changes_digest(self):
        assert cache_key(make_request(temperature=0.0)) != cache_key(
            make_request(temperature=0.7)
        )

    def test_swapped_system_user_distinct(self):
        a = cache_key(make_request(system_text="one", user_text="two"))
        b = cache_key(make_request(system_text="two", user_text="one"))
        assert a != b

    def test_digest_is_256_bit_hex(self):
        digest = cache_key(make_request())
        assert len(digest) == 64
        int(digest, 16)

    @given(user=st.text(min_size=1), system=st.text())
    def test_pure_function_of_fields(self, user, system):
        first = cache_key(make_request(system_text=system, user_text=user))
        second = cache_key(make_request(system_text=system, user_text=user))
        assert first == second


class TestRequestValidation:
    def test_empty_user_text_rejected(self):
        with pytest.raises(ValueError):
            make_request(user_text="")

    def test_temperature_bounds(self):
        with pytest.raises(ValueError):
            make_request(temperature=2.5)


class TestReplay:
    def test_recorded_response_returned_byte_identical(self, tmp_path):
        request = make_request()
        scripted = LlmGateway(
            mode="scripted",
            cache_dir=tmp_path,
            scripted=ScriptedBackend(script=["resp-éxact\n"]),
        )
        recorded = scripted.complete(request)
        replay = LlmGateway(mode="replay", cache_dir=tmp_path)
        replayed = replay.complete(request)
        assert replayed.response_text == recorded.response_text
        assert replayed.backend == "replay"

    def test_unseen_request_raises_cache_miss_with_digest(self, tmp_path):
        gateway = LlmGateway(mode="replay", cache_dir=tmp_path)
        request = make_request(user_text="never recorded")
        with pytest.raises(CacheMissError) as err:
            gateway.complete(request)
        assert cache_key(request) in str(err.value)

    def test_cache_layout_two_hex_prefix(self, tmp_path):
        request = make_request()
        gateway = LlmGateway(
            mode="scripted", cache_dir=tmp_path, scripted=ScriptedBackend(script=["x"])
        )
        gateway.complete(request)
        digest = cache_key(request)
        assert (tmp_path / digest[:2] / f"{digest}.json").exists()

    def test_replay_needs_cache_dir(self):
        with pytest.raises(ConfigError):
            LlmGateway(mode="replay")


class TestScripted:
    def test_sequential_responses(self):
        backend = ScriptedBackend(script=["one", "two"])
        gateway = LlmGateway(mode="scripted", scripted=backend)
        assert gateway.complete(make_request()).response_text == "one"
        assert gateway.complete(make_request()).response_text == "two"
        with pytest.raises(BackendError):
            gateway.complete(make_request())

    def test_responder_function(self):
        backend = ScriptedBackend(responder=lambda req: req.user_text.upper())
        gateway = LlmGateway(mode="scripted", scripted=backend)
        assert gateway.complete(make_request(user_text="abc")).response_text == "ABC"


class TestRateLimiter:
    def test_window_blocks_burst(self):
        import time

        from chartforge.gateway import RateLimiter

        limiter = RateLimiter(requests_per_minute=0)  # disabled: never blocks
        limiter.acquire()

        limiter = RateLimiter(requests_per_minute=100)
        started = time.monotonic()
        for _ in range(50):
            limiter.acquire()
        assert time.monotonic() - started < 1.0

    def test_thread_safety(self):
        from chartforge.gateway import RateLimiter

        limiter = RateLimiter(requests_per_minute=10_000)
        with ThreadPoolExecutor(max_workers=16) as pool:
            list(pool.map(lambda _: limiter.acquire(), range(500)))
        assert len(limiter._stamps) == 500


class TestConcurrency:
    def test_concurrent_same_request_single_entry(self, tmp_path):
        request = make_request()
        backend = ScriptedBackend(responder=lambda req: "same answer")
        gateway = LlmGateway(mode="scripted", cache_dir=tmp_path, scripted=backend)
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: gateway.complete(request), range(32)))
        files = list(tmp_path.rglob("*.json"))
        assert len(files) == 1
        payload = json.loads(files[0].read_text())
        assert payload["response_text"] == "same answer"


def mock_transport(handler):
    return httpx.MockTransport(handler)


def openai_response(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


class TestLiveBackend:
    def make_live(self, handler, **kwargs):
        return LiveBackend(
            base_url="https://llm.test/v1",
            api_key="sk-secret-XYZ",
            transport=mock_transport(handler),
            backoff_s=0.01,
            **kwargs,
        )

    def test_happy_path(self):
        live = self.make_live(lambda req: openai_response("hi there"))
        assert live.complete_text(make_request()) == "hi there"

    def test_retry_then_success(self):
        calls = []

        def handler(req):
            calls.append(req)
            if len(calls) < 3:
                return httpx.Response(500, text="boom")
            return openai_response("recovered")

        live = self.make_live(handler)
        assert live.complete_text(make_request()) == "recovered"
        assert len(calls) == 3

    def test_exhausted_retries_raise_backend_error(self):
        live = self.make_live(lambda req: httpx.Response(500, text="down"))
        with pytest.raises(BackendError) as err:
            live.complete_text(make_request())
        assert err.value.status_code == 500

    def test_rate_limit_honored_via_backoff(self):
        calls = []

        def handler(req):
            calls.append(req)
            if len(calls) == 1:
                return httpx.Response(429, headers={"retry-after": "0.01"}, text="slow")
            return openai_response("after 429")

        live = self.make_live(handler)
        assert live.complete_text(make_request()) == "after 429"

    def test_missing_credentials_rejected(self, monkeypatch):
        monkeypatch.delenv("CHARTFORGE_LLM_API_KEY", raising=False)
        with pytest.raises(ConfigError):
            LiveBackend(base_url="https://llm.test")

    def test_cache_never_stores_credentials(self, tmp_path):
        live = self.make_live(lambda req: openai_response("clean"))
        gateway = LlmGateway(mode="live", cache_dir=tmp_path, live=live)
        gateway.complete(make_request())
        for path in tmp_path.rglob("*.json"):
            assert "sk-secret-XYZ" not in path.read_text()
