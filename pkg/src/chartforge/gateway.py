"""Chat-completion gateway with a deterministic record/replay cache.

Every pipeline stage talks to the model through this one interface, so a
run can be recorded once against a live backend and replayed bit-for-bit
offline. Cache keys are pure functions of the request; the cache stores
request and response text only, never credentials.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import httpx

from .errors import BackendError, CacheMissError, ConfigError

log = logging.getLogger(__name__)

BASE_URL_ENV = "CHARTFORGE_LLM_BASE_URL"
API_KEY_ENV = "CHARTFORGE_LLM_API_KEY"

DEFAULT_GENERATION_TEMPERATURE = 0.7  # diversity for the generation stages
DEFAULT_EVAL_TEMPERATURE = 0.0  # scoring stability for rubric evaluation
DEFAULT_MAX_TOKENS = 2048


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = DEFAULT_GENERATION_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    model_id: str = "gpt-4"

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatExchange:
    request: ChatRequest
    response_text: str
    backend: str  # live | replay | scripted
    cache_key: str


def _normalize_text(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n").rstrip("\n")


def cache_key(request: ChatRequest) -> str:
    """256-bit hex digest of the canonicalized request.

    Stable across platforms: fields are sorted, line endings normalized,
    and trailing newlines stripped before hashing.
    """
    canonical = json.dumps(
        {
            "max_tokens": request.max_tokens,
            "model_id": request.model_id,
            "system_text": _normalize_text(request.system_text),
            "temperature": request.temperature,
            "user_text": _normalize_text(request.user_text),
        },
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ExchangeCache:
    """One JSON file per exchange under ``<dir>/<first 2 hex>/<digest>.json``."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)

    def path_for(self, digest: str) -> Path:
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def load(self, digest: str) -> str | None:
        path = self.path_for(digest)
        if not path.exists():
            return None
        payload = json.loads(path.read_text(encoding="utf-8"))
        return payload["response_text"]

    def store(self, exchange: ChatExchange) -> None:
        """Atomic write: temp file then rename, so concurrent writers of the
        same request leave exactly one well-formed entry."""
        path = self.path_for(exchange.cache_key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "cache_key": exchange.cache_key,
            "backend": exchange.backend,
            "request": {
                "system_text": exchange.request.system_text,
                "user_text": exchange.request.user_text,
                "temperature": exchange.request.temperature,
                "max_tokens": exchange.request.max_tokens,
                "model_id": exchange.request.model_id,
            },
            "response_text": exchange.response_text,
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(payload, f, ensure_ascii=False, indent=1)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


class RateLimiter:
    """Token bucket over a sliding one-minute window; thread-safe."""

    def __init__(self, requests_per_minute: int):
        self.requests_per_minute = requests_per_minute
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.requests_per_minute <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.requests_per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            time.sleep(max(wait, 0.01))


class LiveBackend:
    """OpenAI-compatible chat-completions HTTP backend with bounded retries."""

    name = "live"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        requests_per_minute: int = 60,
        transport: httpx.BaseTransport | None = None,
        timeout_s: float = 120.0,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.base_url:
            raise ConfigError(
                f"live backend needs a base URL ({BASE_URL_ENV} or --base-url)"
            )
        if not self.api_key:
            raise ConfigError(f"live backend needs credentials in {API_KEY_ENV}")
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.limiter = RateLimiter(requests_per_minute)
        self._client = httpx.Client(
            transport=transport,
            timeout=timeout_s,
            headers={"Authorization": f"Bearer {self.api_key}"},
        )

    def complete_text(self, request: ChatRequest) -> str:
        body = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last_error: str = "no attempts made"
        last_status: int | None = None
        for attempt in range(self.max_retries):
            self.limiter.acquire()
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=body)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                time.sleep(self.backoff_s * 2**attempt)
                continue
            if resp.status_code == 200:
                data = resp.json()
                return data["choices"][0]["message"]["content"]
            last_status = resp.status_code
            last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
            if resp.status_code == 429:
                retry_after = resp.headers.get("retry-after")
                delay = float(retry_after) if retry_after else self.backoff_s * 2**attempt
                time.sleep(delay)
            elif 500 <= resp.status_code < 600:
                time.sleep(self.backoff_s * 2**attempt)
            else:
                break  # 4xx other than 429 will not improve on retry
        raise BackendError(
            f"chat completion failed after {self.max_retries} attempt(s): {last_error}",
            status_code=last_status,
        )


class ScriptedBackend:
    """Test backend: replays a fixed response sequence or a responder function."""

    name = "scripted"

    def __init__(
        self,
        script: Iterable[str] | None = None,
        responder: Callable[[ChatRequest], str] | None = None,
    ):
        if (script is None) == (responder is None):
            raise ConfigError("scripted backend needs a script or a responder")
        self._script = deque(script) if script is not None else None
        self._responder = responder
        self._lock = threading.Lock()

    def complete_text(self, request: ChatRequest) -> str:
        if self._responder is not None:
            return self._responder(request)
        with self._lock:
            if not self._script:
                raise BackendError("scripted backend ran out of canned responses")
            return self._script.popleft()


class LlmGateway:
    """Uniform completion interface over live, replay, and scripted modes.

    Shareable across workers: the cache write path is atomic and the live
    path is serialized through the rate limiter.
    """

    def __init__(
        self,
        mode: str,
        cache_dir: str | Path | None = None,
        live: LiveBackend | None = None,
        scripted: ScriptedBackend | None = None,
        record: bool = True,
    ):
        if mode not in ("live", "replay", "scripted"):
            raise ConfigError(f"unknown backend mode {mode!r}")
        if mode == "replay" and cache_dir is None:
            raise ConfigError("replay mode needs a cache directory")
        self.mode = mode
        self.cache = ExchangeCache(cache_dir) if cache_dir is not None else None
        self.record = record
        if mode == "live":
            self._live = live or LiveBackend()
        if mode == "scripted":
            if scripted is None:
                raise ConfigError("scripted mode needs a ScriptedBackend")
            self._scripted = scripted

    def complete(self, request: ChatRequest) -> ChatExchange:
        digest = cache_key(request)
        if self.mode == "replay":
            cached = self.cache.load(digest)
            if cached is None:
                raise CacheMissError(digest)
            return ChatExchange(request, cached, "replay", digest)

        backend = self._scripted if self.mode == "scripted" else self._live
        text = backend.complete_text(request)
        exchange = ChatExchange(request, text, backend.name, digest)
        if self.cache is not None and self.record:
            self.cache.store(exchange)
        return exchange
