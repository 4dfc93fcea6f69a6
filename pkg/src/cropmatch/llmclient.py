"""Judge / victim model client with content-addressed caching and replay.

Modes:

* ``live``   -- serve from cache when possible, otherwise call upstream and cache.
* ``record`` -- same as live, but a cache directory is mandatory (fixture capture).
* ``replay`` -- cache only; a miss raises :class:`CacheMiss` and nothing is sent.

The cache is a directory of JSON envelopes, one file per request digest.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

DEFAULT_CAPTION_PROMPT = "Describe this image."
MODES = ("live", "record", "replay")


class JudgeError(RuntimeError):
    pass


class CacheMiss(JudgeError):
    pass


class TransportError(JudgeError):
    """Upstream failure that may succeed on retry."""


class RateLimitTimeout(JudgeError):
    pass


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def request_digest(model: str, prompt: str, image_digest: str | None = None, attempt: int = 0) -> str:
    key = {"model": model, "prompt": prompt, "image": image_digest}
    if attempt:
        key["attempt"] = attempt
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 1.0


@dataclass(frozen=True)
class CaptionRequest:
    image: Path
    prompt: str = DEFAULT_CAPTION_PROMPT
    model: str | None = None


class RateLimiter:
    """At most ``limit`` acquisitions in any ``window``-second span."""

    def __init__(self, limit: int, window: float = 60.0, clock=time.monotonic, sleep=time.sleep):
        if limit < 1:
            raise ValueError("rate limit must be at least 1 request per window")
        self.limit, self.window = limit, window
        self.clock, self.sleep = clock, sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self, timeout: float | None = None) -> None:
        waited = 0.0
        while True:
            with self._lock:
                now = self.clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + self.window - now
            if timeout is not None and waited + wait > timeout:
                raise RateLimitTimeout(f"rate limit of {self.limit}/{self.window:g}s saturated")
            self.sleep(wait)
            waited += wait


class OpenAICompatibleTransport:
    """POST to an OpenAI-style ``/chat/completions`` endpoint.

    The API key is read from the environment variable named by ``api_key_env``.
    """

    def __init__(self, endpoint: str, api_key_env: str = "OPENAI_API_KEY", timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout

    def __call__(self, model: str, prompt: str, image: bytes | None = None) -> str:
        import httpx

        content: list | str = prompt
        if image is not None:
            b64 = base64.b64encode(image).decode()
            content = [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
            ]
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"model": model, "messages": [{"role": "user", "content": content}], "temperature": 0}
        try:
            r = httpx.post(f"{self.endpoint}/chat/completions", json=payload, headers=headers, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise TransportError(f"HTTP {r.status_code}: {r.text[:200]}")
        if r.status_code != 200:
            raise JudgeError(f"HTTP {r.status_code}: {r.text[:200]}")
        return r.json()["choices"][0]["message"]["content"]


@dataclass
class JudgeClient:
    model: str
    mode: str = "replay"
    cache_dir: Path | None = None
    transport: Callable[..., str] | None = None
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    rate_limit: int = 60
    clock: Callable[[], float] = time.monotonic
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.mode not in MODES:
            raise JudgeError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        if self.mode in ("record", "replay") and self.cache_dir is None:
            raise JudgeError(f"{self.mode} mode needs a cache directory")
        self.limiter = RateLimiter(self.rate_limit, 60.0, self.clock, self.sleep)
        self.upstream_calls = 0

    @classmethod
    def from_env(cls, model: str, mode: str, cache_dir, endpoint_env: str = "JUDGE_ENDPOINT", **kw):
        transport = None
        if mode != "replay":
            endpoint = os.environ.get(endpoint_env)
            if not endpoint:
                raise JudgeError(f"set {endpoint_env} to use {mode} mode")
            transport = OpenAICompatibleTransport(endpoint, timeout=kw.get("timeout", 60.0))
        return cls(model=model, mode=mode, cache_dir=cache_dir, transport=transport, **kw)

    # -- cache ------------------------------------------------------------

    def _cache_path(self, digest: str) -> Path:
        return self.cache_dir / f"{digest}.json"

    def _cache_get(self, digest: str) -> str | None:
        if self.cache_dir is None:
            return None
        path = self._cache_path(digest)
        if not path.is_file():
            return None
        return json.loads(path.read_text())["response"]

    def _cache_put(self, digest: str, prompt: str, image_digest: str | None, response: str) -> None:
        if self.cache_dir is None:
            return
        envelope = {
            "request_digest": digest,
            "model": self.model,
            "prompt": prompt,
            "image_digest": image_digest,
            "response": response,
            "timestamp": time.time(),
        }
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(envelope, fh, indent=1)
        os.replace(tmp, self._cache_path(digest))

    # -- requests ---------------------------------------------------------

    def _request(self, prompt: str, image: bytes | None, image_digest: str | None, attempt: int) -> str:
        if not prompt:
            raise JudgeError("prompt must be nonempty")
        digest = request_digest(self.model, prompt, image_digest, attempt)
        cached = self._cache_get(digest)
        if cached is not None:
            return cached
        if self.mode == "replay":
            raise CacheMiss(f"no recorded response for request {digest[:12]}")
        if self.transport is None:
            raise JudgeError("no transport configured for live requests")
        last = None
        for k in range(self.retry.max_attempts):
            self.limiter.acquire(timeout=self.timeout)
            self.upstream_calls += 1
            try:
                text = self.transport(self.model, prompt, image)
                break
            except TransportError as exc:
                last = exc
                log.warning("judge request failed (attempt %d/%d): %s", k + 1, self.retry.max_attempts, exc)
                if k + 1 < self.retry.max_attempts:
                    self.sleep(self.retry.backoff * 2 ** k)
        else:
            raise JudgeError(f"request failed after {self.retry.max_attempts} attempts: {last}")
        self._cache_put(digest, prompt, image_digest, text)
        return text

    def complete(self, prompt: str, attempt: int = 0) -> str:
        """Text completion; ``attempt > 0`` addresses a distinct re-ask of the same prompt."""
        return self._request(prompt, None, None, attempt)

    def caption(self, req: CaptionRequest, attempt: int = 0) -> str:
        path = Path(req.image)
        if not path.is_file():
            raise JudgeError(f"image not found: {path}")
        data = path.read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if req.model is not None and req.model != self.model:
            return JudgeClient(
                req.model, self.mode, self.cache_dir, self.transport, self.timeout,
                self.retry, self.rate_limit, self.clock, self.sleep,
            ).caption(CaptionRequest(path, req.prompt), attempt)
        return self._request(req.prompt, data, digest, attempt)
