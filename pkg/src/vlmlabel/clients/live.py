"""HTTP adapter for chat-completion style endpoints, with cassette record/replay.

Cassette format (JSON)::

    {"version": 1, "entries": {"<sha256 of request body>": "<raw model text>", ...}}

The key hashes the exact JSON body sent to the endpoint (model, temperature,
messages including inline images), so a replay only hits when the request is
byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import httpx

from ..errors import ClientUnavailable, ConfigError
from .base import Attachment, PerceptionClient, PerceptionRequest, feedback_text

SYSTEM_PROMPT = (
    "You are a careful annotation assistant for animal behavior experiments. "
    "Always answer with a single JSON object matching the requested format."
)
CASSETTE_MODES = ("off", "record", "replay", "auto")


@dataclass(frozen=True)
class LiveConfig:
    endpoint: str
    model: str
    api_key_env: str = "VLMLABEL_API_KEY"
    timeout: float = 120.0
    temperature: float = 0.0
    max_tokens: int = 2048
    transport_retries: int = 2
    max_concurrency: int = 4
    rate_per_second: float = 2.0
    burst: int = 4
    cassette: str | None = None
    cassette_mode: str = "off"

    def __post_init__(self) -> None:
        if self.cassette_mode not in CASSETTE_MODES:
            raise ConfigError(f"cassette_mode must be one of {CASSETTE_MODES}", key="cassette_mode")
        if self.cassette_mode != "off" and not self.cassette:
            raise ConfigError("cassette path required when cassette_mode is set", key="cassette")
        if self.max_concurrency < 1 or self.rate_per_second <= 0 or self.burst < 1:
            raise ConfigError("rate limit settings must be positive", key="max_concurrency")


class TokenBucket:
    def __init__(self, rate: float, burst: int, clock=time.monotonic, sleep=time.sleep) -> None:
        self.rate = rate
        self.capacity = float(burst)
        self.tokens = float(burst)
        self._clock, self._sleep = clock, sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self._sleep(wait)


class Cassette:
    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self.entries: dict[str, str] = {}
        if self.path.exists():
            doc = json.loads(self.path.read_text())
            if doc.get("version") != 1:
                raise ConfigError(f"unsupported cassette version in {self.path}", key="cassette")
            self.entries = dict(doc["entries"])

    @staticmethod
    def key(body: dict[str, Any]) -> str:
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def get(self, key: str) -> str | None:
        with self._lock:
            return self.entries.get(key)

    def put(self, key: str, raw: str) -> None:
        with self._lock:
            self.entries[key] = raw
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text(json.dumps({"version": 1, "entries": self.entries}, indent=1, sort_keys=True))
            tmp.replace(self.path)


def _image_part(att: Attachment) -> dict[str, Any]:
    from ..pose.render import render_attachment

    if not Path(att.ref).is_file():
        raise ConfigError(f"attachment {att.ref!r} is not a readable image file", key="images")
    data = base64.b64encode(render_attachment(att)).decode()
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}}


class LiveClient(PerceptionClient):
    """OpenAI-compatible ``/chat/completions`` client.

    The auth token is read from the environment variable named in the config.
    ``transport`` lets tests inject an ``httpx`` mock transport.
    """

    def __init__(self, config: LiveConfig, transport: httpx.BaseTransport | None = None) -> None:
        super().__init__()
        self.config = config
        token = os.environ.get(config.api_key_env, "")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._bucket = TokenBucket(config.rate_per_second, config.burst)
        self.cassette = Cassette(config.cassette) if config.cassette_mode != "off" else None

    def build_body(self, request: PerceptionRequest, feedback: Sequence[str]) -> dict[str, Any]:
        text = request.prompt + feedback_text(feedback)
        content: list[dict[str, Any]] = [{"type": "text", "text": text}]
        for att in request.attachments:
            if att.caption:
                content.append({"type": "text", "text": att.caption})
            content.append(_image_part(att))
        return {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": content if request.attachments else text},
            ],
        }

    def complete(self, request: PerceptionRequest, feedback: Sequence[str]) -> str:
        body = self.build_body(request, feedback)
        key = Cassette.key(body)
        mode = self.config.cassette_mode
        if self.cassette is not None and mode in ("replay", "auto"):
            hit = self.cassette.get(key)
            if hit is not None:
                return hit
            if mode == "replay":
                raise ClientUnavailable(f"cassette miss for {request.task} request {key[:12]}")
        raw = self._post(body)
        if self.cassette is not None and mode in ("record", "auto"):
            self.cassette.put(key, raw)
        return raw

    def _post(self, body: dict[str, Any]) -> str:
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        last = ""
        for attempt in range(self.config.transport_retries + 1):
            self._bucket.acquire()
            try:
                with self._slots:
                    resp = self._http.post(url, json=body)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise ClientUnavailable(f"malformed completion envelope: {exc}", raw_text=resp.text) from exc
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code < 500 and resp.status_code != 429:
                    break
            if attempt < self.config.transport_retries:
                time.sleep(min(2.0**attempt, 10.0) * 0.1)
        raise ClientUnavailable(f"endpoint unavailable: {last}", raw_text=last)

    def close(self) -> None:
        self._http.close()
