"""Text-completion endpoint client with retries and an in-flight limit.

Wire contract (provider-agnostic, OpenAI-completions shaped)::

    POST {base_url}/completions
    {"model": ..., "prompt": ..., "temperature": ..., "max_tokens": ..., "n": ..., "stop": [...]}
    -> {"choices": [{"text": ...}, ...]}

The API key, if any, is read from the environment variable named by
``api_key_env`` and sent as a bearer token.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import httpx

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class HandlerError(RuntimeError):
    """A model call failed for good (after retries) or returned unusable output."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class LmEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "google/flan-t5-xl"
    max_new_tokens: int = 64
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    max_in_flight: int = 8
    api_key_env: str = "PROGFC_API_KEY"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must lie in [0, 1]")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    def backoff(self, attempt: int) -> float:
        if not self.retry_backoff:
            return 0.0
        return self.retry_backoff[min(attempt, len(self.retry_backoff) - 1)]

    @classmethod
    def from_section(cls, section) -> LmEndpointConfig:
        """Build from a configparser section (or any str->str mapping)."""
        kw: dict = {}
        if "base_url" in section:
            kw["base_url"] = section["base_url"]
        if "model" in section:
            kw["model_name"] = section["model"]
        for key, conv in (("max_new_tokens", int), ("max_retries", int), ("max_in_flight", int),
                          ("temperature", float), ("timeout", float)):
            if key in section:
                kw[key] = conv(section[key])
        if "stop" in section:
            kw["stop_sequences"] = tuple(
                s.encode().decode("unicode_escape") for s in _split_list(section["stop"])
            )
        if "retry_backoff" in section:
            kw["retry_backoff"] = tuple(float(x) for x in _split_list(section["retry_backoff"]))
        if "api_key_env" in section:
            kw["api_key_env"] = section["api_key_env"]
        return cls(**kw)


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class LmClient:
    """Thread-safe completion client; at most ``max_in_flight`` concurrent requests."""

    config: LmEndpointConfig
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = time.sleep
    concurrent_safe: bool = field(default=True, init=False)

    def __post_init__(self):
        headers = {}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=self.config.base_url,
            timeout=self.config.timeout,
            transport=self.transport,
            headers=headers,
        )
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)

    def close(self) -> None:
        self._http.close()

    def complete(
        self,
        prompt: str,
        n: int = 1,
        *,
        temperature: float | None = None,
        max_tokens: int | None = None,
        stop: Sequence[str] | None = None,
    ) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        cfg = self.config
        payload = {
            "model": cfg.model_name,
            "prompt": prompt,
            "temperature": cfg.temperature if temperature is None else temperature,
            "max_tokens": cfg.max_new_tokens if max_tokens is None else max_tokens,
            "n": n,
            "stop": list(cfg.stop_sequences if stop is None else stop),
        }
        last_error = "no attempt made"
        last_status = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self.sleep(cfg.backoff(attempt - 1))
            try:
                with self._slots:
                    resp = self._http.post("/completions", json=payload)
            except httpx.TransportError as exc:
                last_error, last_status = f"transport error: {exc!r}", None
                log.warning("completion attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error, last_status = f"HTTP {resp.status_code}", resp.status_code
                log.warning("completion attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code >= 400:
                raise HandlerError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
            return _parse_choices(resp, n)
        raise HandlerError(
            f"completion failed after {cfg.max_retries + 1} attempts: {last_error}", last_status
        )


def _parse_choices(resp: httpx.Response, n: int) -> list[str]:
    try:
        choices = resp.json()["choices"]
        texts = [str(c["text"]) for c in choices]
    except (ValueError, KeyError, TypeError) as exc:
        raise HandlerError(f"malformed completion response: {exc!r}", resp.status_code) from None
    if len(texts) != n:
        raise HandlerError(f"expected {n} choices, got {len(texts)}", resp.status_code)
    return texts


def complete(config: LmEndpointConfig, prompt: str, n: int = 1, **kw) -> list[str]:
    """One-shot convenience wrapper around :class:`LmClient`."""
    client = LmClient(config, **kw)
    try:
        return client.complete(prompt, n)
    finally:
        client.close()
