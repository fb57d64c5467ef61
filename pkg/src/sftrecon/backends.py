"""Clients for text-generation endpoints.

Two remote wire protocols are supported: the de-facto chat-completions
JSON protocol (messages array in, choices array out) and a raw-completions
variant (prompt string in). A deterministic in-process mock backend covers
offline runs and tests. Every backend shares the same bounded-concurrency,
retry and rate-limit machinery, so callers can fan requests out without
managing any of that themselves.

One Backend instance corresponds to one ModelSpec and may be shared freely
across worker threads; all mutable state (rate-limiter window, in-flight
slots) is synchronized internally.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import httpx

from .errors import ConfigError, SftReconError

log = logging.getLogger(__name__)

Message = dict
Prompt = Union[str, list]  # plain text, or a chat messages list

CHAT_COMPLETIONS = "chat-completions"
RAW_COMPLETIONS = "raw-completions"
MOCK = "mock"
ENDPOINT_KINDS = (CHAT_COMPLETIONS, RAW_COMPLETIONS, MOCK)

FINISH_STOP = "stop"
FINISH_LENGTH = "length"
FINISH_ERROR = "error"

# error_kind values on GenerationResult; AuthError is raised instead because
# it is a configuration problem, not a per-request outcome.
ERR_EXHAUSTED_RETRIES = "exhausted-retries"
ERR_MALFORMED_RESPONSE = "malformed-response"
ERR_HTTP_STATUS = "http-status"
ERR_AUTH = "auth-failure"
ERR_BACKEND = "backend"


class BackendError(SftReconError):
    """Unrecoverable backend failure (configuration or protocol misuse)."""


class AuthError(BackendError):
    """Credentials could not be resolved; raised before any network call."""


@dataclass
class ModelSpec:
    """One generation endpoint and its operating limits."""

    model_id: str
    endpoint_kind: str
    endpoint_address: str
    template_family: str = "generic"
    credential_ref: str | None = None
    max_concurrent: int = 4
    requests_per_minute: int | None = None

    def validate(self) -> None:
        if not self.model_id:
            raise ConfigError("model_id must be non-empty")
        if self.endpoint_kind not in ENDPOINT_KINDS:
            raise ConfigError(
                f"endpoint_kind {self.endpoint_kind!r} for {self.model_id!r} "
                f"must be one of {ENDPOINT_KINDS}"
            )
        if not self.endpoint_address:
            raise ConfigError(f"endpoint_address missing for {self.model_id!r}")
        if self.max_concurrent < 1:
            raise ConfigError(f"max_concurrent must be >= 1 for {self.model_id!r}")
        if self.requests_per_minute is not None and self.requests_per_minute < 1:
            raise ConfigError(f"requests_per_minute must be >= 1 for {self.model_id!r}")


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.9
    max_new_tokens: int = 1024
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None  # honored only by the mock backend

    def validate(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")


# Defaults per call site. The elicitation profile runs hotter to sample the
# instruction prior more broadly; judging runs at the most deterministic
# setting the endpoint offers.
RESPONSE_SAMPLING = SamplingParams(temperature=0.7, top_p=0.9, max_new_tokens=1024)
ELICIT_SAMPLING = SamplingParams(temperature=1.0, top_p=0.99, max_new_tokens=256)
JUDGE_SAMPLING = SamplingParams(temperature=0.0, top_p=1.0, max_new_tokens=512)


@dataclass
class GenerationResult:
    text: str
    finish_reason: str
    latency_ms: int = 0
    attempt_count: int = 1
    error_kind: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.finish_reason != FINISH_ERROR


@dataclass
class RetryPolicy:
    """Jittered exponential backoff for transient failures.

    With jitter < backoff_factor - 1 the delay sequence is strictly
    increasing until max_delay_ms caps it.
    """

    max_attempts: int = 5
    base_delay_ms: float = 500.0
    backoff_factor: float = 2.0
    max_delay_ms: float = 30_000.0
    jitter: float = 0.25
    retryable_statuses: frozenset = field(
        default_factory=lambda: frozenset({429, 500, 502, 503, 504})
    )

    def delay_ms(self, attempt: int, rng: random.Random) -> float:
        """Delay before retry number `attempt` (0-based after first failure)."""
        base = self.base_delay_ms * (self.backoff_factor ** attempt)
        return min(base * (1.0 + rng.random() * self.jitter), self.max_delay_ms)


class RateLimiter:
    """Sliding-window limiter: at most `per_minute` acquisitions in any 60 s window."""

    WINDOW_S = 60.0

    def __init__(
        self,
        per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        if per_minute < 1:
            raise ValueError("per_minute must be >= 1")
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleeper
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and self._stamps[0] <= now - self.WINDOW_S:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + self.WINDOW_S - now
            self._sleep(max(wait, 0.001))


class Backend:
    """Base class: per-spec concurrency gate, retry loop, batch fan-out."""

    def __init__(self, spec: ModelSpec, retry: RetryPolicy | None = None):
        spec.validate()
        self.spec = spec
        self.retry = retry or RetryPolicy()
        self._slots = threading.BoundedSemaphore(spec.max_concurrent)
        self._limiter = (
            RateLimiter(spec.requests_per_minute) if spec.requests_per_minute else None
        )
        self._jitter_rng = random.Random(0x5F7EC0)
        self._sleep = time.sleep

    def generate(self, prompt: Prompt, params: SamplingParams) -> GenerationResult:
        """One completion. Transient failures are retried; the final failure
        is surfaced as a finish_reason="error" result, never an exception."""
        params.validate()
        with self._slots:
            return self._generate(prompt, params)

    def generate_many(
        self,
        prompts: Sequence[Prompt],
        params: SamplingParams | Sequence[SamplingParams],
    ) -> list[GenerationResult]:
        """Concurrent batch; results align index-for-index with `prompts`.

        `params` is either one SamplingParams shared by all requests or a
        sequence aligned with `prompts` (used to give each request its own
        seed). In-flight requests never exceed spec.max_concurrent.
        """
        if not prompts:
            return []
        if isinstance(params, SamplingParams):
            param_list = [params] * len(prompts)
        else:
            param_list = list(params)
            if len(param_list) != len(prompts):
                raise BackendError(
                    f"params list length {len(param_list)} != prompts length {len(prompts)}"
                )
        workers = min(self.spec.max_concurrent, len(prompts))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(self.generate, prompt, p)
                for prompt, p in zip(prompts, param_list)
            ]
            return [f.result() for f in futures]

    def _generate(self, prompt: Prompt, params: SamplingParams) -> GenerationResult:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _error_result(kind: str, detail: str, attempts: int, latency_ms: int) -> GenerationResult:
    return GenerationResult(
        text="",
        finish_reason=FINISH_ERROR,
        latency_ms=latency_ms,
        attempt_count=attempts,
        error_kind=kind,
        error=detail,
    )


class HttpBackend(Backend):
    """Client for chat-completions and raw-completions JSON endpoints."""

    def __init__(
        self,
        spec: ModelSpec,
        retry: RetryPolicy | None = None,
        timeout_s: float = 120.0,
    ):
        super().__init__(spec, retry)
        if spec.endpoint_kind not in (CHAT_COMPLETIONS, RAW_COMPLETIONS):
            raise BackendError(f"HttpBackend cannot serve endpoint kind {spec.endpoint_kind!r}")
        self._client = httpx.Client(timeout=timeout_s)

    def close(self) -> None:
        self._client.close()

    def _auth_headers(self) -> dict:
        if not self.spec.credential_ref:
            return {}
        secret = os.environ.get(self.spec.credential_ref)
        if not secret:
            raise AuthError(
                f"credential env var {self.spec.credential_ref!r} is not set "
                f"for model {self.spec.model_id!r}"
            )
        return {"Authorization": f"Bearer {secret}"}

    def _payload(self, prompt: Prompt, params: SamplingParams) -> dict:
        payload = {
            "model": self.spec.model_id,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        if params.seed is not None:
            payload["seed"] = params.seed
        if self.spec.endpoint_kind == CHAT_COMPLETIONS:
            if isinstance(prompt, str):
                payload["messages"] = [{"role": "user", "content": prompt}]
            else:
                payload["messages"] = prompt
        else:
            if not isinstance(prompt, str):
                raise BackendError(
                    f"{self.spec.model_id!r} is a raw-completions endpoint and "
                    "requires a text prompt; render messages through a chat template first"
                )
            payload["prompt"] = prompt
        return payload

    def _parse(self, data: dict) -> tuple[str, str]:
        choice = data["choices"][0]
        if self.spec.endpoint_kind == CHAT_COMPLETIONS:
            text = choice["message"]["content"]
        else:
            text = choice["text"]
        if not isinstance(text, str):
            raise KeyError("completion text is not a string")
        finish = choice.get("finish_reason", FINISH_STOP)
        return text, FINISH_LENGTH if finish == "length" else FINISH_STOP

    def _generate(self, prompt: Prompt, params: SamplingParams) -> GenerationResult:
        headers = self._auth_headers()  # fail before any network call
        payload = self._payload(prompt, params)
        started = time.monotonic()
        last_failure = "no attempt made"

        for attempt in range(1, self.retry.max_attempts + 1):
            if self._limiter:
                self._limiter.acquire()
            elapsed_ms = lambda: int((time.monotonic() - started) * 1000)  # noqa: E731
            try:
                response = self._client.post(
                    self.spec.endpoint_address, json=payload, headers=headers
                )
            except httpx.TimeoutException as exc:
                last_failure = f"timeout: {exc}"
            except httpx.TransportError as exc:
                last_failure = f"transport: {exc}"
            else:
                if response.status_code == 200:
                    try:
                        text, finish = self._parse(response.json())
                    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                        return _error_result(
                            ERR_MALFORMED_RESPONSE,
                            f"endpoint returned unusable body: {exc}",
                            attempt,
                            elapsed_ms(),
                        )
                    return GenerationResult(
                        text=text,
                        finish_reason=finish,
                        latency_ms=elapsed_ms(),
                        attempt_count=attempt,
                    )
                if response.status_code in (401, 403):
                    return _error_result(
                        ERR_AUTH,
                        f"endpoint rejected credentials (HTTP {response.status_code})",
                        attempt,
                        elapsed_ms(),
                    )
                if response.status_code not in self.retry.retryable_statuses:
                    return _error_result(
                        ERR_HTTP_STATUS,
                        f"non-retryable HTTP {response.status_code}",
                        attempt,
                        elapsed_ms(),
                    )
                last_failure = f"HTTP {response.status_code}"

            if attempt < self.retry.max_attempts:
                delay = self.retry.delay_ms(attempt - 1, self._jitter_rng) / 1000.0
                log.debug(
                    "%s: attempt %d failed (%s); retrying in %.2fs",
                    self.spec.model_id, attempt, last_failure, delay,
                )
                self._sleep(delay)

        return _error_result(
            ERR_EXHAUSTED_RETRIES,
            f"gave up after {self.retry.max_attempts} attempts; last failure: {last_failure}",
            self.retry.max_attempts,
            int((time.monotonic() - started) * 1000),
        )


def make_backend(spec: ModelSpec, retry: RetryPolicy | None = None, **kwargs) -> Backend:
    """Construct the backend matching spec.endpoint_kind."""
    if spec.endpoint_kind == MOCK:
        from .mock import MockBackend

        return MockBackend(spec, retry, **kwargs)
    return HttpBackend(spec, retry, **kwargs)


def generate(
    spec: ModelSpec, prompt: Prompt, params: SamplingParams, retry: RetryPolicy | None = None
) -> GenerationResult:
    """One-off completion against a spec; prefer holding a Backend for batches."""
    with make_backend(spec, retry) as backend:
        return backend.generate(prompt, params)


def generate_many(
    spec: ModelSpec,
    prompts: Sequence[Prompt],
    params: SamplingParams | Sequence[SamplingParams],
    retry: RetryPolicy | None = None,
) -> list[GenerationResult]:
    """One-off ordered batch against a spec."""
    with make_backend(spec, retry) as backend:
        return backend.generate_many(prompts, params)


def with_seed(params: SamplingParams, seed: int) -> SamplingParams:
    return replace(params, seed=seed)
