"""Chat-completion client with retries, a concurrency bound, and a record/replay cache."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class GenerationParams:
    """Sampling settings sent with every request.

    The defaults are the extraction settings used throughout: low temperature
    keeps the JSON output stable while top-p sampling retains some diversity.
    """

    temperature: float = 0.2
    top_p: float = 0.95
    max_new_tokens: int = 256
    repetition_penalty: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")
        if self.repetition_penalty <= 0:
            raise ValueError("repetition_penalty must be positive")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "repetition_penalty": self.repetition_penalty,
        }


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    auth_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    backoff_base: float = 0.5

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    prompt_hash: str
    latency_ms: float
    from_cache: bool


class TransportFailure(Exception):
    """All retry attempts failed; attempts holds one line per failure."""

    def __init__(self, message: str, attempts: list[str]):
        super().__init__(f"{message} (attempts: {'; '.join(attempts)})")
        self.attempts = attempts


class CacheMiss(Exception):
    pass


def prompt_hash(prompt: str, params: GenerationParams, model_name: str) -> str:
    """Stable digest of (prompt, params, model); canonical JSON keeps it platform-independent."""
    payload = json.dumps(
        {"model": model_name, "params": params.to_dict(), "prompt": prompt},
        sort_keys=True,
        ensure_ascii=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CompletionCache:
    """Append-only JSONL cache of completions keyed by prompt hash.

    Reads are lock-free after load; appends are serialized and flushed so a
    crashed run loses at most the entry being written. A single run owns one
    cache file.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._entries[entry["prompt_hash"]] = entry["text"]

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def put(self, key: str, model: str, params: GenerationParams, text: str) -> None:
        record = {
            "prompt_hash": key,
            "model": model,
            "params": params.to_dict(),
            "text": text,
        }
        with self._lock:
            self._entries[key] = text
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                fh.flush()

    def __len__(self) -> int:
        return len(self._entries)


class LLMClient:
    """Thread-safe client for a chat-completion endpoint.

    Modes:
      - no cache: every call hits the network.
      - record (cache_path set): cache hits are served locally, misses hit
        the network and are persisted, so reruns never repay for a prompt.
      - replay (replay=True): served only from cache; a miss raises
        CacheMiss and the network is never touched.

    In-flight requests never exceed max_concurrency regardless of how many
    threads share the client.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        cache_path: str | Path | None = None,
        replay: bool = False,
    ):
        if replay and cache_path is None:
            raise ValueError("replay mode requires a cache path")
        self.cfg = cfg
        self.replay = replay
        self.cache = CompletionCache(cache_path) if cache_path is not None else None
        self._semaphore = threading.BoundedSemaphore(cfg.max_concurrency)
        self._http: httpx.Client | None = None
        self._http_lock = threading.Lock()
        # assume the endpoint accepts repetition_penalty until a 400 says otherwise
        self._send_repetition_penalty = True

    def _client(self) -> httpx.Client:
        with self._http_lock:
            if self._http is None:
                headers = {}
                if self.cfg.auth_env:
                    token = os.environ.get(self.cfg.auth_env)
                    if token:
                        headers["Authorization"] = f"Bearer {token}"
                self._http = httpx.Client(
                    base_url=self.cfg.base_url,
                    headers=headers,
                    timeout=self.cfg.timeout,
                )
            return self._http

    def close(self) -> None:
        with self._http_lock:
            if self._http is not None:
                self._http.close()
                self._http = None

    def __enter__(self) -> "LLMClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _payload(self, prompt: str, params: GenerationParams) -> dict:
        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
        }
        if self._send_repetition_penalty:
            payload["repetition_penalty"] = params.repetition_penalty
        return payload

    def _request(self, prompt: str, params: GenerationParams) -> str:
        attempts: list[str] = []
        for attempt in range(self.cfg.max_retries + 1):
            if attempt > 0:
                time.sleep(self.cfg.backoff_base * 2 ** (attempt - 1))
            try:
                with self._semaphore:
                    response = self._client().post("/v1/chat/completions", json=self._payload(prompt, params))
            except httpx.HTTPError as exc:
                attempts.append(f"#{attempt + 1} {type(exc).__name__}: {exc}")
                continue
            if response.status_code == 200:
                body = response.json()
                return body["choices"][0]["message"]["content"]
            if (
                response.status_code == 400
                and self._send_repetition_penalty
                and params.repetition_penalty == 1.0
            ):
                # endpoint rejects unknown fields; the neutral penalty can be dropped
                self._send_repetition_penalty = False
                attempts.append(f"#{attempt + 1} HTTP 400, retrying without repetition_penalty")
                continue
            if response.status_code in RETRYABLE_STATUSES:
                attempts.append(f"#{attempt + 1} HTTP {response.status_code}")
                continue
            raise TransportFailure(
                f"endpoint returned HTTP {response.status_code}",
                attempts + [f"#{attempt + 1} HTTP {response.status_code}"],
            )
        raise TransportFailure("retries exhausted", attempts)

    def complete(self, prompt: str, params: GenerationParams | None = None) -> GenerationResult:
        params = params or GenerationParams()
        key = prompt_hash(prompt, params, self.cfg.model_name)
        started = time.perf_counter()
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                return GenerationResult(
                    text=cached,
                    prompt_hash=key,
                    latency_ms=(time.perf_counter() - started) * 1000,
                    from_cache=True,
                )
        if self.replay:
            raise CacheMiss(f"no cached completion for hash {key}")
        text = self._request(prompt, params)
        if self.cache is not None:
            self.cache.put(key, self.cfg.model_name, params, text)
        return GenerationResult(
            text=text,
            prompt_hash=key,
            latency_ms=(time.perf_counter() - started) * 1000,
            from_cache=False,
        )


def complete(prompt: str, params: GenerationParams, cfg: EndpointConfig) -> GenerationResult:
    """One-shot completion without sharing a client."""
    with LLMClient(cfg) as client:
        return client.complete(prompt, params)
