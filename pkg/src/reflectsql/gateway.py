"""Chat-completion access with deterministic decoding and three backends.

``HttpBackend`` speaks the OpenAI-compatible wire protocol, ``ReplayBackend``
serves responses out of a recorded cassette, and ``ScriptedBackend`` returns
canned responses keyed by ``(stage_tag, example_id, version)`` so whole runs can
be exercised offline. ``Gateway`` wraps any backend with optional recording and
call counting.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Union

import httpx

from .errors import CassetteConflict, CassetteMiss, ScriptedExhausted, TransportError

logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("stage1", "stage2", "plan", "sql")
STAGE_TAGS = PIPELINE_STAGES + ("critic", "refiner", "judge", "summarizer")

DEFAULT_MAX_TOKENS = {
    "stage1": 512,
    "stage2": 512,
    "plan": 1024,
    "sql": 512,
    "critic": 768,
    "refiner": 2048,
    "judge": 512,
    "summarizer": 128,
}

API_KEY_ENV = "REFLECTSQL_API_KEY"


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ModelRequest:
    stage_tag: str
    system_text: str
    user_text: str
    decoding: Decoding = None  # type: ignore[assignment]
    # Routing metadata for the scripted backend; never part of the fingerprint.
    example_id: str | None = field(default=None, compare=False)
    version: int | None = field(default=None, compare=False)
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.stage_tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.stage_tag!r}")
        if self.decoding is None:
            object.__setattr__(self, "decoding", Decoding(max_tokens=DEFAULT_MAX_TOKENS[self.stage_tag]))

    def with_user_suffix(self, suffix: str) -> "ModelRequest":
        return ModelRequest(
            stage_tag=self.stage_tag,
            system_text=self.system_text,
            user_text=f"{self.user_text}\n\n{suffix}" if self.user_text else suffix,
            decoding=self.decoding,
            example_id=self.example_id,
            version=self.version,
            meta=self.meta,
        )


@dataclass(frozen=True)
class ModelResponse:
    text: str
    latency_ms: int
    backend: str


def fingerprint(request: ModelRequest) -> str:
    """SHA-256 over a canonical JSON rendering of the request content."""
    payload = {
        "stage_tag": request.stage_tag,
        "system_text": request.system_text,
        "user_text": request.user_text,
        "decoding": {
            "temperature": float(request.decoding.temperature),
            "max_tokens": int(request.decoding.max_tokens),
        },
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Cassette:
    """Fingerprint -> response text store, persisted as a JSON array."""

    def __init__(self, entries: dict[str, tuple[str, str]] | None = None):
        # fingerprint -> (stage_tag, response_text)
        self._entries: dict[str, tuple[str, str]] = dict(entries or {})
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, fp: str) -> bool:
        return fp in self._entries

    def lookup(self, fp: str) -> str | None:
        entry = self._entries.get(fp)
        return None if entry is None else entry[1]

    def record(self, request: ModelRequest, response: ModelResponse | str) -> "Cassette":
        text = response.text if isinstance(response, ModelResponse) else response
        fp = fingerprint(request)
        with self._lock:
            existing = self._entries.get(fp)
            if existing is not None:
                if existing[1] != text:
                    raise CassetteConflict(fp)
                return self
            self._entries[fp] = (request.stage_tag, text)
        return self

    def to_list(self) -> list[dict[str, str]]:
        return [
            {"fingerprint": fp, "stage_tag": stage, "response_text": text}
            for fp, (stage, text) in sorted(self._entries.items())
        ]

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_list(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Cassette":
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(rows, list):
            raise ValueError(f"{path}: cassette must be a JSON array")
        entries = {}
        for row in rows:
            entries[row["fingerprint"]] = (row.get("stage_tag", ""), row["response_text"])
        return cls(entries)


class Backend(Protocol):
    name: str

    def complete(self, request: ModelRequest) -> ModelResponse: ...


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` client.

    Only transport failures (connection errors, HTTP 429 and 5xx) are retried;
    a well-formed response is returned as-is whatever its content.
    """

    name = "http"

    def __init__(
        self,
        model: str,
        base_url: str = "https://api.openai.com/v1",
        api_key: str | None = None,
        max_retries: int = 3,
        backoff: tuple[float, ...] = (1.0, 2.0, 4.0),
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not model:
            raise ValueError("http backend requires a model name")
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise ValueError(f"http backend requires credentials in ${API_KEY_ENV}")
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def _payload(self, request: ModelRequest) -> dict:
        messages = [{"role": "system", "content": request.system_text}]
        if request.user_text:
            messages.append({"role": "user", "content": request.user_text})
        return {
            "model": self.model,
            "messages": messages,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }

    def complete(self, request: ModelRequest) -> ModelResponse:
        url = f"{self.base_url}/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"}
        payload = self._payload(request)
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff[min(attempt - 1, len(self.backoff) - 1)]
                logger.warning("retrying %s call in %.1fs (%s)", request.stage_tag, delay, last_error)
                self._sleep(delay)
            start = time.monotonic()
            try:
                resp = self._client.post(url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code}")
                continue
            resp.raise_for_status()
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
            return ModelResponse(text=text, latency_ms=int((time.monotonic() - start) * 1000), backend=self.name)
        raise TransportError(f"{request.stage_tag}: gave up after {self.max_retries + 1} attempts: {last_error}")


class ReplayBackend:
    name = "replay"

    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def complete(self, request: ModelRequest) -> ModelResponse:
        fp = fingerprint(request)
        text = self.cassette.lookup(fp)
        if text is None:
            raise CassetteMiss(fp, request.stage_tag)
        return ModelResponse(text=text, latency_ms=0, backend=self.name)


ScriptValue = Union[str, list, Callable[[ModelRequest], str]]


class ScriptedBackend:
    """Canned responses keyed by ``(stage_tag, example_id, version)``.

    Lookup falls back from the full key to ``(stage_tag, example_id)`` and then
    ``(stage_tag,)``. A string value answers every call; a list is consumed one
    element per call and raises ``ScriptedExhausted`` once empty; a callable
    receives the request.
    """

    name = "scripted"

    def __init__(self, script: Mapping[tuple, ScriptValue] | None = None):
        self._script: dict[tuple, ScriptValue] = {}
        self._lock = threading.Lock()
        for key, value in (script or {}).items():
            self.add(key, value)

    def add(self, key: tuple | str, value: ScriptValue) -> None:
        if isinstance(key, str):
            key = (key,)
        key = tuple(key)
        if isinstance(value, list):
            value = list(value)
        with self._lock:
            self._script[key] = value

    def _candidates(self, request: ModelRequest):
        tag, ex, ver = request.stage_tag, request.example_id, request.version
        yield (tag, ex, ver)
        yield (tag, ex)
        yield (tag, None, ver)
        yield (tag,)

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            for key in self._candidates(request):
                if key not in self._script:
                    continue
                value = self._script[key]
                if isinstance(value, list):
                    if not value:
                        raise ScriptedExhausted(key)
                    value = value.pop(0)
                text = value(request) if callable(value) else value
                return ModelResponse(text=text, latency_ms=0, backend=self.name)
        raise ScriptedExhausted((request.stage_tag, request.example_id, request.version))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedBackend":
        """Load a JSON script.

        Format: ``{"responses": [{"stage": ..., "example_id": ..., "version": ...,
        "text": ... | "texts": [...] | "append": ...}]}``. ``append`` is for the
        refiner: the new prompt is the original prompt plus the appended text.
        """
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        backend = cls()
        for row in doc.get("responses", []):
            key: tuple = (row["stage"],)
            if "example_id" in row or "version" in row:
                key = (row["stage"], _opt_str(row.get("example_id")), row.get("version"))
                if row.get("version") is None:
                    key = key[:2]
            if "text" in row:
                value: ScriptValue = row["text"]
            elif "texts" in row:
                value = list(row["texts"])
            elif "append" in row:
                value = _appending_refiner(row["append"], row.get("explanation", "scripted revision"))
            else:
                raise ValueError(f"{path}: script row needs text, texts or append: {row}")
            backend.add(key, value)
        return backend


def _opt_str(value) -> str | None:
    return None if value is None else str(value)


def _appending_refiner(addition: str, explanation: str) -> Callable[[ModelRequest], str]:
    def respond(request: ModelRequest) -> str:
        original = request.meta.get("original_prompt", "")
        return json.dumps({"new_prompt": f"{original}\n{addition}", "explanation": explanation})

    return respond


class Gateway:
    """Front door for all model calls: counts calls and optionally records them."""

    def __init__(self, backend: Backend, cassette: Cassette | None = None):
        self.backend = backend
        self.cassette = cassette
        self.calls: Counter[str] = Counter()
        self.log: list[ModelRequest] = []
        self._lock = threading.Lock()

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def reset_counts(self) -> None:
        with self._lock:
            self.calls.clear()
            self.log.clear()

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            self.calls[request.stage_tag] += 1
            self.log.append(request)
        response = self.backend.complete(request)
        if self.cassette is not None:
            self.cassette.record(request, response)
        return response
