"""Chat-completion backends: live HTTP, replay, scripted, and a disk cache.

Every backend exposes ``name``, ``model`` and ``complete(request) -> str``.
Requests are identified by a SHA-256 digest over model, temperature,
max_tokens and the message list, which keys both the replay transcript and
the on-disk cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import httpx

from .errors import BackendError, CacheError, ConfigError, TranscriptMiss, TransportError

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
STAGES = ("candidates", "summarize", "validity", "ranking", "baseline")

DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_EMBED_ENDPOINT = "https://api.openai.com/v1/embeddings"
DEFAULT_API_KEY_ENV = "OPENAI_API_KEY"


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for role, content in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            if not isinstance(content, str):
                raise TypeError("message content must be a string")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def user(cls, model: str, prompt: str, temperature: float = 0.0, max_tokens: int | None = None):
        return cls(model, (("user", prompt),), temperature, max_tokens)

    @property
    def digest(self) -> str:
        return request_digest(self)

    @property
    def prompt_echo(self) -> str:
        return "\n\n".join(content for _, content in self.messages)

    def wire(self) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
        }
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        return body


def request_digest(request: ChatRequest) -> str:
    canonical = json.dumps(
        {
            "model": request.model,
            "temperature": float(request.temperature),
            "max_tokens": request.max_tokens,
            "messages": [[r, c] for r, c in request.messages],
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -- transcripts -----------------------------------------------------------


@dataclass
class Transcript:
    """Exact digest -> response table, optionally with a prompt echo per entry."""

    entries: dict[str, str] = field(default_factory=dict)
    prompts: dict[str, str] = field(default_factory=dict)

    def add(self, request: ChatRequest, response: str) -> None:
        self.entries[request.digest] = response
        self.prompts[request.digest] = request.prompt_echo

    def lookup(self, request: ChatRequest) -> str:
        digest = request.digest
        try:
            return self.entries[digest]
        except KeyError:
            raise TranscriptMiss(digest, request.prompt_echo) from None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self.entries

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for digest in sorted(self.entries):
                record = {"digest": digest, "prompt_echo": self.prompts.get(digest, ""), "response": self.entries[digest]}
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load(cls, *paths: str | Path) -> "Transcript":
        """Load transcript records; run-trace files are accepted too.

        A transcript line is ``{"digest", "prompt_echo", "response"}``. A trace
        line carries a ``calls`` list of such records and contributes each.
        """
        transcript = cls()
        for path in paths:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise ConfigError(f"{path}:{lineno}: malformed transcript line") from exc
                    for entry in record.get("calls", [record]):
                        if "digest" not in entry or "response" not in entry:
                            continue
                        transcript.entries[entry["digest"]] = entry["response"]
                        transcript.prompts[entry["digest"]] = entry.get("prompt_echo", entry.get("prompt", ""))
        return transcript


# -- backends --------------------------------------------------------------


class ReplayBackend:
    """Serves recorded responses; unknown requests raise :class:`TranscriptMiss`."""

    def __init__(self, transcript: Transcript, model: str = DEFAULT_MODEL, name: str = "replay",
                 max_tokens: int | None = None):
        self.transcript = transcript
        self.model = model
        self.name = name
        self.max_tokens = max_tokens

    def complete(self, request: ChatRequest) -> str:
        return self.transcript.lookup(request)


class ScriptedBackend:
    """Backend whose response is ``fn(request)``; handy for tests and dry runs.

    A plain string is accepted as a constant function.
    """

    def __init__(self, fn: Callable[[ChatRequest], str] | str, model: str = "scripted", name: str = "scripted",
                 max_tokens: int | None = None):
        if isinstance(fn, str):
            constant = fn
            fn = lambda request: constant  # noqa: E731
        self.fn = fn
        self.model = model
        self.name = name
        self.max_tokens = max_tokens
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls.append(request)
        return self.fn(request)


_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HTTPBackend:
    """Chat-completions client over HTTP with bounded retries.

    Posts ``model/messages/temperature/max_tokens`` to ``endpoint`` with a
    bearer token read from ``api_key_env``. Transient failures (connection
    errors, 408/429/5xx) are retried ``retries`` times in total with
    exponential backoff starting at ``backoff`` seconds.
    """

    def __init__(
        self,
        model: str = DEFAULT_MODEL,
        endpoint: str = DEFAULT_ENDPOINT,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        name: str = "http",
        max_tokens: int | None = None,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        max_concurrency: int = 8,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        require_key: bool = True,
    ):
        api_key = os.environ.get(api_key_env, "")
        if require_key and not api_key:
            raise ConfigError(f"live backend {name!r} needs an API key in ${api_key_env}")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.model = model
        self.endpoint = endpoint
        self.name = name
        self.max_tokens = max_tokens
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def _post(self, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=body)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise TransportError(f"{self.name}: response is not JSON") from exc
                if resp.status_code not in _TRANSIENT_STATUS:
                    raise TransportError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:300]}")
                last = TransportError(f"HTTP {resp.status_code}")
            if attempt < self.retries - 1:
                delay = self.backoff * 2**attempt
                logger.warning("%s: transient failure (%s), retrying in %.1fs", self.name, last, delay)
                self._sleep(delay)
        raise TransportError(f"{self.name}: failed after {self.retries} attempts: {last}") from last

    def complete(self, request: ChatRequest) -> str:
        data = self._post(request.wire())
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.name}: unexpected response shape") from exc
        return content if content is not None else ""

    def close(self) -> None:
        self._client.close()


class ResponseCache:
    """One file per request digest; writes are atomic (temp file + rename)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CacheError(f"cannot create cache directory {self.directory}: {exc}") from exc

    def path(self, digest: str) -> Path:
        return self.directory / digest[:2] / f"{digest}.txt"

    def get(self, digest: str) -> str | None:
        path = self.path(digest)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise CacheError(f"cannot read cache entry {path}: {exc}") from exc
        return data.decode("utf-8")

    def put(self, digest: str, response: str) -> None:
        path = self.path(digest)
        try:
            path.parent.mkdir(exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(response.encode("utf-8"))
                os.replace(tmp, path)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        except OSError as exc:
            raise CacheError(f"cannot write cache entry {path}: {exc}") from exc


class CachedBackend:
    """Wraps a backend with a :class:`ResponseCache`.

    ``inner`` may be ``None`` when every request is expected to hit the cache;
    a miss then raises :class:`BackendError`.
    """

    def __init__(self, inner, cache: ResponseCache, model: str | None = None, name: str | None = None):
        self.inner = inner
        self.cache = cache
        self.model = model or getattr(inner, "model", DEFAULT_MODEL)
        self.name = name or getattr(inner, "name", "cached")
        self.max_tokens = getattr(inner, "max_tokens", None)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        return cached_complete(self, request)


def cached_complete(backend: CachedBackend, request: ChatRequest) -> str:
    digest = request.digest
    stored = backend.cache.get(digest)
    if stored is not None:
        with backend._lock:
            backend.hits += 1
        return stored
    if backend.inner is None:
        raise BackendError(f"cache miss for digest {digest} and no backend configured")
    response = backend.inner.complete(request)
    backend.cache.put(digest, response)
    with backend._lock:
        backend.misses += 1
    return response


def complete(backend, request: ChatRequest) -> str:
    return backend.complete(request)


# -- embeddings ------------------------------------------------------------


def embedding_digest(model: str, text: str) -> str:
    canonical = json.dumps({"model": model, "input": text}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class HTTPEmbeddingBackend(HTTPBackend):
    """Embeddings endpoint speaking the same wire conventions as chat."""

    def __init__(self, model: str = "text-embedding-3-small", endpoint: str = DEFAULT_EMBED_ENDPOINT, **kwargs):
        kwargs.setdefault("name", "http-embed")
        super().__init__(model=model, endpoint=endpoint, **kwargs)

    def embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post({"model": self.model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda row: row["index"])
            return [list(map(float, row["embedding"])) for row in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError(f"{self.name}: unexpected embeddings response shape") from exc


class ReplayEmbeddingBackend:
    """Recorded embeddings keyed by ``embedding_digest(model, text)``."""

    def __init__(self, table: Mapping[str, list[float]], model: str = "replay-embed", name: str = "replay-embed"):
        self.table = dict(table)
        self.model = model
        self.name = name

    @classmethod
    def from_texts(cls, vectors: Mapping[str, list[float]], model: str = "replay-embed"):
        return cls({embedding_digest(model, t): v for t, v in vectors.items()}, model)

    @classmethod
    def load(cls, path: str | Path, model: str = "replay-embed") -> "ReplayEmbeddingBackend":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    table[rec["digest"]] = rec["embedding"]
        return cls(table, model)

    def embed(self, texts: list[str]) -> list[list[float]]:
        out = []
        for text in texts:
            digest = embedding_digest(self.model, text)
            if digest not in self.table:
                raise TranscriptMiss(digest, text)
            out.append(self.table[digest])
        return out


# -- per-stage resolution --------------------------------------------------


def stage_backends(config: Mapping) -> dict[str, object]:
    """Resolve a backend for every pipeline stage.

    ``config`` has ``backends`` (name -> backend object), ``default`` (a
    name) and optional ``stages`` (stage -> name). Stages without an entry
    inherit the default backend, which lets e.g. candidate generation and
    summarization run on one model and verification on another.
    """
    backends = config.get("backends", {})
    default = config.get("default")
    if default is not None and default not in backends:
        raise ConfigError(f"unknown default backend {default!r}; known: {sorted(backends)}")
    overrides = dict(config.get("stages", {}))
    bad = [s for s in overrides if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stage(s) {bad}; valid stages: {list(STAGES)}")
    resolved = {}
    for stage in STAGES:
        name = overrides.get(stage, default)
        if name is None:
            raise ConfigError(f"no backend for stage {stage!r} and no default backend")
        if name not in backends:
            raise ConfigError(f"stage {stage!r}: unknown backend {name!r}; known: {sorted(backends)}")
        resolved[stage] = backends[name]
    return resolved


def parse_stage_assignments(items: Iterable[str]) -> dict[str, str]:
    """Parse ``stage=name`` strings from the command line."""
    out = {}
    for item in items:
        stage, sep, name = item.partition("=")
        if not sep or not stage or not name:
            raise ConfigError(f"expected stage=backend, got {item!r}")
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; valid stages: {list(STAGES)}")
        out[stage] = name
    return out
