"""Text-generation backends behind one ``generate`` call.

Three backend kinds are supported:

* ``http_chat``: any OpenAI-compatible ``/chat/completions`` endpoint.
* ``mock_oracle``: answers scoring and ranking prompts from qrels, used for
  desk-scale checks of the whole pipeline.
* ``mock_scripted``: returns text from a user callable or a fixed list.

Responses are cached on disk, one file per request, when ``cache_dir`` is set.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import httpx

from prefilter_rerank.core import JudgmentSet

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("http_chat", "mock_oracle", "mock_scripted")
RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class LLMError(RuntimeError):
    pass


class LLMTransportError(LLMError):
    """The endpoint could not be reached (or timed out) on every attempt."""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(message)


class LLMBackendError(LLMError):
    """The endpoint answered with a non-success status or an unusable body."""

    def __init__(self, status: Optional[int], body: str):
        self.status = status
        self.body = body[:500]
        super().__init__(f"backend returned status {status}: {self.body}")


@dataclass(frozen=True)
class GenerationRequest:
    """One prompt.

    ``context`` carries routing hints (task, query id, passage ids) that the
    mock backends use to answer without parsing prompt text. It is never sent
    over the wire and does not enter ``request_key``.
    """

    system_prompt: str
    user_prompt: str
    max_tokens: int = 1024
    temperature: float = 0.0
    # Distinguishes retries of an identical prompt so they are not served from cache.
    attempt: int = 0
    context: Mapping = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def request_key(self) -> str:
        payload = json.dumps(
            [self.system_prompt, self.user_prompt, self.max_tokens, self.temperature,
             self.attempt],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_id: str
    from_cache: bool
    latency_ms: int


@dataclass
class BackendConfig:
    kind: str = "mock_oracle"
    model_name: str = "mock"
    endpoint_url: Optional[str] = None
    timeout_s: float = 120.0
    max_retries: int = 2
    retry_backoff_s: float = 1.0
    cache_dir: Optional[str] = None
    api_key_env: str = "LLM_API_KEY"
    # mock_oracle only
    noise: float = 0.0
    seed: int = 0
    # mock_scripted only: JSON list of canned responses, replayed in order
    script_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}; choose from {BACKEND_KINDS}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.kind == "http_chat" and not self.endpoint_url:
            raise ValueError("http_chat backend needs endpoint_url")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("oracle noise must lie in [0, 0.5]")

    @property
    def backend_id(self) -> str:
        if self.kind == "mock_oracle":
            return f"mock_oracle:{self.model_name}:noise={self.noise}:seed={self.seed}"
        return f"{self.kind}:{self.model_name}"


class ResponseCache:
    """Directory holding one ``<key>.txt`` file of raw response text per request."""

    def __init__(self, directory: Union[str, os.PathLike]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.txt"

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> Optional[str]:
        try:
            return self._path(key).read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def put(self, key: str, text: str) -> None:
        with self._lock_for(key):
            target = self._path(key)
            tmp = target.with_name(f"{target.name}.{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_text(text, encoding="utf-8")
            os.replace(tmp, target)


def _format_score(value: float) -> str:
    short = f"{value:.3f}"
    return short if float(short) == value else repr(value)


def mock_oracle_score_text(
    query_id: str,
    passage_ids: Sequence[str],
    judgments: JudgmentSet,
    noise: float = 0.0,
    seed: int = 0,
    max_level: Optional[int] = None,
) -> str:
    """Emit a scoring response whose values come from the qrels.

    A judged passage scores ``level / max_level`` plus a uniform jitter in
    ``[-noise, noise]``, clamped to [0, 1]. Unjudged passages score 0. The
    jitter depends only on ``(seed, query_id, passage_id)``, so a passage gets
    the same value whatever chunk it lands in.
    """
    if not 0.0 <= noise <= 0.5:
        raise ValueError("noise must lie in [0, 0.5]")
    if max_level is None:
        max_level = max(judgments.max_level(), 1)
    lines = ["Rationale: scores are derived from the relevance judgments."]
    for i, pid in enumerate(passage_ids, start=1):
        level = judgments.level(query_id, pid)
        if level is None:
            value = 0.0
        else:
            value = level / max_level
            if noise > 0:
                rng = random.Random(f"{seed}:{query_id}:{pid}")
                value += rng.uniform(-noise, noise)
            value = min(1.0, max(0.0, value))
        lines.append(f"Passage [{i}]: {_format_score(value)}")
    return "\n".join(lines)


def oracle_permutation_text(
    query_id: str, passage_ids: Sequence[str], judgments: JudgmentSet
) -> str:
    """Order labels by judged level, highest first; ties keep window order."""
    def level(pid):
        lvl = judgments.level(query_id, pid)
        return -1 if lvl is None else lvl

    order = sorted(range(len(passage_ids)), key=lambda i: -level(passage_ids[i]))
    return " > ".join(f"[{i + 1}]" for i in order)


class HttpChatBackend:
    def __init__(self, cfg: BackendConfig, client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self._client = client or httpx.Client(timeout=cfg.timeout_s)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.api_key_env, "").strip()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, req: GenerationRequest) -> str:
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        body = {
            "model": self.cfg.model_name,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        attempts = self.cfg.max_retries + 1
        last_exc: Optional[Exception] = None
        for attempt in range(1, attempts + 1):
            try:
                resp = self._client.post(
                    self.cfg.endpoint_url, json=body, headers=self._headers()
                )
            except httpx.TransportError as exc:
                last_exc = exc
                logger.warning("attempt %d/%d to %s failed: %r",
                               attempt, attempts, self.cfg.endpoint_url, exc)
            else:
                if resp.status_code // 100 == 2:
                    return self._extract_text(resp)
                last_exc = LLMBackendError(resp.status_code, resp.text)
                if resp.status_code not in RETRYABLE_STATUS:
                    raise last_exc
                logger.warning("attempt %d/%d got status %d",
                               attempt, attempts, resp.status_code)
            if attempt < attempts and self.cfg.retry_backoff_s > 0:
                time.sleep(self.cfg.retry_backoff_s * attempt)
        if isinstance(last_exc, LLMBackendError):
            raise last_exc
        raise LLMTransportError(
            f"{self.cfg.endpoint_url} unreachable after {attempts} attempts: {last_exc!r}",
            attempts,
        )

    @staticmethod
    def _extract_text(resp: httpx.Response) -> str:
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise LLMBackendError(resp.status_code, resp.text) from None
        return content or ""


class OracleBackend:
    def __init__(self, judgments: JudgmentSet, noise: float = 0.0, seed: int = 0):
        self.judgments = judgments
        self.noise = noise
        self.seed = seed

    def complete(self, req: GenerationRequest) -> str:
        task = req.context.get("task")
        qid = req.context.get("query_id")
        pids = req.context.get("passage_ids", ())
        if task == "score":
            return mock_oracle_score_text(qid, pids, self.judgments, self.noise, self.seed)
        if task == "rank":
            return oracle_permutation_text(qid, pids, self.judgments)
        raise LLMBackendError(None, f"oracle backend cannot answer task {task!r}")


class ScriptedBackend:
    """Replays canned text: either ``script(request)`` or successive list items."""

    def __init__(self, script: Union[Callable[[GenerationRequest], str], Sequence[str]]):
        self._fn = script if callable(script) else None
        self._items = None if callable(script) else list(script)
        self._pos = 0
        self._lock = threading.Lock()

    def complete(self, req: GenerationRequest) -> str:
        if self._fn is not None:
            return self._fn(req)
        with self._lock:
            if self._pos >= len(self._items):
                raise LLMBackendError(None, "scripted backend ran out of responses")
            text = self._items[self._pos]
            self._pos += 1
        return text


@dataclass
class GatewayStats:
    requests: int = 0
    cache_hits: int = 0
    backend_calls: int = 0
    by_task_query: Counter = field(default_factory=Counter)

    def snapshot(self) -> dict:
        per_task: Counter = Counter()
        for (task, _), n in self.by_task_query.items():
            per_task[task] += n
        return {
            "requests": self.requests,
            "cache_hits": self.cache_hits,
            "backend_calls": self.backend_calls,
            "requests_by_task": dict(sorted(per_task.items())),
        }


class Gateway:
    """Routes requests to one backend, with an optional on-disk cache.

    ``stats.requests`` counts logical LLM calls (cache hits included);
    ``stats.backend_calls`` counts only those that reached the backend.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        judgments: Optional[JudgmentSet] = None,
        script=None,
        http_client: Optional[httpx.Client] = None,
    ):
        self.cfg = cfg
        if cfg.kind == "http_chat":
            self.backend = HttpChatBackend(cfg, http_client)
        elif cfg.kind == "mock_oracle":
            if judgments is None:
                raise ValueError("mock_oracle backend needs judgments")
            self.backend = OracleBackend(judgments, cfg.noise, cfg.seed)
        else:
            if script is None:
                raise ValueError("mock_scripted backend needs a script")
            self.backend = ScriptedBackend(script)
        self.cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
        self.stats = GatewayStats()
        self._stats_lock = threading.Lock()

    def cache_key(self, req: GenerationRequest) -> str:
        raw = f"{self.cfg.backend_id}\n{req.request_key}"
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def _count(self, req: GenerationRequest, hit: bool) -> None:
        with self._stats_lock:
            self.stats.requests += 1
            if hit:
                self.stats.cache_hits += 1
            else:
                self.stats.backend_calls += 1
            key = (req.context.get("task", "other"), req.context.get("query_id", ""))
            self.stats.by_task_query[key] += 1

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        key = self.cache_key(req) if self.cache else None
        if self.cache:
            cached = self.cache.get(key)
            if cached is not None:
                self._count(req, hit=True)
                return GenerationResponse(
                    cached, self.cfg.backend_id, True,
                    int((time.perf_counter() - start) * 1000),
                )
        text = self.backend.complete(req)
        if text is None:
            text = ""
        if self.cache:
            self.cache.put(key, text)
        self._count(req, hit=False)
        return GenerationResponse(
            text, self.cfg.backend_id, False, int((time.perf_counter() - start) * 1000)
        )


def generate(req: GenerationRequest, cfg: BackendConfig, **backend_kwargs) -> GenerationResponse:
    """One-shot helper; build a ``Gateway`` when issuing more than one request."""
    return Gateway(cfg, **backend_kwargs).generate(req)
