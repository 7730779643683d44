"""Uniform chat-completion access with three interchangeable backends plus
token and monetary cost accounting.

Backends
--------
``HttpBackend``     live chat-completions wire protocol (bearer auth, retries)
``ReplayBackend``   deterministic playback of a recorded transcript
``ScriptedBackend`` canned responses keyed by request tag, for tests

The ``Gateway`` wraps one backend and owns the side effects: every exchange is
appended to the ``UsageLedger`` and, when a record path is configured, to a
JSONL transcript. Replaying the i-th structurally-identical request returns
the i-th recorded response; requests are matched by a canonical hash of
(roles, text parts, image digests, tag), with per-hash FIFO order breaking
ties between identical requests.

Backends also expose ``now()``: wall clock for the live backend, a
deterministic counter for scripted/replay. Everything downstream that stamps
times (solution ``created_at``) draws from it so that replayed runs are
byte-reproducible.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Callable, Mapping, Protocol, Union

from .errors import (
    BackendUnavailableError,
    ConfigError,
    EngineError,
    ReplayMissError,
    UnknownModelError,
)

logger = logging.getLogger(__name__)

VALID_ROLES = frozenset({"system", "user", "assistant"})
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


# ===========================================================================
# Message model
# ===========================================================================


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    mime: str = "image/png"


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


def text_message(role: str, text: str) -> Message:
    return Message(role=role, parts=(TextPart(text),))


@dataclass(frozen=True)
class ChatRequest:
    backend_model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048
    tag: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("ChatRequest requires at least one message")
        for message in self.messages:
            if message.role not in VALID_ROLES:
                raise ValueError(f"invalid message role {message.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def canonical_hash(self) -> str:
        """Stable across process restarts: hashes roles, text parts, image
        byte digests, and the tag, nothing else."""
        doc = {
            "model": self.backend_model,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "tag": self.tag,
            "messages": [
                {
                    "role": m.role,
                    "parts": [
                        {"t": p.text}
                        if isinstance(p, TextPart)
                        else {"i": hashlib.sha256(p.data).hexdigest()}
                        for p in m.parts
                    ],
                }
                for m in self.messages
            ],
        }
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage
    latency: float
    backend_id: str
    truncated: bool = False


# ===========================================================================
# Pricing and the usage ledger
# ===========================================================================


class PriceTable:
    """model -> (usd per 1M prompt tokens, usd per 1M completion tokens).

    Accepts either ``{"model": [in, out]}`` or
    ``{"model": {"prompt": in, "completion": out}}`` shapes on load.
    """

    def __init__(self, prices: Mapping[str, object] | None = None):
        self._rates: dict[str, tuple[float, float]] = {}
        for model, value in (prices or {}).items():
            if isinstance(value, Mapping):
                self._rates[model] = (float(value["prompt"]), float(value["completion"]))
            else:
                rate_in, rate_out = value  # type: ignore[misc]
                self._rates[model] = (float(rate_in), float(rate_out))

    @classmethod
    def from_file(cls, path: str | Path) -> "PriceTable":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def __contains__(self, model: str) -> bool:
        return model in self._rates

    def rates(self, model: str) -> tuple[float, float]:
        if model not in self._rates:
            raise UnknownModelError(f"model {model!r} not in price table")
        return self._rates[model]


def cost_of(usage: Usage, model: str, price_table: PriceTable) -> float:
    """usd = prompt x p_in/1e6 + completion x p_out/1e6, rounded half-even to
    6 decimals. Decimal arithmetic so the rounding is exact, not float-ish."""
    rate_in, rate_out = price_table.rates(model)
    usd = (
        Decimal(usage.prompt_tokens) * Decimal(str(rate_in))
        + Decimal(usage.completion_tokens) * Decimal(str(rate_out))
    ) / Decimal(1_000_000)
    return float(usd.quantize(Decimal("0.000001"), rounding=ROUND_HALF_EVEN))


def amortized_routing_cost(total: float, instance_count: int) -> float:
    """Per-sample share of a one-off routing cost (seconds or USD)."""
    if instance_count == 0:
        raise EngineError("cannot amortize over zero instances", code="DIVISION_BY_ZERO")
    if instance_count < 0:
        raise ValueError("instance count must be positive")
    return total / instance_count


@dataclass(frozen=True)
class LedgerEntry:
    tag: str
    model: str
    prompt_tokens: int
    completion_tokens: int
    usd_cost: float
    latency: float


class UsageLedger:
    """Thread-safe append-only record of every model call's tokens and cost.

    Models absent from the price table are recorded at zero cost with a
    one-time warning; direct ``cost_of`` calls still fail loudly.
    """

    def __init__(self, price_table: PriceTable | None = None):
        self.price_table = price_table or PriceTable()
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()
        self._warned_models: set[str] = set()

    def record(self, tag: str, model: str, usage: Usage, latency: float) -> LedgerEntry:
        if model in self.price_table:
            usd = cost_of(usage, model, self.price_table)
        else:
            usd = 0.0
            if model not in self._warned_models:
                logger.warning("model %r has no price table entry; recording zero cost", model)
                self._warned_models.add(model)
        entry = LedgerEntry(tag, model, usage.prompt_tokens, usage.completion_tokens, usd, latency)
        with self._lock:
            self._entries.append(entry)
        return entry

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def total_usd(self) -> float:
        return sum(e.usd_cost for e in self.entries)

    def total_for(self, tag_prefix: str) -> float:
        return sum(e.usd_cost for e in self.entries if e.tag.startswith(tag_prefix))

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "tag": e.tag,
                            "model": e.model,
                            "prompt_tokens": e.prompt_tokens,
                            "completion_tokens": e.completion_tokens,
                            "usd_cost": e.usd_cost,
                            "latency": e.latency,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )


# ===========================================================================
# Backends
# ===========================================================================


class Backend(Protocol):
    backend_id: str
    deterministic: bool

    def complete(self, request: ChatRequest) -> ChatResponse: ...

    def now(self) -> float: ...


class _DeterministicClock:
    """Monotone counter standing in for wall time in scripted/replay modes."""

    def __init__(self) -> None:
        self._value = 0.0
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            self._value += 1.0
            return self._value


ScriptSource = Union[Mapping[str, object], Callable[[ChatRequest], str]]


class ScriptedBackend:
    """Canned responses for tests and offline runs.

    ``script`` is either a callable ``request -> text`` or a mapping whose
    keys are matched against the request tag: exact tag first, then the tag's
    role prefix (the part before ":"), then "default". Mapping values may be
    a single string or a list consumed in call order; an exhausted list
    repeats its last element.
    """

    backend_id = "scripted"
    deterministic = True

    def __init__(self, script: ScriptSource):
        self._fn = script if callable(script) else None
        self._script: dict[str, list[str]] = {}
        if not callable(script):
            for key, value in script.items():
                self._script[key] = [value] if isinstance(value, str) else list(value)
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        self._clock = _DeterministicClock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _resolve_key(self, tag: str) -> str:
        role = tag.split(":", 1)[0]
        for key in (tag, role, "default"):
            if key in self._script:
                return key
        raise ConfigError(f"no scripted response for tag {tag!r}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._fn is not None:
            text = self._fn(request)
        else:
            key = self._resolve_key(request.tag)
            with self._lock:
                index = self._cursor.get(key, 0)
                responses = self._script[key]
                text = responses[min(index, len(responses) - 1)]
                self._cursor[key] = index + 1
        prompt_chars = sum(
            len(p.text) for m in request.messages for p in m.parts if isinstance(p, TextPart)
        )
        usage = Usage(prompt_tokens=prompt_chars // 4, completion_tokens=max(1, len(text) // 4))
        return ChatResponse(text=text, usage=usage, latency=0.0, backend_id=self.backend_id)

    def now(self) -> float:
        return self._clock()


def wire_payload(request: ChatRequest) -> dict:
    """De-facto standard chat-completions request body."""
    messages = []
    for message in request.messages:
        content: list[dict] = []
        for part in message.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                encoded = base64.b64encode(part.data).decode("ascii")
                content.append(
                    {"type": "image_url", "image_url": {"url": f"data:{part.mime};base64,{encoded}"}}
                )
        messages.append({"role": message.role, "content": content})
    return {
        "model": request.backend_model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }


class HttpBackend:
    """Live chat-completions client: 3 attempts, exponential backoff from 1s,
    retrying only transport errors and HTTP 429/5xx."""

    deterministic = False

    def __init__(
        self,
        url: str,
        auth_env: str = "API_TOKEN",
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.auth_env = auth_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.backend_id = f"http:{url}"
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        payload = wire_payload(request)
        last_error: str = "no attempt made"
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            start = time.monotonic()
            try:
                response = requests.post(
                    self.url, json=payload, headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {response.status_code}"
                continue
            if response.status_code != 200:
                raise BackendUnavailableError(
                    f"backend returned HTTP {response.status_code}: {response.text[:200]}"
                )
            latency = time.monotonic() - start
            body = response.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
            if isinstance(content, list):  # some servers return part lists
                content = "".join(p.get("text", "") for p in content)
            usage_body = body.get("usage", {})
            usage = Usage(
                prompt_tokens=int(usage_body.get("prompt_tokens", 0)),
                completion_tokens=int(usage_body.get("completion_tokens", 0)),
            )
            return ChatResponse(
                text=content,
                usage=usage,
                latency=latency,
                backend_id=self.backend_id,
                truncated=choice.get("finish_reason") == "length",
            )
        raise BackendUnavailableError(f"backend unavailable after {self.retries} attempts ({last_error})")

    def now(self) -> float:
        return time.time()


class ReplayBackend:
    """Plays back a recorded transcript; novel requests are a hard error."""

    deterministic = True

    def __init__(self, transcript_path: str | Path):
        self.transcript_path = Path(transcript_path)
        self.backend_id = "replay"
        self.meta: dict = {}
        self._queues: dict[str, deque[dict]] = {}
        self._lock = threading.Lock()
        self._clock = _DeterministicClock()
        self._load()

    def _load(self) -> None:
        if not self.transcript_path.is_file():
            raise ConfigError(f"transcript not found: {self.transcript_path}")
        with open(self.transcript_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                kind = record.get("kind", "exchange")
                if kind == "meta":
                    self.meta = record
                    continue
                if kind != "exchange":
                    continue
                self._queues.setdefault(record["hash"], deque()).append(record["response"])

    def complete(self, request: ChatRequest) -> ChatResponse:
        request_hash = request.canonical_hash()
        with self._lock:
            queue = self._queues.get(request_hash)
            if not queue:
                raise ReplayMissError(
                    f"no recorded response for request tagged {request.tag!r}",
                    request_hash=request_hash,
                )
            record = queue.popleft()
        return ChatResponse(
            text=record["text"],
            usage=Usage(int(record["prompt_tokens"]), int(record["completion_tokens"])),
            latency=float(record["latency"]),
            backend_id=record.get("backend_id", self.backend_id),
            truncated=bool(record.get("truncated", False)),
        )

    def now(self) -> float:
        return self._clock()


# ===========================================================================
# Gateway
# ===========================================================================


class Gateway:
    """One backend plus the ledger and (optionally) a recording transcript.

    ``complete`` is safe for concurrent callers; ledger and transcript appends
    are serialized internally.
    """

    def __init__(
        self,
        backend: Backend,
        ledger: UsageLedger | None = None,
        record_path: str | Path | None = None,
    ):
        self.backend = backend
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.record_path = Path(record_path) if record_path else None
        self._seq = 0
        self._lock = threading.Lock()
        if self.record_path:
            self.record_path.parent.mkdir(parents=True, exist_ok=True)
            self.record_path.write_text("", encoding="utf-8")

    def write_meta(self, **fields: object) -> None:
        """Prepend-style metadata record (task id, budget, seed) for replays."""
        if not self.record_path:
            return
        record = {"kind": "meta", **fields}
        with self._lock:
            with open(self.record_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.backend.complete(request)
        self.ledger.record(request.tag, request.backend_model, response.usage, response.latency)
        if self.record_path:
            self._record(request, response)
        return response

    def now(self) -> float:
        return self.backend.now()

    def _record(self, request: ChatRequest, response: ChatResponse) -> None:
        text_digest = hashlib.sha256()
        image_digests: list[str] = []
        preview = ""
        for message in request.messages:
            for part in message.parts:
                if isinstance(part, TextPart):
                    text_digest.update(part.text.encode("utf-8"))
                    if not preview:
                        preview = part.text[:120]
                else:
                    image_digests.append(hashlib.sha256(part.data).hexdigest())
        with self._lock:
            record = {
                "kind": "exchange",
                "seq": self._seq,
                "hash": request.canonical_hash(),
                "tag": request.tag,
                "model": request.backend_model,
                "request": {
                    "roles": [m.role for m in request.messages],
                    "text_sha256": text_digest.hexdigest(),
                    "image_sha256s": image_digests,
                    "preview": preview,
                },
                "response": {
                    "text": response.text,
                    "prompt_tokens": response.usage.prompt_tokens,
                    "completion_tokens": response.usage.completion_tokens,
                    "latency": response.latency,
                    "backend_id": response.backend_id,
                    "truncated": response.truncated,
                },
            }
            self._seq += 1
            with open(self.record_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
