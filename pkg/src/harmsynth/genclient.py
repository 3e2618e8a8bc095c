"""Chat-completion client with mock backends, refusal detection, and the
stage-one success-rate gate.

The wire format is the common chat-completion JSON shape (model, messages,
temperature, max_tokens), so any local or hosted inference server can plug
in. By default everything runs against deterministic in-process mocks; a
live HTTP backend must be constructed explicitly.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import requests

from .promptkit import RenderedPrompt

DEFAULT_REFUSAL_PATTERNS = ("i cannot", "i can't", "as an ai", "i'm not able to")
REFUSAL_WINDOW = 200
DEFAULT_GATE = 0.60

# Raw responses longer than this are truncated and flagged.
MAX_RAW_CHARS = 1_000_000

STATUSES = ("ok", "refusal", "transport_error", "empty")


class TransportError(RuntimeError):
    """The backend could not be reached or returned an unusable response."""


def detect_refusal(text: str, patterns: Sequence[str] | None = None,
                   window: int = REFUSAL_WINDOW) -> bool:
    """True iff the opening of the text matches the refusal lexicon.

    Matching is case-insensitive over the first ``window`` characters;
    curly apostrophes are folded so "I'm" matches either quoting style.
    """
    head = text[:window].casefold().replace("’", "'")
    return any(p.casefold() in head for p in (patterns or DEFAULT_REFUSAL_PATTERNS))


def load_refusal_lexicon(path: str | Path) -> tuple[str, ...]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    patterns = tuple(str(p) for p in data.get("patterns", []))
    if not patterns:
        raise ValueError(f"{path}: refusal lexicon defines no patterns")
    return patterns


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = "mock://local"
    model_id: str = "mock-model"
    max_tokens: int = 2048
    temperature: float = 1.0
    request_timeout: float = 60.0
    max_retries: int = 2
    parallelism: int = 1
    api_key_env: str = "HARMSYNTH_API_KEY"

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationBatch:
    """The outcome of one model call, before and after output filtering."""

    prompt_id: str
    raw_output: str
    status: str
    parsed_count: int = 0
    valid_count: int = 0
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown batch status {self.status!r}")
        if self.status == "refusal" and self.valid_count != 0:
            raise ValueError("a refusal batch cannot have valid entries")
        if self.valid_count > self.parsed_count:
            raise ValueError("valid_count cannot exceed parsed_count")
        if self.parsed_count < 0 or self.valid_count < 0:
            raise ValueError("counts must be non-negative")

    def to_record(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "status": self.status,
            "parsed_count": self.parsed_count,
            "valid_count": self.valid_count,
            "truncated": self.truncated,
            "raw_output": self.raw_output,
        }


@dataclass(frozen=True)
class SuccessReport:
    requested_total: int
    valid_total: int
    success_rate: float
    gate: float
    passes_gate: bool

    def to_record(self) -> dict:
        return {
            "requested_total": self.requested_total,
            "valid_total": self.valid_total,
            "success_rate": self.success_rate,
            "gate": self.gate,
            "passes_gate": self.passes_gate,
        }


class Backend(Protocol):
    def complete(self, request: dict) -> dict: ...


def _response(content: str, model_id: str = "mock-model") -> dict:
    return {"model": model_id, "choices": [{"message": {"role": "assistant", "content": content}}]}


class MockBackend:
    """Scripted backend: returns canned content, optionally failing first.

    ``responses`` may be a single string (returned for every request) or a
    mapping from prompt text to content. ``fail_times`` raises TransportError
    for that many leading calls, to exercise retry paths.
    """

    def __init__(self, responses: str | dict[str, str] = "",
                 fail_times: int = 0):
        self._responses = responses
        self._fail_remaining = fail_times
        self.calls = 0

    def complete(self, request: dict) -> dict:
        self.calls += 1
        if self._fail_remaining > 0:
            self._fail_remaining -= 1
            raise TransportError("mock transport failure")
        prompt = request["messages"][-1]["content"]
        if isinstance(self._responses, dict):
            content = self._responses.get(prompt, "")
        else:
            content = self._responses
        return _response(content, request.get("model", "mock-model"))


_WORDS = (
    "placeholder", "synthetic", "fixture", "sample", "entry", "marker",
    "token", "pattern", "filler", "probe", "stand-in", "mock", "template",
    "widget", "banner", "signal", "casing", "variant", "payload", "notice",
)


def _synth_sentence(seed_hex: str, index: int) -> str:
    h = hashlib.blake2b(f"{seed_hex}:{index}".encode(), digest_size=8).digest()
    w = [_WORDS[b % len(_WORDS)] for b in h[:4]]
    tag = h.hex()[:6]
    return (
        f"Synthetic {w[0]} text {tag} line {index}: the {w[1]} {w[2]} "
        f"stands in for a {w[3]} example."
    )


_NOISE_LINE = "@@##$$%% ^^&&**(( ))__++ $$##@@"


class DeterministicMockBackend:
    """Offline stand-in for a generator model.

    Emits a numbered list derived purely from a hash of the prompt text, so
    repeated calls with the same prompt produce byte-identical output. The
    entry count is read from the prompt's "generating N ..." clause when
    present. ``valid_per_batch`` caps how many entries are clean; the rest
    are noise lines that downstream filters reject. ``refuse_every`` makes
    every n-th distinct prompt come back as a refusal.
    """

    def __init__(self, seed: int = 0, valid_per_batch: int | None = None,
                 total_per_batch: int | None = None, refuse_every: int = 0):
        self.seed = seed
        self.valid_per_batch = valid_per_batch
        self.total_per_batch = total_per_batch
        self.refuse_every = refuse_every

    def complete(self, request: dict) -> dict:
        prompt = request["messages"][-1]["content"]
        seed_hex = hashlib.sha256(f"{self.seed}:{prompt}".encode()).hexdigest()
        if self.refuse_every:
            if int(seed_hex[:8], 16) % self.refuse_every == 0:
                return _response("I cannot help with that request.")
        total = self.total_per_batch
        if total is None:
            import re as _re

            m = _re.search(r"generating (\d+)", prompt)
            total = int(m.group(1)) if m else 30
        valid = total if self.valid_per_batch is None else min(self.valid_per_batch, total)
        lines = []
        for i in range(1, total + 1):
            if i <= valid:
                lines.append(f"{i}. {_synth_sentence(seed_hex, i)}")
            else:
                lines.append(f"{i}. {_NOISE_LINE}")
        return _response("\n".join(lines), request.get("model", "mock-model"))


class HttpBackend:
    """POSTs chat-completion requests to a real endpoint.

    The API key is read from the configured environment variable and sent as
    a bearer token; it never appears in config files or logs.
    """

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg

    def complete(self, request: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                self.cfg.endpoint_url,
                json=request,
                headers=headers,
                timeout=self.cfg.request_timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"endpoint returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError("endpoint returned non-JSON body") from exc


def _extract_content(response: dict) -> str:
    try:
        return str(response["choices"][0]["message"]["content"])
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError("malformed completion response") from exc


class GenerationClient:
    """Issues generation requests with retry/backoff and an audit trail.

    Transport failures retry up to cfg.max_retries with exponential backoff;
    refusals are never retried. Every request/response pair is appended to
    the audit jsonl when a path is configured.
    """

    def __init__(self, cfg: BackendConfig, backend: Backend,
                 audit_path: str | Path | None = None,
                 refusal_patterns: Sequence[str] | None = None,
                 sleeper: Callable[[float], None] = time.sleep,
                 backoff_base: float = 0.5):
        self.cfg = cfg
        self.backend = backend
        self.audit_path = Path(audit_path) if audit_path else None
        self.refusal_patterns = tuple(refusal_patterns or DEFAULT_REFUSAL_PATTERNS)
        self._sleep = sleeper
        self._backoff_base = backoff_base
        self._audit_lock = threading.Lock()
        if self.audit_path:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)

    def _audit(self, record: dict) -> None:
        if not self.audit_path:
            return
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._audit_lock:
            with self.audit_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def _request_body(self, prompt: RenderedPrompt) -> dict:
        return {
            "model": self.cfg.model_id,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }

    def generate(self, prompt: RenderedPrompt) -> GenerationBatch:
        request = self._request_body(prompt)
        last_error = ""
        for attempt in range(self.cfg.max_retries + 1):
            try:
                response = self.backend.complete(request)
                content = _extract_content(response)
            except TransportError as exc:
                last_error = str(exc)
                self._audit({
                    "ts": time.time(),
                    "prompt_id": prompt.prompt_id,
                    "attempt": attempt,
                    "request": request,
                    "error": last_error,
                })
                if attempt < self.cfg.max_retries:
                    self._sleep(self._backoff_base * (2 ** attempt))
                continue

            truncated = len(content) > MAX_RAW_CHARS
            if truncated:
                content = content[:MAX_RAW_CHARS]
            if not content.strip():
                status = "empty"
            elif detect_refusal(content, self.refusal_patterns):
                status = "refusal"
            else:
                status = "ok"
            self._audit({
                "ts": time.time(),
                "prompt_id": prompt.prompt_id,
                "attempt": attempt,
                "request": request,
                "status": status,
                "truncated": truncated,
                "response_content": content,
            })
            return GenerationBatch(
                prompt_id=prompt.prompt_id,
                raw_output=content,
                status=status,
                truncated=truncated,
            )
        return GenerationBatch(
            prompt_id=prompt.prompt_id,
            raw_output="",
            status="transport_error",
        )

    def generate_many(self, prompts: Iterable[RenderedPrompt]) -> list[GenerationBatch]:
        """Generate for several prompts, up to cfg.parallelism in flight.

        Results come back in prompt order regardless of completion order.
        """
        prompts = list(prompts)
        if self.cfg.parallelism == 1 or len(prompts) <= 1:
            return [self.generate(p) for p in prompts]
        with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
            return list(pool.map(self.generate, prompts))


def with_counts(batch: GenerationBatch, parsed_count: int,
                valid_count: int) -> GenerationBatch:
    """Attach output-parser counts to a batch (see outparse)."""
    return replace(batch, parsed_count=parsed_count, valid_count=valid_count)


def success_report(batches: Sequence[GenerationBatch], requested_per_batch: int,
                   gate: float = DEFAULT_GATE) -> SuccessReport:
    """Campaign-level valid fraction against the pass/fail gate.

    The rate is total valid entries over total requested entries across all
    batches; a batch that refused or errored contributes zero valid entries
    but still counts in the denominator.
    """
    if not batches:
        raise ValueError("success_report needs at least one batch")
    if requested_per_batch < 1:
        raise ValueError("requested_per_batch must be >= 1")
    if not 0 < gate <= 1:
        raise ValueError("gate must be in (0, 1]")
    requested_total = len(batches) * requested_per_batch
    valid_total = sum(b.valid_count for b in batches)
    rate = valid_total / requested_total
    return SuccessReport(
        requested_total=requested_total,
        valid_total=valid_total,
        success_rate=rate,
        gate=gate,
        passes_gate=rate >= gate,
    )


def per_batch_rates(batches: Sequence[GenerationBatch],
                    requested_per_batch: int) -> dict[str, float]:
    return {b.prompt_id: b.valid_count / requested_per_batch for b in batches}
