"""Chat-completion gateway with cost accounting and record/replay.

Every pipeline stage that talks to a language model goes through
:class:`Gateway`. In ``replay`` mode no network is touched: responses come
from an append-only JSON-lines store keyed by a fingerprint over
(system_text, user_text, temperature, schema, model). ``record`` mode makes
the live call and persists the entry, so one recorded run makes every later
run deterministic.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .jsonio import dumps_compact, sha256_text

DEFAULT_MAX_RETRIES = 2
_BACKOFF_BASE_S = 0.5


class GatewayError(Exception):
    """Base for gateway failures."""


class TimeoutError_(GatewayError):
    retryable = True


class TransportError(GatewayError):
    retryable = True


class RateLimitedError(GatewayError):
    retryable = True


class ReplayMissError(GatewayError):
    """Fatal in replay mode: the fingerprint has no recorded response."""

    retryable = False


class MalformedOutputError(GatewayError):
    """Raised by callers when schema validation fails beyond the retry budget."""

    retryable = False


@dataclass(frozen=True)
class ModelRequest:
    system_text: str
    user_text: str
    model_id: str
    expected_schema: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ValueError("user_text must be non-empty")

    def fingerprint(self) -> str:
        payload = dumps_compact(
            {
                "system": self.system_text,
                "user": self.user_text,
                "temperature": self.temperature,
                "schema": self.expected_schema,
                "model": self.model_id,
            }
        )
        return sha256_text(payload)


@dataclass(frozen=True)
class ModelResponse:
    text: str
    input_tokens: int
    output_tokens: int
    cost_usd: float
    latency_ms: int
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cost_usd": self.cost_usd,
            "latency_ms": self.latency_ms,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelResponse":
        return cls(
            text=payload["text"],
            input_tokens=int(payload["input_tokens"]),
            output_tokens=int(payload["output_tokens"]),
            cost_usd=float(payload["cost_usd"]),
            latency_ms=int(payload["latency_ms"]),
            warnings=tuple(payload.get("warnings", ())),
        )


@dataclass(frozen=True)
class PriceTable:
    """$/token rates per model id; unknown models cost 0 with a warning."""

    rates: dict[str, tuple[float, float]] = field(default_factory=dict)

    def cost(self, model_id: str, input_tokens: int, output_tokens: int) -> tuple[float, tuple[str, ...]]:
        if model_id in self.rates:
            rate_in, rate_out = self.rates[model_id]
            return input_tokens * rate_in + output_tokens * rate_out, ()
        return 0.0, (f"no price configured for model {model_id!r}; cost recorded as 0",)

    @classmethod
    def from_config(cls, payload: dict) -> "PriceTable":
        rates = {
            model: (float(entry["input_per_token"]), float(entry["output_per_token"]))
            for model, entry in payload.items()
        }
        return cls(rates=rates)


class ReplayStore:
    """Append-only JSONL of fingerprint -> response; writes are serialized."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, ModelResponse] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                row = json.loads(line)
                self._entries[row["fingerprint"]] = ModelResponse.from_dict(row["response"])

    def get(self, fingerprint: str) -> ModelResponse | None:
        return self._entries.get(fingerprint)

    def put(self, fingerprint: str, response: ModelResponse) -> None:
        with self._lock:
            self._entries[fingerprint] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(dumps_compact({"fingerprint": fingerprint, "response": response.to_dict()}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class CallLedger:
    """Totals per pipeline stage: calls, tokens, cost."""

    entries: dict[str, dict] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, stage: str, response: ModelResponse) -> None:
        with self._lock:
            row = self.entries.setdefault(
                stage, {"calls": 0, "input_tokens": 0, "output_tokens": 0, "cost_usd": 0.0}
            )
            row["calls"] += 1
            row["input_tokens"] += response.input_tokens
            row["output_tokens"] += response.output_tokens
            row["cost_usd"] += response.cost_usd

    def total_cost(self) -> float:
        return sum(row["cost_usd"] for row in self.entries.values())

    def calls(self, stage: str) -> int:
        return self.entries.get(stage, {}).get("calls", 0)

    def to_dict(self) -> dict:
        return {stage: dict(row) for stage, row in sorted(self.entries.items())}


# transport(request) -> (text, input_tokens, output_tokens, latency_ms)
Transport = Callable[[ModelRequest], tuple[str, int, int, int]]


def http_transport(endpoint: str, api_key_env: str = "REPORTCHECK_API_KEY", timeout_s: float = 120.0) -> Transport:
    """OpenAI-style chat-completion POST with bearer auth from the environment."""
    import requests

    def call(request: ModelRequest) -> tuple[str, int, int, int]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        started = time.monotonic()
        try:
            resp = requests.post(endpoint, json=body, headers=headers, timeout=timeout_s)
        except requests.Timeout as exc:
            raise TimeoutError_(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        latency_ms = int((time.monotonic() - started) * 1000)
        if resp.status_code == 429:
            raise RateLimitedError(f"rate limited: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        payload = resp.json()
        usage = payload.get("usage", {})
        return (
            payload["choices"][0]["message"]["content"],
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
            latency_ms,
        )

    return call


class Gateway:
    """Uniform model interface; safe for concurrent ``complete`` calls."""

    def __init__(
        self,
        mode: str = "replay",
        store: ReplayStore | None = None,
        transport: Transport | None = None,
        price_table: PriceTable | None = None,
        ledger: CallLedger | None = None,
        max_retries: int = DEFAULT_MAX_RETRIES,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown gateway mode {mode!r}")
        if mode in ("live", "record") and transport is None:
            raise ValueError(f"{mode} mode requires a transport")
        if mode in ("record", "replay") and store is None:
            raise ValueError(f"{mode} mode requires a replay store")
        self.mode = mode
        self.store = store
        self.transport = transport
        self.price_table = price_table or PriceTable()
        self.ledger = ledger or CallLedger()
        self.max_retries = max_retries
        self._sleep = sleep

    def complete(self, request: ModelRequest, stage: str = "other") -> ModelResponse:
        fingerprint = request.fingerprint()
        if self.mode == "replay":
            assert self.store is not None
            response = self.store.get(fingerprint)
            if response is None:
                raise ReplayMissError(f"no recorded response for fingerprint {fingerprint[:12]}…")
            self.ledger.record(stage, response)
            return response

        if self.mode == "record":
            assert self.store is not None
            cached = self.store.get(fingerprint)
            if cached is not None:
                self.ledger.record(stage, cached)
                return cached

        response = self._call_with_retries(request)
        if self.mode == "record":
            assert self.store is not None
            self.store.put(fingerprint, response)
        self.ledger.record(stage, response)
        return response

    def _call_with_retries(self, request: ModelRequest) -> ModelResponse:
        assert self.transport is not None
        attempt = 0
        while True:
            try:
                text, tokens_in, tokens_out, latency_ms = self.transport(request)
                cost, warnings = self.price_table.cost(request.model_id, tokens_in, tokens_out)
                return ModelResponse(
                    text=text,
                    input_tokens=tokens_in,
                    output_tokens=tokens_out,
                    cost_usd=cost,
                    latency_ms=latency_ms,
                    warnings=warnings,
                )
            except GatewayError as exc:
                if not getattr(exc, "retryable", False) or attempt >= self.max_retries:
                    raise
                self._sleep(_BACKOFF_BASE_S * (2**attempt))
                attempt += 1


def parse_model_json(text: str):
    """Parse a JSON payload out of model text, tolerating markdown fences."""
    stripped = text.strip()
    if stripped.startswith("```"):
        lines = stripped.splitlines()
        if lines and lines[0].startswith("```"):
            lines = lines[1:]
        if lines and lines[-1].strip().startswith("```"):
            lines = lines[:-1]
        stripped = "\n".join(lines).strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError as exc:
        raise MalformedOutputError(f"model output is not valid JSON: {exc}") from exc


def reask_request(request: ModelRequest, instruction: str, attempt: int) -> ModelRequest:
    """Corrective re-ask: same request with the fix instruction appended.

    The attempt counter keeps the fingerprint distinct per retry so record
    and replay stay aligned call-for-call.
    """
    suffix = f"\n\n# Correction (attempt {attempt})\n{instruction}"
    return replace(request, user_text=request.user_text + suffix)
