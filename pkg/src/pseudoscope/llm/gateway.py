"""Uniform access to chat-completion backends.

`Gateway` wraps one backend with the shared rate limiter and a process-wide usage ledger. Backends
implement `Backend.generate`; the remote chat-completions adapter lives here, the Gemini adapter in
`gemini.py` and the deterministic scripted backend in `scripted.py`.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Annotated, Literal, Protocol

import backoff
import httpx
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import AuthMissing, InvalidValue, TransportError
from ..utils import count_tokens
from .rate_limit import RateLimiter

logger = logging.getLogger(__name__)

API_KEY_ENV = "PSEUDOSCOPE_API_KEY"
API_BASE_ENV = "PSEUDOSCOPE_API_BASE"
DEFAULT_API_BASE = "https://api.openai.com/v1"
RETRYABLE_STATUS_CODES = {408, 429, 500, 502, 503, 504}


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Role
    content: str


class ChatRequest(BaseModel):
    """One chat-completion call. `agent` and `step` address scripted responses and tag transcripts."""

    model_config = ConfigDict(frozen=True)

    system_prompt: str
    messages: tuple[ChatMessage, ...] = Field(min_length=1)
    temperature: Annotated[float, Field(ge=0)] = 0.0
    max_output_tokens: Annotated[int, Field(gt=0)] = 2048
    agent: str = "default"
    step: Annotated[int, Field(ge=0)] = 0

    @model_validator(mode="after")
    def _first_role(self) -> "ChatRequest":
        if self.messages[0].role not in (Role.SYSTEM, Role.USER):
            raise ValueError("the first message must have role system or user")
        return self

    @property
    def last_user_content(self) -> str:
        for message in reversed(self.messages):
            if message.role is Role.USER:
                return message.content
        return ""

    def to_openai_messages(self) -> list[dict[str, str]]:
        messages = [{"role": "system", "content": self.system_prompt}] if self.system_prompt else []
        messages.extend({"role": m.role.value, "content": m.content} for m in self.messages)
        return messages


class PriceTable(BaseModel):
    """Currency units per one million tokens."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_per_million: Annotated[float, Field(ge=0)] = 10.0
    output_per_million: Annotated[float, Field(ge=0)] = 30.0

    def cost(self, input_tokens: int, output_tokens: int) -> float:
        return input_tokens * self.input_per_million / 1_000_000 + output_tokens * self.output_per_million / 1_000_000


def load_price_table(name: str = "default") -> PriceTable:
    """Load a named price table shipped with the package (`default`, `batch`)."""
    tables = json.loads(resources.files("pseudoscope.assets").joinpath("price_tables.json").read_text("utf-8"))
    if name not in tables:
        raise KeyError(f"Unknown price table {name!r}; available: {', '.join(sorted(tables))}")
    return PriceTable.model_validate(tables[name])


class UsageRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_tokens: Annotated[int, Field(ge=0)] = 0
    output_tokens: Annotated[int, Field(ge=0)] = 0
    wall_time: Annotated[float, Field(ge=0)] = 0.0
    cost_estimate: Annotated[float, Field(ge=0)] = 0.0
    calls: Annotated[int, Field(ge=0)] = 0
    approximate: bool = False

    def __add__(self, other: "UsageRecord") -> "UsageRecord":
        return UsageRecord(
            input_tokens=self.input_tokens + other.input_tokens,
            output_tokens=self.output_tokens + other.output_tokens,
            wall_time=self.wall_time + other.wall_time,
            cost_estimate=self.cost_estimate + other.cost_estimate,
            calls=self.calls + other.calls,
            approximate=self.approximate or other.approximate,
        )


@dataclass
class UsageLedger:
    """Accumulates per-call usage; `total` is always the sum over `records`."""

    records: list[UsageRecord] = field(default_factory=list)

    def add(self, record: UsageRecord) -> None:
        self.records.append(record)

    @property
    def total(self) -> UsageRecord:
        total = UsageRecord()
        for record in self.records:
            total = total + record
        return total


@dataclass(frozen=True)
class BackendReply:
    text: str
    input_tokens: int
    output_tokens: int
    approximate: bool = False


class Backend(Protocol):
    async def generate(self, request: ChatRequest) -> BackendReply: ...


class RetryConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_attempts: Annotated[int, Field(ge=1)] = 4
    base_delay: Annotated[float, Field(ge=0)] = 1.0
    max_delay: Annotated[float, Field(ge=0)] = 60.0


class RateLimitConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    requests: Annotated[int, Field(gt=0)] | None = None
    interval: Annotated[float, Field(gt=0)] = 1.0


class BackendConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    backend: Literal["remote", "scripted"] = "scripted"
    provider: Literal["openai", "gemini"] = "openai"
    model: str = "gpt-4-0125-preview"
    script_path: str | None = None
    api_key_env: str = API_KEY_ENV
    api_base_env: str = API_BASE_ENV
    timeout: Annotated[float, Field(gt=0)] = 120.0
    price_table: PriceTable | str = "default"
    retry: RetryConfig = RetryConfig()
    rate_limit: RateLimitConfig = RateLimitConfig()

    def resolved_price_table(self) -> PriceTable:
        if isinstance(self.price_table, str):
            return load_price_table(self.price_table)
        return self.price_table


class _RetryableStatus(Exception):
    def __init__(self, status_code: int, body: str):
        self.status_code = status_code
        super().__init__(f"HTTP {status_code}: {body[:200]}")


class ChatCompletionsBackend:
    """Remote backend speaking the chat-completions JSON shape (model, messages, temperature)."""

    def __init__(
        self,
        model: str,
        api_key_env: str = API_KEY_ENV,
        api_base_env: str = API_BASE_ENV,
        retry: RetryConfig = RetryConfig(),
        timeout: float = 120.0,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.model = model
        self.api_key_env = api_key_env
        self.api_base = (os.environ.get(api_base_env) or DEFAULT_API_BASE).rstrip("/")
        self.retry = retry
        self.timeout = timeout
        self._transport = transport

    def _api_key(self) -> str:
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            logger.error(f"API key is required but {self.api_key_env} is not set.")
            raise AuthMissing(self.api_key_env)
        return api_key

    async def _post(self, client: httpx.AsyncClient, payload: dict) -> dict:
        response = await client.post(f"{self.api_base}/chat/completions", json=payload)
        if response.status_code in RETRYABLE_STATUS_CODES:
            raise _RetryableStatus(response.status_code, response.text)
        if response.status_code >= 400:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}", response.status_code)
        return response.json()

    async def generate(self, request: ChatRequest) -> BackendReply:
        api_key = self._api_key()
        payload = {
            "model": self.model,
            "messages": request.to_openai_messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        post_with_retry = backoff.on_exception(
            backoff.expo,
            (_RetryableStatus, httpx.TimeoutException, httpx.TransportError),
            max_tries=self.retry.max_attempts,
            factor=self.retry.base_delay,
            max_value=self.retry.max_delay,
            jitter=None,
            on_backoff=lambda details: logger.warning(
                f"Transient error from {self.api_base} (attempt {details['tries']}/{self.retry.max_attempts}), "
                f"retrying in {details['wait']:.1f}s"
            ),
        )(self._post)
        headers = {"Authorization": f"Bearer {api_key}"}
        async with httpx.AsyncClient(headers=headers, timeout=self.timeout, transport=self._transport) as client:
            try:
                body = await post_with_retry(client, payload)
            except _RetryableStatus as e:
                raise TransportError(str(e), e.status_code) from e
            except httpx.HTTPError as e:
                raise TransportError(f"{type(e).__name__}: {e}") from e
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise TransportError(f"Unexpected chat-completions response shape: {str(body)[:200]}") from e
        usage = body.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return BackendReply(text, int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        prompt_text = "\n".join(m["content"] for m in payload["messages"])
        return BackendReply(text, count_tokens(prompt_text), count_tokens(text), approximate=True)


class Gateway:
    """Shared entry point for all agents: rate limiting, usage accounting, logging."""

    def __init__(self, backend: Backend, price_table: PriceTable | None = None, limiter: RateLimiter | None = None):
        self.backend = backend
        self.price_table = price_table or PriceTable()
        self.limiter = limiter or RateLimiter(None)
        self.ledger = UsageLedger()

    async def complete(self, request: ChatRequest) -> tuple[str, UsageRecord]:
        await self.limiter.acquire()
        logger.debug(f"[{request.agent}#{request.step}] request: {request.last_user_content[:500]}")
        started = time.monotonic()
        reply = await self.backend.generate(request)
        wall_time = 0.0 if getattr(self.backend, "deterministic", False) else time.monotonic() - started
        usage = UsageRecord(
            input_tokens=reply.input_tokens,
            output_tokens=reply.output_tokens,
            wall_time=wall_time,
            cost_estimate=self.price_table.cost(reply.input_tokens, reply.output_tokens),
            calls=1,
            approximate=reply.approximate,
        )
        self.ledger.add(usage)
        logger.debug(f"[{request.agent}#{request.step}] reply: {reply.text[:500]}")
        return reply.text, usage


def create_gateway(config: BackendConfig, script_path: str | None = None) -> Gateway:
    """Build the gateway described by `config`; `script_path` overrides the configured script."""
    if config.backend == "scripted":
        from .scripted import ScriptedBackend

        path = script_path or config.script_path
        if not path:
            raise InvalidValue("Scripted backend selected but no script_path configured")
        backend: Backend = ScriptedBackend.from_file(path)
    elif config.provider == "gemini":
        from .gemini import GeminiBackend

        backend = GeminiBackend(config.model, api_key_env=config.api_key_env, retry=config.retry)
    else:
        backend = ChatCompletionsBackend(
            config.model,
            api_key_env=config.api_key_env,
            api_base_env=config.api_base_env,
            retry=config.retry,
            timeout=config.timeout,
        )
    limiter = RateLimiter(config.rate_limit.requests, config.rate_limit.interval)
    logger.info(f"Using {config.backend} backend ({config.provider if config.backend == 'remote' else 'script'})")
    return Gateway(backend, config.resolved_price_table(), limiter)
