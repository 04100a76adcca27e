# This file makes the llm directory a Python package

from .chunking import chunk_text
from .gateway import (
    BackendConfig,
    ChatMessage,
    ChatRequest,
    Gateway,
    PriceTable,
    Role,
    UsageLedger,
    UsageRecord,
    create_gateway,
    load_price_table,
)
from .rate_limit import RateLimiter
from .scripted import ScriptedBackend

__all__ = [
    "BackendConfig",
    "ChatMessage",
    "ChatRequest",
    "Gateway",
    "PriceTable",
    "RateLimiter",
    "Role",
    "ScriptedBackend",
    "UsageLedger",
    "UsageRecord",
    "chunk_text",
    "create_gateway",
    "load_price_table",
]
