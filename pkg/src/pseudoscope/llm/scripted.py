"""Deterministic lookup-table backend for offline runs and golden tests.

Script files are JSON-Lines; each line is

    {"match": {"agent": "extractor", "step": 2, "contains": "Miata"}, "response": "..."}

All `match` keys are optional. An entry applies when every key it names holds for the request
(`contains` is a substring test on the last user message). The first applicable entry in file order
wins, so specific entries go before catch-all ones.
"""

import json
import logging
from pathlib import Path

from pydantic import BaseModel, ConfigDict

from ..errors import InvalidValue, ScriptMiss
from ..utils import approximate_tokens
from .gateway import BackendReply, ChatRequest

logger = logging.getLogger(__name__)


class ScriptMatch(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    agent: str | None = None
    step: int | None = None
    contains: str | None = None

    def applies(self, request: ChatRequest) -> bool:
        if self.agent is not None and self.agent != request.agent:
            return False
        if self.step is not None and self.step != request.step:
            return False
        if self.contains is not None and self.contains not in request.last_user_content:
            return False
        return True


class ScriptEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    match: ScriptMatch = ScriptMatch()
    response: str


class ScriptedBackend:
    deterministic = True

    def __init__(self, entries: list[ScriptEntry]):
        self.entries = entries
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    entries.append(ScriptEntry.model_validate(json.loads(line)))
                except ValueError as e:
                    raise InvalidValue(f"{path}:{line_number}: invalid script entry: {e}") from e
        logger.info(f"Loaded {len(entries)} scripted responses from {path}")
        return cls(entries)

    @classmethod
    def from_responses(cls, responses: list[tuple[dict, str]]) -> "ScriptedBackend":
        return cls([ScriptEntry(match=ScriptMatch(**match), response=text) for match, text in responses])

    async def generate(self, request: ChatRequest) -> BackendReply:
        self.calls += 1
        for entry in self.entries:
            if entry.match.applies(request):
                prompt_text = "\n".join([request.system_prompt, *(m.content for m in request.messages)])
                return BackendReply(
                    text=entry.response,
                    input_tokens=approximate_tokens(prompt_text),
                    output_tokens=approximate_tokens(entry.response),
                    approximate=True,
                )
        raise ScriptMiss(request.agent, request.step)
