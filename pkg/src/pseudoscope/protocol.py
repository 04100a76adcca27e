"""Structured messages exchanged between agents: envelopes, canonical JSON, reply parsers, repair loop.

Wire shapes (all canonical JSON: sorted keys, no insignificant whitespace, UTF-8):

    Strategist reply   {"action": "retrieve|infer|refine|finish", "rationale": str, "instructions": str}
    Extractor reply    {"attributes": [{"type": str, "value": [str, ...] | str, "confidence": 1-5,
                                        "evidence": [{"seq": int, "quote": str}, ...]}, ...]}
    Summarizer reply   same as Extractor (the refined attribute set)
    Categorizer reply  {"category": "<one of the ten categories>"}
    Envelope           {"sender": "Strategist|Retriever|Extractor|Summarizer",
                        "payload": {"kind": "decision|activities|attributes|profile", ...}}
"""

import json
import logging
import re
from collections.abc import Awaitable, Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Any, Generic, Literal, TypeVar, Union

from pydantic import (
    AfterValidator,
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    StrictInt,
    StrictStr,
    ValidationError,
    model_validator,
)
from pydantic_core import PydanticCustomError

from .errors import (
    ConfidenceInvalid,
    InvalidField,
    InvalidValue,
    MissingField,
    NoJsonFound,
    ProtocolError,
    RepairExhausted,
    UnknownAction,
    UnknownCategory,
)
from .models import (
    MAX_VALUES,
    Action,
    Activity,
    Category,
    Evidence,
    InferredAttribute,
    Profile,
    StrategistDecision,
    normalize,
)
from .utils import canonical_json

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R", bound=BaseModel)

CORRECTIVE_PROMPT = (
    "Your previous reply could not be used ({error}). "
    "Reply again with only the JSON object described in your instructions, and nothing else."
)

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


class Sender(str, Enum):
    STRATEGIST = "Strategist"
    RETRIEVER = "Retriever"
    EXTRACTOR = "Extractor"
    SUMMARIZER = "Summarizer"


class _Payload(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class DecisionPayload(_Payload):
    kind: Literal["decision"] = "decision"
    decision: StrategistDecision


class ActivitiesPayload(_Payload):
    kind: Literal["activities"] = "activities"
    activities: tuple[Activity, ...]


class AttributesPayload(_Payload):
    kind: Literal["attributes"] = "attributes"
    attributes: tuple[InferredAttribute, ...]


class ProfilePayload(_Payload):
    kind: Literal["profile"] = "profile"
    profile: Profile


Payload = Annotated[
    Union[DecisionPayload, ActivitiesPayload, AttributesPayload, ProfilePayload],
    Field(discriminator="kind"),
]

_PAYLOAD_FOR_SENDER = {
    Sender.STRATEGIST: "decision",
    Sender.RETRIEVER: "activities",
    Sender.EXTRACTOR: "attributes",
    Sender.SUMMARIZER: "profile",
}


class MessageEnvelope(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sender: Sender
    payload: Payload

    @model_validator(mode="after")
    def _payload_matches_sender(self) -> "MessageEnvelope":
        expected = _PAYLOAD_FOR_SENDER[self.sender]
        if self.payload.kind != expected:
            raise ValueError(f"{self.sender.value} must send a {expected} payload, not {self.payload.kind}")
        return self


def envelope_for(sender: Sender, value: Any) -> MessageEnvelope:
    """Wrap a typed agent result in the envelope its sender is allowed to send."""
    if sender is Sender.STRATEGIST:
        payload: Any = DecisionPayload(decision=value)
    elif sender is Sender.RETRIEVER:
        payload = ActivitiesPayload(activities=tuple(value))
    elif sender is Sender.EXTRACTOR:
        payload = AttributesPayload(attributes=tuple(value))
    else:
        payload = ProfilePayload(profile=value)
    return MessageEnvelope(sender=sender, payload=payload)


def encode(envelope: MessageEnvelope) -> str:
    return canonical_json(envelope.model_dump(mode="json"))


def decode(text: str) -> MessageEnvelope:
    return MessageEnvelope.model_validate_json(text)


# --- JSON extraction ---


def _balanced_end(text: str, start: int) -> int | None:
    """Index of the brace closing the object opened at `start`, honouring JSON strings."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def _first_object(text: str) -> dict | None:
    """First top-level brace group that parses as an object; nested groups are never candidates."""
    start = text.find("{")
    while start != -1:
        end = _balanced_end(text, start)
        if end is None:
            return None
        try:
            obj = json.loads(text[start : end + 1])
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict):
            return obj
        start = text.find("{", end + 1)
    return None


def extract_json_object(raw: str) -> dict:
    """First well-formed top-level JSON object in an LLM reply, Markdown fences stripped first."""
    if not isinstance(raw, str) or not raw.strip():
        raise NoJsonFound("empty reply")
    for fenced in _FENCE_RE.findall(raw):
        obj = _first_object(fenced)
        if obj is not None:
            return obj
    obj = _first_object(raw)
    if obj is None:
        raise NoJsonFound("no JSON object in reply")
    return obj


# --- reply models ---


def _action_from_text(value: Any) -> Any:
    if not isinstance(value, str):
        return value
    action = {a.value.lower(): a for a in Action}.get(value.strip().lower())
    if action is None:
        raise PydanticCustomError("unknown_action", "unknown action {action}", {"action": value})
    return action


def _category_from_text(value: Any) -> Any:
    if not isinstance(value, str):
        return value
    category = {c.value.lower(): c for c in Category}.get(value.strip().lower())
    if category is None:
        raise PydanticCustomError("unknown_category", "unknown category {category}", {"category": value})
    return category


def _non_blank(value: str) -> str:
    try:
        normalize("value", value)
    except InvalidValue as e:
        raise PydanticCustomError("blank", str(e)) from e
    return value.strip()


def _as_list(value: Any) -> Any:
    return [value] if isinstance(value, str) else value


NonBlankStr = Annotated[StrictStr, AfterValidator(_non_blank)]


class _Reply(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")


class StrategistReply(_Reply):
    action: Annotated[Action, BeforeValidator(_action_from_text)]
    rationale: StrictStr
    instructions: StrictStr | None = None

    def to_decision(self) -> StrategistDecision:
        return StrategistDecision(action=self.action, rationale=self.rationale, instructions=self.instructions or "")


class EvidenceReply(_Reply):
    seq: Annotated[StrictInt, Field(ge=1)]
    quote: StrictStr | None = None


class AttributeReply(_Reply):
    type: NonBlankStr
    value: Annotated[list[NonBlankStr], Field(min_length=1), BeforeValidator(_as_list)]
    confidence: Annotated[StrictInt, Field(ge=1, le=5)]
    evidence: list[EvidenceReply] | None = None

    def to_attribute(self, warnings: list[str] | None = None) -> InferredAttribute:
        values = self.value
        if len(values) > MAX_VALUES:
            message = f"{self.type!r}: {len(values)} candidate values, keeping the first {MAX_VALUES}"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
            values = values[:MAX_VALUES]
        evidence = tuple(Evidence(seq=e.seq, quote=e.quote or "") for e in self.evidence or ())
        return InferredAttribute(
            attr_type=self.type, values=tuple(values), confidence=self.confidence, evidence=evidence
        )


class ExtractorReply(_Reply):
    attributes: list[AttributeReply]


class CategoryReply(_Reply):
    category: Annotated[Category, BeforeValidator(_category_from_text)]


# --- reply parsers ---


def _field_name(loc: tuple[int | str, ...]) -> str:
    """Dotted field path without list indices; attribute fields are named relative to their item."""
    parts = [str(p) for p in loc if not isinstance(p, int)]
    if len(parts) > 1 and parts[0] == "attributes":
        parts = parts[1:]
    return ".".join(parts) or "reply"


def _protocol_error(error: ValidationError) -> ProtocolError:
    """The first validation failure as the protocol error the repair loop reports."""
    first = error.errors()[0]
    name = _field_name(first["loc"])
    if first["type"] == "missing":
        return MissingField(name)
    if first["type"] == "unknown_action":
        return UnknownAction(first["input"])
    if first["type"] == "unknown_category":
        return UnknownCategory(first["input"])
    if name == "confidence":
        return ConfidenceInvalid(first["input"])
    return InvalidField(name, first["msg"])


def _validate(model: type[R], raw: str) -> R:
    obj = extract_json_object(raw)
    try:
        return model.model_validate(obj)
    except ValidationError as e:
        raise _protocol_error(e) from e


def parse_strategist(raw: str) -> StrategistDecision:
    return _validate(StrategistReply, raw).to_decision()


def parse_extractor(raw: str, warnings: list[str] | None = None) -> list[InferredAttribute]:
    """Parse an Extractor (or Summarizer) reply into attributes.

    More than three candidate values are truncated to the first three and a warning is recorded.
    """
    return [item.to_attribute(warnings) for item in _validate(ExtractorReply, raw).attributes]


def parse_category(raw: str) -> Category:
    return _validate(CategoryReply, raw).category


# --- repair loop ---


@dataclass
class RepairResult(Generic[T]):
    value: T
    raw_outputs: list[str]
    errors: list[str] = field(default_factory=list)

    @property
    def attempts(self) -> int:
        return len(self.raw_outputs)


# A call receives the failed attempts so far as (raw reply, corrective prompt) pairs.
RepairCall = Callable[[list[tuple[str, str]]], Awaitable[str]]


async def repair_loop(call: RepairCall, parser: Callable[[str], T], max_retries: int) -> RepairResult[T]:
    """Issue `call` until `parser` accepts the reply, at most `max_retries` + 1 times.

    After a failure the next call sees the failed reply together with a corrective prompt naming the
    parse error. Backend errors propagate unchanged.
    """
    if max_retries < 0:
        raise InvalidValue(f"max_retries must be >= 0, got {max_retries}")
    raw_outputs: list[str] = []
    errors: list[str] = []
    corrections: list[tuple[str, str]] = []
    last_error: ProtocolError | None = None
    for attempt in range(1, max_retries + 2):
        raw = await call(list(corrections))
        raw_outputs.append(raw)
        try:
            value = parser(raw)
        except ProtocolError as e:
            last_error = e
            errors.append(e.label)
            logger.warning(f"Attempt {attempt}/{max_retries + 1} unusable: {e.label}")
            logger.debug(f"Unusable reply: {raw[:500]}")
            corrections.append((raw, CORRECTIVE_PROMPT.format(error=e.label)))
            continue
        return RepairResult(value=value, raw_outputs=raw_outputs, errors=errors)
    raise RepairExhausted(raw_outputs, last_error)
