"""Domain types shared by every pseudoscope module.

All models are frozen pydantic models: immutable values that are safe to share across tasks and
threads. Serialization to the wire format lives in `pseudoscope.protocol`.
"""

import logging
from collections.abc import Mapping
from datetime import datetime, timezone
from enum import Enum
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, RootModel, StringConstraints, field_validator, model_validator

from .errors import InvalidValue

logger = logging.getLogger(__name__)

MAX_VALUES = 3
MAX_QUOTE_CHARS = 300
_TRAILING_PUNCTUATION = ".,;:!? "

SYNTHPAI_TYPES: tuple[str, ...] = (
    "Age",
    "Sex",
    "Education",
    "Income Level",
    "Relationship Status",
    "Place of Birth",
    "Location",
    "Occupation",
)

NonEmptyStr = Annotated[str, StringConstraints(min_length=1)]
Confidence = Annotated[int, Field(ge=1, le=5, strict=True)]
Level = Annotated[int, Field(ge=1, le=5, strict=True)]
Score = Annotated[int, Field(ge=1, le=10, strict=True)]


def normalize(attr_type: str, raw_value: str) -> str:
    """Canonical form of an attribute value used for dedup and matching.

    Lowercases, collapses whitespace and strips trailing punctuation. Deterministic and idempotent.
    `attr_type` is accepted so type-specific rules can be added without changing callers.
    """
    if raw_value is None or not raw_value.strip():
        raise InvalidValue(f"Empty value for attribute type {attr_type!r}")
    value = " ".join(raw_value.lower().split()).rstrip(_TRAILING_PUNCTUATION)
    if not value:
        raise InvalidValue(f"Value {raw_value!r} for {attr_type!r} is empty after normalization")
    return value


def normalize_type(attr_type: str) -> str:
    """Canonical form of an attribute type name (same rules as values)."""
    return normalize("type", attr_type)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ActivityKind(str, Enum):
    POST = "post"
    COMMENT = "comment"


class Activity(_Frozen):
    """One post or comment of a user archive, numbered chronologically from 1."""

    id: NonEmptyStr
    seq: Annotated[int, Field(ge=1, strict=True)]
    timestamp: datetime
    kind: ActivityKind
    text: str
    thread_context: str | None = None
    venue: str | None = None

    @field_validator("timestamp")
    @classmethod
    def _as_utc(cls, value: datetime) -> datetime:
        if value.tzinfo is None:
            return value.replace(tzinfo=timezone.utc)
        return value.astimezone(timezone.utc)

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("activity text is empty after trimming")
        return value

    def render(self) -> str:
        """Prompt rendering: sequence number first so agents can cite evidence by seq."""
        where = f" in {self.venue}" if self.venue else ""
        lines = [f"[{self.seq}] {self.kind.value}{where} at {self.timestamp.strftime('%Y-%m-%d %H:%M')}:"]
        if self.thread_context:
            lines.append(f"  replying to: {self.thread_context}")
        lines.append(f"  {self.text}")
        return "\n".join(lines)


class Evidence(_Frozen):
    seq: Annotated[int, Field(ge=1, strict=True)]
    quote: str = ""

    @field_validator("quote")
    @classmethod
    def _cap_quote(cls, value: str) -> str:
        return value[:MAX_QUOTE_CHARS]


class InferredAttribute(_Frozen):
    """A typed claim about the user: up to three candidate values, most likely first."""

    attr_type: NonEmptyStr
    values: tuple[NonEmptyStr, ...] = Field(min_length=1, max_length=MAX_VALUES)
    confidence: Confidence
    evidence: tuple[Evidence, ...] = ()

    @field_validator("attr_type")
    @classmethod
    def _type_not_blank(cls, value: str) -> str:
        normalize_type(value)
        return value

    @field_validator("values")
    @classmethod
    def _values_not_blank(cls, values: tuple[str, ...]) -> tuple[str, ...]:
        for value in values:
            normalize("value", value)
        return values

    @property
    def primary(self) -> str:
        return self.values[0]

    def key(self) -> tuple[str, str]:
        """Dedup key: (normalized type, normalized primary value)."""
        return normalize_type(self.attr_type), normalize(self.attr_type, self.primary)

    def evidence_seqs(self) -> set[int]:
        return {e.seq for e in self.evidence}


class Profile(_Frozen):
    """The long-term memory of a run and its final output: the inferred attribute set of one user."""

    user_id: NonEmptyStr
    attributes: tuple[InferredAttribute, ...] = ()

    @model_validator(mode="after")
    def _no_duplicates(self) -> "Profile":
        seen: set[tuple[str, str]] = set()
        for attribute in self.attributes:
            key = attribute.key()
            if key in seen:
                raise ValueError(f"duplicate attribute {key} in profile")
            seen.add(key)
        return self

    def __len__(self) -> int:
        return len(self.attributes)


class Action(str, Enum):
    RETRIEVE = "Retrieve"
    INFER = "Infer"
    REFINE = "Refine"
    FINISH = "Finish"


class StrategistDecision(_Frozen):
    action: Action
    rationale: str = ""
    instructions: str = ""


class Category(str, Enum):
    IDENTIFIER = "Identifier"
    DEMOGRAPHIC = "Demographic"
    BACKGROUND = "Background"
    GEOGRAPHIC = "Geographic"
    HEALTH = "Health"
    FINANCE = "Finance"
    RELATIONSHIP = "Relationship"
    BEHAVIOR = "Behavior"
    SECRETS = "Secrets"
    ASSET = "Asset"

    @property
    def is_pii(self) -> bool:
        return self in PII_CATEGORIES

    @property
    def group(self) -> str:
        return "PII" if self.is_pii else "SPI"


PII_CATEGORIES = frozenset({Category.IDENTIFIER, Category.DEMOGRAPHIC, Category.BACKGROUND, Category.GEOGRAPHIC})
SPI_CATEGORIES = frozenset(Category) - PII_CATEGORIES


class CategoryScore(_Frozen):
    sensitivity: Score
    identifiability: Score


class ScoreTable(RootModel[dict[Category, CategoryScore]]):
    """Sensitivity and identifiability (1-10) for each of the ten categories."""

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _complete(self) -> "ScoreTable":
        missing = [c.value for c in Category if c not in self.root]
        if missing:
            raise ValueError(f"score table is missing categories: {', '.join(missing)}")
        return self

    def __getitem__(self, category: Category) -> CategoryScore:
        return self.root[category]


class GroundTruthLabel(_Frozen):
    user_id: NonEmptyStr
    attr_type: Literal[
        "Age", "Sex", "Education", "Income Level", "Relationship Status", "Place of Birth", "Location", "Occupation"
    ]
    true_value: NonEmptyStr
    hardness: Level
    certainty: Level


AuxRecord = dict[str, str]
AuxDataset = list[AuxRecord]


def normalize_record(record: Mapping[str, str | None]) -> AuxRecord:
    """Normalize the keys and values of an auxiliary record; empty values are dropped."""
    normalized: AuxRecord = {}
    for key, value in record.items():
        if value is None or not str(value).strip():
            continue
        normalized[normalize_type(key)] = normalize(key, str(value))
    return normalized
