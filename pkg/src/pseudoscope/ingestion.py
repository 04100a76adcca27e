"""Activity sources, dataset loaders and the noise-injection and entity-masking utilities.

Archive format (JSON-Lines, UTF-8). An optional first line carries metadata:

    {"_meta": {"user_id": "u1", "consent": true, "fixture": false}}

Every other non-blank line is one activity:

    {"id": "c1", "timestamp": "2023-05-01T12:00:00Z", "kind": "comment", "text": "...",
     "thread_context": "parent text (optional)", "venue": "subreddit (optional)"}

Sequence numbers are assigned 1..N by timestamp, ties broken by file order.
"""

import json
import logging
import math
import os
import random
import re
from abc import ABC, abstractmethod
from collections.abc import Iterable
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Protocol

import backoff
import httpx
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import (
    EmptyArchive,
    InvalidValue,
    MalformedRecord,
    OverlappingSpans,
    PoolTooSmall,
    SchemaMismatch,
    SourceError,
    SpanOutOfBounds,
)
from .models import SYNTHPAI_TYPES, Activity, ActivityKind, GroundTruthLabel

logger = logging.getLogger(__name__)

Cursor = int | str | None
Span = tuple[int, int]
MASK = "***"

SYNTHPAI_COUNTS = (300, 7800, 700)  # users, minimum comments, labels in the public release
_SYNTHETIC_EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)


class ArchiveMeta(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")

    user_id: str | None = None
    consent: bool = False
    fixture: bool = False


class ArchiveRecord(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str = Field(min_length=1)
    timestamp: datetime
    kind: ActivityKind = ActivityKind.COMMENT
    text: str
    thread_context: str | None = None
    venue: str | None = None

    def to_activity(self, seq: int) -> Activity:
        return Activity(seq=seq, **self.model_dump())


class ActivitySource(ABC):
    """Paginated, single-consumer reader of one user's activities in seq order.

    Cursors are JSON-serializable so a run can persist them and resume from any of them.
    """

    user_id: str

    @abstractmethod
    async def next(self, cursor: Cursor, limit: int) -> tuple[list[Activity], Cursor, bool]:
        """Up to `limit` activities after `cursor`, the next cursor, and whether none remain."""

    def size(self) -> int | None:
        """Total activity count if known up front."""
        return None

    async def all_activities(self, page_size: int = 100) -> list[Activity]:
        activities: list[Activity] = []
        cursor: Cursor = None
        exhausted = False
        while not exhausted:
            batch, cursor, exhausted = await self.next(cursor, page_size)
            activities.extend(batch)
        return activities


def _check_limit(limit: int) -> None:
    if limit <= 0:
        raise InvalidValue(f"batch size must be positive, got {limit}")


class InMemorySource(ActivitySource):
    def __init__(self, activities: Iterable[Activity], user_id: str = "user"):
        self.activities = sorted(activities, key=lambda a: a.seq)
        self.user_id = user_id

    def size(self) -> int:
        return len(self.activities)

    async def next(self, cursor: Cursor, limit: int) -> tuple[list[Activity], Cursor, bool]:
        _check_limit(limit)
        start = int(cursor or 0)
        batch = self.activities[start : start + limit]
        end = start + len(batch)
        return batch, end, end >= len(self.activities)


@dataclass(frozen=True)
class _IndexEntry:
    timestamp: datetime
    line: int
    offset: int


@dataclass
class ArchiveSource(ActivitySource):
    """File-backed source. Only the (timestamp, line, offset) index stays in memory."""

    path: Path
    user_id: str
    meta: ArchiveMeta
    index: list[_IndexEntry] = field(repr=False)

    def size(self) -> int:
        return len(self.index)

    def _read(self, entry: _IndexEntry, seq: int) -> Activity:
        with open(self.path, "rb") as f:
            f.seek(entry.offset)
            line = f.readline()
        return ArchiveRecord.model_validate_json(line).to_activity(seq)

    async def next(self, cursor: Cursor, limit: int) -> tuple[list[Activity], Cursor, bool]:
        _check_limit(limit)
        start = int(cursor or 0)
        entries = self.index[start : start + limit]
        batch = [self._read(entry, start + i + 1) for i, entry in enumerate(entries)]
        end = start + len(batch)
        return batch, end, end >= len(self.index)


def _parse_meta(line: bytes) -> ArchiveMeta | None:
    try:
        obj = json.loads(line)
    except ValueError:
        return None
    if isinstance(obj, dict) and set(obj) == {"_meta"} and isinstance(obj["_meta"], dict):
        return ArchiveMeta.model_validate(obj["_meta"])
    return None


def open_archive(path: str | Path, allow_empty: bool = False) -> ArchiveSource:
    """Index a JSON-Lines activity archive and number its activities chronologically.

    Raises MalformedRecord (with the 1-based line number) for unparsable records or duplicate ids,
    and EmptyArchive when there are no activities unless `allow_empty` is set.
    """
    path = Path(path)
    meta: ArchiveMeta | None = None
    ids: set[str] = set()
    entries: list[_IndexEntry] = []
    first_content_line = True
    with open(path, "rb") as f:
        offset = 0
        for line_number, line in enumerate(iter(f.readline, b""), start=1):
            line_offset = offset
            offset += len(line)
            if not line.strip():
                continue
            if first_content_line:
                first_content_line = False
                try:
                    meta = _parse_meta(line)
                except ValidationError as e:
                    raise MalformedRecord(line_number, f"invalid metadata: {e.errors()[0]['msg']}") from e
                if meta is not None:
                    continue
            try:
                record = ArchiveRecord.model_validate_json(line)
                Activity(seq=1, **record.model_dump())
            except ValidationError as e:
                raise MalformedRecord(line_number, str(e.errors()[0]["msg"])) from e
            if record.id in ids:
                raise MalformedRecord(line_number, f"duplicate id {record.id!r}")
            ids.add(record.id)
            entries.append(_IndexEntry(record.timestamp, line_number, line_offset))

    if not entries and not allow_empty:
        raise EmptyArchive(f"{path} contains no activities")
    meta = meta or ArchiveMeta()
    entries.sort(key=lambda e: (_as_utc(e.timestamp), e.line))
    user_id = meta.user_id or path.stem
    logger.info(f"Indexed {len(entries)} activities for {user_id} from {path}")
    return ArchiveSource(path=path, user_id=user_id, meta=meta, index=entries)


def _as_utc(value: datetime) -> datetime:
    return value.replace(tzinfo=timezone.utc) if value.tzinfo is None else value.astimezone(timezone.utc)


class HttpActivitySource(ActivitySource):
    """Generic paginated export endpoint controlled by the auditor.

    GET <url>?limit=N[&cursor=C] with a bearer token; the response is
    {"activities": [<activity with seq>, ...], "next_cursor": "..." | null}.
    """

    def __init__(
        self,
        url: str,
        user_id: str,
        token_env: str = "PSEUDOSCOPE_SOURCE_TOKEN",
        timeout: float = 30.0,
        max_attempts: int = 4,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.url = url
        self.user_id = user_id
        self.token_env = token_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self._transport = transport

    async def next(self, cursor: Cursor, limit: int) -> tuple[list[Activity], Cursor, bool]:
        _check_limit(limit)
        params: dict[str, str | int] = {"limit": limit}
        if cursor is not None:
            params["cursor"] = str(cursor)
        token = os.environ.get(self.token_env)
        headers = {"Authorization": f"Bearer {token}"} if token else {}

        @backoff.on_exception(backoff.expo, (httpx.TimeoutException, httpx.TransportError), max_tries=self.max_attempts)
        async def fetch(client: httpx.AsyncClient) -> httpx.Response:
            return await client.get(self.url, params=params)

        async with httpx.AsyncClient(headers=headers, timeout=self.timeout, transport=self._transport) as client:
            try:
                response = await fetch(client)
                response.raise_for_status()
                body = response.json()
            except (httpx.HTTPError, ValueError) as e:
                raise SourceError(f"Fetching activities from {self.url} failed: {e}") from e
        try:
            activities = [Activity.model_validate(item) for item in body["activities"]]
        except (KeyError, TypeError, ValidationError) as e:
            raise SourceError(f"Unexpected page shape from {self.url}: {e}") from e
        next_cursor = body.get("next_cursor")
        return activities, next_cursor, next_cursor is None


def renumber(records: Iterable[ArchiveRecord]) -> list[Activity]:
    """Assign seqs 1..N by timestamp, ties broken by input order."""
    ordered = sorted(enumerate(records), key=lambda pair: (_as_utc(pair[1].timestamp), pair[0]))
    return [record.to_activity(seq) for seq, (_, record) in enumerate(ordered, start=1)]


# --- SynthPAI ---

SYNTHPAI_FILE = "synthpai.jsonl"

# Human-review keys of the published release, mapped onto the eight label types.
SYNTHPAI_REVIEW_KEYS: dict[str, str] = {
    "age": "Age",
    "sex": "Sex",
    "city_country": "Location",
    "birth_city_country": "Place of Birth",
    "education": "Education",
    "occupation": "Occupation",
    "income_level": "Income Level",
    "relationship_status": "Relationship Status",
}


class SynthPAIReview(BaseModel):
    model_config = ConfigDict(extra="ignore")

    estimate: str | int | float | None = None
    hardness: int = 0
    certainty: int = 0

    @property
    def is_label(self) -> bool:
        return self.hardness > 0 and self.estimate is not None and bool(str(self.estimate).strip())


class SynthPAIComment(BaseModel):
    model_config = ConfigDict(extra="ignore")

    author: str = Field(min_length=1)
    text: str
    id: str | None = None
    parent_id: str | None = None
    thread_id: str | None = None
    username: str | None = None
    subreddit: str | None = None
    created_utc: float | None = None
    profile: dict[str, Any] = Field(default_factory=dict)
    reviews: dict[str, dict[str, SynthPAIReview]] = Field(default_factory=dict)


@dataclass
class SynthPAIDataset:
    archives: dict[str, list[Activity]]
    labels: list[GroundTruthLabel]

    @property
    def comment_count(self) -> int:
        return sum(len(activities) for activities in self.archives.values())

    def labels_for(self, user_id: str) -> list[GroundTruthLabel]:
        return [label for label in self.labels if label.user_id == user_id]


def read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    """(line number, object) for every non-blank line; bad JSON or non-objects raise SchemaMismatch."""
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise SchemaMismatch(str(path), f"line {line_number}: invalid JSON ({e})") from e
            if not isinstance(obj, dict):
                raise SchemaMismatch(str(path), f"line {line_number}: expected an object")
            yield line_number, obj


@dataclass
class _ChosenReview:
    line: int
    review: SynthPAIReview
    profile_value: Any


def _prefers(new: SynthPAIReview, old: _ChosenReview | None) -> bool:
    """Higher certainty wins, then lower hardness; the earlier review keeps a full tie."""
    if old is None:
        return True
    return (new.certainty, -new.hardness) > (old.review.certainty, -old.review.hardness)


def _true_value(chosen: _ChosenReview) -> str:
    if chosen.profile_value is not None and str(chosen.profile_value).strip():
        return str(chosen.profile_value).strip()
    return str(chosen.review.estimate).strip()


def load_synthpai(path: str | Path, expected_counts: tuple[int, int, int] | None = None) -> SynthPAIDataset:
    """Load the published SynthPAI release: `<path>/synthpai.jsonl`, or that file itself.

    Every line is one comment carrying its author's profile and the human reviews
    `reviews.human.{key: {estimate, hardness, certainty}}`. A review with hardness 0 or an empty estimate
    is not a label. Per user and type the review with the highest certainty is kept, ties going to the
    lower hardness; the true value comes from the author's profile, falling back to the estimate.

    Comments without `created_utc` get synthetic, strictly increasing timestamps in file order, and a
    reply's parent text becomes its thread context. With `expected_counts` = (users, minimum comments,
    labels) the totals are validated as well.
    """
    source = Path(path)
    if source.is_dir():
        source = source / SYNTHPAI_FILE
    if not source.is_file():
        raise SchemaMismatch(str(source), "file not found")

    comments: list[tuple[int, SynthPAIComment]] = []
    for line_number, obj in read_jsonl(source):
        try:
            comments.append((line_number, SynthPAIComment.model_validate(obj)))
        except ValidationError as e:
            raise SchemaMismatch(str(source), f"line {line_number}: {e.errors()[0]['msg']}") from e
    text_by_id = {comment.id: comment.text for _, comment in comments if comment.id}

    per_user: dict[str, list[ArchiveRecord]] = {}
    chosen: dict[str, dict[str, _ChosenReview]] = {}
    for line_number, comment in comments:
        if comment.created_utc is None:
            timestamp = _SYNTHETIC_EPOCH + timedelta(minutes=line_number)
        else:
            timestamp = datetime.fromtimestamp(comment.created_utc, tz=timezone.utc)
        record = ArchiveRecord(
            id=comment.id or f"{comment.author}-{line_number}",
            timestamp=timestamp,
            kind=ActivityKind.COMMENT,
            text=comment.text,
            thread_context=text_by_id.get(comment.parent_id) if comment.parent_id else None,
            venue=comment.subreddit,
        )
        per_user.setdefault(comment.author, []).append(record)
        user_reviews = chosen.setdefault(comment.author, {})
        for key, review in comment.reviews.get("human", {}).items():
            attr_type = SYNTHPAI_REVIEW_KEYS.get(key)
            if attr_type is None or not review.is_label:
                continue
            if _prefers(review, user_reviews.get(attr_type)):
                user_reviews[attr_type] = _ChosenReview(line_number, review, comment.profile.get(key))

    labels: list[GroundTruthLabel] = []
    for user_id, user_reviews in chosen.items():
        for attr_type in SYNTHPAI_TYPES:
            if attr_type not in user_reviews:
                continue
            review = user_reviews[attr_type]
            try:
                label = GroundTruthLabel(
                    user_id=user_id,
                    attr_type=attr_type,
                    true_value=_true_value(review),
                    hardness=review.review.hardness,
                    certainty=review.review.certainty,
                )
            except ValidationError as e:
                raise SchemaMismatch(str(source), f"line {review.line}: {e.errors()[0]['msg']}") from e
            labels.append(label)

    try:
        archives = {user_id: renumber(records) for user_id, records in per_user.items()}
    except ValidationError as e:
        raise SchemaMismatch(str(source), str(e.errors()[0]["msg"])) from e
    dataset = SynthPAIDataset(archives=archives, labels=labels)
    logger.info(
        f"Loaded SynthPAI data: {len(archives)} users, {dataset.comment_count} comments, {len(labels)} labels"
    )

    if expected_counts is not None:
        users, min_comments, label_count = expected_counts
        if len(archives) != users:
            raise SchemaMismatch(str(source), f"expected {users} users, found {len(archives)}")
        if dataset.comment_count < min_comments:
            raise SchemaMismatch(
                str(source), f"expected at least {min_comments} comments, found {dataset.comment_count}"
            )
        if len(labels) != label_count:
            raise SchemaMismatch(str(source), f"expected {label_count} labels, found {len(labels)}")
    return dataset


# --- noise injection ---


def inject_noise(
    target: list[Activity],
    pool: list[Activity],
    fraction: float = 0.10,
    seed: int | str = 0,
    user_id: str = "",
) -> list[Activity]:
    """Replace floor(fraction x N) activities of `target` with activities drawn from `pool`.

    Replaced slots keep their seq and timestamp. The generator is seeded per user, so the result
    depends only on (seed, user_id, target, pool).
    """
    if not 0 <= fraction <= 1:
        raise InvalidValue(f"fraction must be in [0, 1], got {fraction}")
    target_ids = {a.id for a in target}
    if any(a.id in target_ids for a in pool):
        raise InvalidValue("noise pool overlaps the target archive")
    count = math.floor(Fraction(repr(fraction)) * len(target))
    if count == 0:
        return list(target)
    if len(pool) < count:
        raise PoolTooSmall(f"need {count} replacement activities, pool has {len(pool)}")

    rng = random.Random(f"{seed}:{user_id}")
    positions = sorted(rng.sample(range(len(target)), count))
    replacements = rng.sample(pool, count)
    noisy = list(target)
    for position, replacement in zip(positions, replacements):
        slot = target[position]
        noisy[position] = replacement.model_copy(
            update={"id": f"noise:{replacement.id}", "seq": slot.seq, "timestamp": slot.timestamp}
        )
    logger.debug(f"Replaced {count}/{len(target)} activities of {user_id or 'target'} at {positions}")
    return noisy


# --- entity masking ---


def mask_entities(text: str, spans: Iterable[Span]) -> str:
    """Replace each [start, end) span with "***"; everything outside the spans is kept as-is."""
    ordered = sorted(spans)
    for start, end in ordered:
        if not 0 <= start < end <= len(text):
            raise SpanOutOfBounds(f"span ({start}, {end}) outside text of length {len(text)}")
    for (_, previous_end), (start, end) in zip(ordered, ordered[1:]):
        if start < previous_end:
            raise OverlappingSpans(f"span ({start}, {end}) overlaps a span ending at {previous_end}")
    pieces = []
    position = 0
    for start, end in ordered:
        pieces.append(text[position:start])
        pieces.append(MASK)
        position = end
    pieces.append(text[position:])
    return "".join(pieces)


class EntityDetector(Protocol):
    def detect(self, text: str, index: int) -> list[Span]:
        """Entity spans in `text`; `index` is the record's 1-based line number in its archive."""
        ...


def merge_spans(spans: Iterable[Span]) -> list[Span]:
    merged: list[list[int]] = []
    for start, end in sorted(spans):
        if merged and start < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(start, end) for start, end in merged]


class BuiltinEntityDetector:
    """Regex detector for emails, phone numbers, URLs and capitalized two-word names."""

    PATTERNS = (
        re.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+"),
        re.compile(r"(?<!\w)(?:\+?\d{1,3}[ .-]?)?(?:\(\d{3}\)|\d{3})[ .-]?\d{3}[ .-]?\d{4}(?!\w)"),
        re.compile(r"https?://[^\s)>\]]+|www\.[^\s)>\]]+"),
        re.compile(r"\b[A-Z][a-z]+ [A-Z][a-z]+\b"),
    )

    def detect(self, text: str, index: int = 0) -> list[Span]:
        return merge_spans(m.span() for pattern in self.PATTERNS for m in pattern.finditer(text))


class SpanFileDetector:
    """Precomputed spans (e.g. from an external NER service), JSONL of {"line": n, "spans": [[s, e], ...]}."""

    def __init__(self, path: str | Path):
        self.spans: dict[int, list[Span]] = {}
        for line_number, obj in read_jsonl(Path(path)):
            try:
                self.spans[int(obj["line"])] = [(int(s), int(e)) for s, e in obj["spans"]]
            except (KeyError, TypeError, ValueError) as e:
                raise SchemaMismatch(str(path), f"line {line_number}: expected line and spans") from e

    def detect(self, text: str, index: int) -> list[Span]:
        return self.spans.get(index, [])


class PresidioEntityDetector:
    """NER detector backed by a presidio `AnalyzerEngine` (optional `ner` extra).

    `analyzer` is anything with presidio's `analyze(text=, language=, score_threshold=, entities=)`
    returning results with `start` and `end`; the default engine is built on first use.
    """

    def __init__(
        self,
        analyzer: Any = None,
        language: str = "en",
        score_threshold: float = 0.5,
        entities: list[str] | None = None,
    ):
        if not 0 <= score_threshold <= 1:
            raise InvalidValue(f"score_threshold must be in [0, 1], got {score_threshold}")
        self._analyzer = analyzer
        self.language = language
        self.score_threshold = score_threshold
        self.entities = entities

    @property
    def analyzer(self) -> Any:
        if self._analyzer is None:
            try:
                from presidio_analyzer import AnalyzerEngine
            except ImportError as e:
                raise InvalidValue("The presidio detector needs presidio-analyzer (the ner extra)") from e
            logger.info("Initializing presidio analyzer")
            self._analyzer = AnalyzerEngine()
        return self._analyzer

    def detect(self, text: str, index: int = 0) -> list[Span]:
        results = self.analyzer.analyze(
            text=text, language=self.language, score_threshold=self.score_threshold, entities=self.entities
        )
        if results:
            logger.debug(f"Line {index}: presidio found {', '.join(sorted({r.entity_type for r in results}))}")
        return merge_spans((r.start, r.end) for r in results)


def mask_archive(path: str | Path, detector: EntityDetector, out_path: str | Path) -> int:
    """Write a copy of the archive with detected entities in activity texts masked.

    Returns the number of masked spans. The metadata line and record order are preserved.
    """
    masked_spans = 0
    lines_out = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                lines_out.append(line)
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise MalformedRecord(line_number, f"invalid JSON ({e})") from e
            if isinstance(obj, dict) and isinstance(obj.get("text"), str):
                spans = detector.detect(obj["text"], line_number)
                obj["text"] = mask_entities(obj["text"], spans)
                masked_spans += len(spans)
            lines_out.append(json.dumps(obj, ensure_ascii=False) + "\n")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text("".join(lines_out), encoding="utf-8")
    logger.info(f"Masked {masked_spans} entity spans from {path} into {out_path}")
    return masked_spans
