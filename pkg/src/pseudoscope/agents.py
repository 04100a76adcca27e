"""The four agent roles plus the categorizer and FTI prompts.

Each role assembles a prompt from its template, makes gateway calls through the repair loop and
returns a typed result. Agents hold no state between calls: step counters and transcript records
live in the `CallLog` the orchestrator hands in.
"""

import hashlib
import logging
import re
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, TypeVar

from pydantic import BaseModel, ConfigDict, Field

from .errors import InvalidValue, ProtocolError, RepairExhausted
from .ingestion import ActivitySource, Cursor
from .llm.gateway import ChatMessage, ChatRequest, Gateway, Role, UsageRecord
from .models import MAX_VALUES, Activity, Evidence, InferredAttribute, Profile, StrategistDecision, normalize
from .protocol import Sender, envelope_for, parse_extractor, parse_strategist, repair_loop
from .utils import canonical_json

logger = logging.getLogger(__name__)

T = TypeVar("T")

STRATEGIST = "strategist"
RETRIEVER = "retriever"
EXTRACTOR = "extractor"
SUMMARIZER = "summarizer"
CATEGORIZER = "categorizer"
FTI = "fti"

ROLE_PLACEHOLDERS: dict[str, frozenset[str]] = {
    STRATEGIST: frozenset({"progress_summary"}),
    EXTRACTOR: frozenset({"batch_text", "instructions", "inferred_attributes"}),
    SUMMARIZER: frozenset({"inferred_attributes", "new_attributes"}),
    CATEGORIZER: frozenset({"attribute"}),
    FTI: frozenset({"batch_text", "schema"}),
}

DEFAULT_INSTRUCTIONS = "Infer all personal attributes supported by the activities."
NO_ATTRIBUTES = "(none yet)"

# Templates are zero-shot: no worked examples.
_FEW_SHOT_RE = re.compile(r"\bexamples?\s*:", re.IGNORECASE)


class PromptTemplate(Template):
    """`{placeholder}` templates. Only lowercase identifiers in braces are placeholders, so JSON
    schemas in the template text pass through untouched."""

    flags = 0
    pattern = r"""
        \{(?:
          (?P<escaped>(?!))|
          (?P<named>[a-z_][a-z0-9_]*)\}|
          (?P<braced>(?!))|
          (?P<invalid>(?!))
        )
    """

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(m.group("named") for m in self.pattern.finditer(self.template))


class PromptLibrary:
    """Role templates loaded from a directory (default: the packaged `assets/prompts`)."""

    def __init__(self, templates: dict[str, str]):
        self.templates = {role: PromptTemplate(text) for role, text in templates.items()}
        for role, expected in ROLE_PLACEHOLDERS.items():
            if role not in self.templates:
                raise InvalidValue(f"Missing prompt template for role {role!r}")
            found = self.templates[role].placeholders
            if found != expected:
                raise InvalidValue(
                    f"Template {role!r} has placeholders {sorted(found)}, expected {sorted(expected)}"
                )
        for role, template in self.templates.items():
            if _FEW_SHOT_RE.search(template.template):
                raise InvalidValue(f"Template {role!r} contains a worked example; templates must be zero-shot")
        self.template_hash = hashlib.sha256(canonical_json(sorted(templates.items())).encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptLibrary":
        if directory is None:
            root: Any = resources.files("pseudoscope.assets").joinpath("prompts")
        else:
            root = Path(directory)
        templates = {role: root.joinpath(f"{role}.txt").read_text(encoding="utf-8") for role in ROLE_PLACEHOLDERS}
        library = cls(templates)
        logger.debug(f"Loaded prompt templates (hash {library.template_hash[:12]})")
        return library

    def render(self, role: str, **values: str) -> str:
        return self.templates[role].safe_substitute(values)


class AgentSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    temperature: float = Field(default=0.0, ge=0)
    max_output_tokens: int = Field(default=2048, gt=0)
    max_retries: int = Field(default=2, ge=0)
    extractor_sees_profile: bool = True
    structured_messages: bool = True


@dataclass
class CallRecord:
    """One transcript line: a backend call (or a mechanical Retriever step) and what came of it."""

    agent: str
    step: int
    raw: str
    envelope: dict | None = None
    warnings: list[str] = field(default_factory=list)


@dataclass
class CallLog:
    """Per-agent step counters plus the records produced since the log was opened."""

    steps: dict[str, int] = field(default_factory=dict)
    records: list[CallRecord] = field(default_factory=list)
    usage: UsageRecord = field(default_factory=UsageRecord)
    fallbacks: int = 0

    def next_step(self, agent: str) -> int:
        step = self.steps.get(agent, 0)
        self.steps[agent] = step + 1
        return step

    def record(self, agent: str, raw: str = "", step: int | None = None) -> CallRecord:
        record = CallRecord(agent=agent, step=self.next_step(agent) if step is None else step, raw=raw)
        self.records.append(record)
        return record

    def warn(self, message: str) -> None:
        logger.warning(message)
        if self.records:
            self.records[-1].warnings.append(message)


def attribute_to_wire(attribute: InferredAttribute, with_quotes: bool = True) -> dict:
    wire: dict[str, Any] = {
        "type": attribute.attr_type,
        "value": list(attribute.values),
        "confidence": attribute.confidence,
    }
    if with_quotes:
        wire["evidence"] = [{"seq": e.seq, "quote": e.quote} for e in attribute.evidence]
    else:
        wire["evidence"] = sorted(attribute.evidence_seqs())
    return wire


def render_attributes(attributes: Iterable[InferredAttribute], with_quotes: bool = True) -> str:
    wire = [attribute_to_wire(a, with_quotes) for a in attributes]
    return canonical_json({"attributes": wire}) if wire else NO_ATTRIBUTES


def render_batch(activities: Iterable[Activity]) -> str:
    return "\n\n".join(activity.render() for activity in activities)


# --- post-processing ---


Warn = Callable[[str], None]


def _merge_values(value_lists: Iterable[Iterable[str]], attr_type: str, warn: Warn) -> tuple[str, ...]:
    merged: list[str] = []
    seen: set[str] = set()
    for values in value_lists:
        for value in values:
            key = normalize(attr_type, value)
            if key not in seen:
                seen.add(key)
                merged.append(value)
    if len(merged) > MAX_VALUES:
        warn(f"{attr_type!r}: merged {len(merged)} candidate values, dropping {merged[MAX_VALUES:]}")
    return tuple(merged[:MAX_VALUES])


def _merge_evidence(attributes: Iterable[InferredAttribute]) -> tuple[Evidence, ...]:
    pairs = {(e.seq, e.quote) for a in attributes for e in a.evidence}
    return tuple(Evidence(seq=seq, quote=quote) for seq, quote in sorted(pairs))


def collapse_duplicates(
    attributes: Iterable[InferredAttribute], warn: Warn = logger.warning
) -> list[InferredAttribute]:
    """Collapse attributes sharing (normalized type, normalized primary value).

    The first occurrence keeps its position and raw strings; the collapsed attribute has the maximum
    confidence, the union of evidence (sorted by seq, quote) and the union of candidate values.
    Candidate values past the third are dropped and reported through `warn`.
    """
    groups: dict[tuple[str, str], list[InferredAttribute]] = {}
    for attribute in attributes:
        groups.setdefault(attribute.key(), []).append(attribute)
    collapsed = []
    for group in groups.values():
        first = group[0]
        collapsed.append(
            InferredAttribute(
                attr_type=first.attr_type,
                values=_merge_values((a.values for a in group), first.attr_type, warn),
                confidence=max(a.confidence for a in group),
                evidence=_merge_evidence(group),
            )
        )
    return collapsed


def _candidate_rank(attribute: InferredAttribute) -> tuple:
    max_seq = max(attribute.evidence_seqs(), default=0)
    value = normalize(attribute.attr_type, attribute.primary)
    return (-attribute.confidence, -len(attribute.evidence), -max_seq, value)


def mechanical_merge(
    attributes: Iterable[InferredAttribute], warn: Warn = logger.warning
) -> list[InferredAttribute]:
    """Deterministic, LLM-free merge: collapse duplicates, then fold each type into one attribute.

    Conflicting values of one type become candidates ordered by confidence, evidence count and
    recency (highest evidence seq); confidence is the leading candidate's. Candidates past the third
    are dropped and reported through `warn`.
    """
    by_type: dict[str, list[InferredAttribute]] = {}
    for attribute in collapse_duplicates(attributes, warn):
        by_type.setdefault(attribute.key()[0], []).append(attribute)
    merged = []
    for group in by_type.values():
        if len(group) == 1:
            merged.append(group[0])
            continue
        ranked = sorted(group, key=_candidate_rank)
        primaries = [[a.primary] for a in ranked]
        alternates = [a.values[1:] for a in ranked]
        merged.append(
            InferredAttribute(
                attr_type=group[0].attr_type,
                values=_merge_values([*primaries, *alternates], group[0].attr_type, warn),
                confidence=ranked[0].confidence,
                evidence=_merge_evidence(group),
            )
        )
    return merged


def filter_evidence(
    attributes: Iterable[InferredAttribute], allowed: Callable[[int], bool], log: CallLog
) -> list[InferredAttribute]:
    """Drop evidence citing activities the agent was not shown."""
    kept = []
    for attribute in attributes:
        evidence = tuple(e for e in attribute.evidence if allowed(e.seq))
        if len(evidence) != len(attribute.evidence):
            dropped = sorted(attribute.evidence_seqs() - {e.seq for e in evidence})
            log.warn(f"Dropped evidence {dropped} for {attribute.attr_type!r}: not among the activities shown")
            attribute = attribute.model_copy(update={"evidence": evidence})
        kept.append(attribute)
    return kept


def parse_lenient(raw: str) -> list[InferredAttribute]:
    """Best-effort read of an unvalidated reply (plain-text mode without a Summarizer)."""
    try:
        return parse_extractor(raw)
    except ProtocolError:
        return []


# --- roles ---


ExtractorOutput = list[InferredAttribute] | str


class AgentTeam:
    def __init__(self, gateway: Gateway, prompts: PromptLibrary, settings: AgentSettings = AgentSettings()):
        self.gateway = gateway
        self.prompts = prompts
        self.settings = settings

    async def _call(self, agent: str, prompt: str, corrections: list[tuple[str, str]], log: CallLog) -> str:
        messages = [ChatMessage(role=Role.USER, content=prompt)]
        for raw, corrective in corrections:
            messages.append(ChatMessage(role=Role.ASSISTANT, content=raw))
            messages.append(ChatMessage(role=Role.USER, content=corrective))
        step = log.next_step(agent)
        request = ChatRequest(
            system_prompt="",
            messages=tuple(messages),
            temperature=self.settings.temperature,
            max_output_tokens=self.settings.max_output_tokens,
            agent=agent,
            step=step,
        )
        text, usage = await self.gateway.complete(request)
        log.usage = log.usage + usage
        log.record(agent, text, step=step)
        return text

    async def ask(self, agent: str, prompt: str, parser: Callable[[str], T], log: CallLog) -> T:
        """One prompt through the repair loop; parse errors are recorded on the failing call."""

        def checked(raw: str) -> T:
            try:
                return parser(raw)
            except ProtocolError as e:
                log.records[-1].warnings.append(e.label)
                raise

        result = await repair_loop(
            lambda corrections: self._call(agent, prompt, corrections, log), checked, self.settings.max_retries
        )
        return result.value

    async def ask_raw(self, agent: str, prompt: str, log: CallLog) -> str:
        return await self._call(agent, prompt, [], log)

    async def strategist_decide(self, progress_summary: str, log: CallLog) -> StrategistDecision:
        """Next action from the progress summary. RepairExhausted propagates to the orchestrator."""
        prompt = self.prompts.render(STRATEGIST, progress_summary=progress_summary)
        decision = await self.ask(STRATEGIST, prompt, parse_strategist, log)
        log.records[-1].envelope = envelope_for(Sender.STRATEGIST, decision).model_dump(mode="json")
        logger.info(f"Strategist: {decision.action.value} ({decision.rationale})")
        return decision

    async def retrieve_batch(
        self, source: ActivitySource, cursor: Cursor, log: CallLog, batch_size: int = 10
    ) -> tuple[list[Activity], Cursor, bool]:
        batch, next_cursor, exhausted = await source.next(cursor, batch_size)
        record = log.record(RETRIEVER)
        record.envelope = envelope_for(Sender.RETRIEVER, batch).model_dump(mode="json")
        logger.info(f"Retriever: {len(batch)} activities{' (source exhausted)' if exhausted else ''}")
        return batch, next_cursor, exhausted

    async def extract_attributes(
        self, batch: list[Activity], instructions: str, log: CallLog, context: Profile | None = None
    ) -> ExtractorOutput:
        if not batch:
            raise InvalidValue("extract_attributes needs a non-empty batch")
        batch_seqs = {a.seq for a in batch}
        return await self.extract_text(render_batch(batch), batch_seqs.__contains__, instructions, log, context)

    async def extract_text(
        self,
        batch_text: str,
        allowed: Callable[[int], bool],
        instructions: str,
        log: CallLog,
        context: Profile | None = None,
        history: str | None = None,
    ) -> ExtractorOutput:
        """Extractor over already-rendered activity text; `allowed` says which seqs it was shown.

        `history` replaces the structured context with raw text (the no-memory mode).
        """
        shown_context = context.attributes if context is not None and self.settings.extractor_sees_profile else ()
        if history is not None:
            shown_context = ()
        prompt = self.prompts.render(
            EXTRACTOR,
            batch_text=batch_text,
            instructions=instructions or DEFAULT_INSTRUCTIONS,
            inferred_attributes=history or render_attributes(shown_context),
        )
        if not self.settings.structured_messages:
            return await self.ask_raw(EXTRACTOR, prompt, log)

        context_seqs = {seq for a in shown_context for seq in a.evidence_seqs()}
        try:
            attributes = await self.ask(EXTRACTOR, prompt, parse_extractor, log)
        except RepairExhausted as e:
            log.fallbacks += 1
            log.warn(f"Extractor output unusable after {len(e.raw_outputs)} attempts; no attributes from this batch")
            attributes = []
        attributes = filter_evidence(attributes, lambda seq: allowed(seq) or seq in context_seqs, log)
        log.records[-1].envelope = envelope_for(Sender.EXTRACTOR, attributes).model_dump(mode="json")
        logger.info(f"Extractor: {len(attributes)} attributes")
        return attributes

    async def summarize_refine(
        self,
        current: Profile,
        incoming: ExtractorOutput,
        log: CallLog,
        enabled: bool = True,
        seen: Callable[[int], bool] | None = None,
    ) -> Profile:
        """Merge new findings into the profile.

        With the Summarizer disabled, or when its output stays unusable, the mechanical merge is
        used. Either way the result goes through `collapse_duplicates`, so the Profile dedup
        invariant holds whatever the LLM returns.
        """
        if not incoming or (isinstance(incoming, str) and not incoming.strip()):
            return current
        if not enabled:
            new = parse_lenient(incoming) if isinstance(incoming, str) else incoming
            merged = mechanical_merge([*current.attributes, *new], log.warn)
            return Profile(user_id=current.user_id, attributes=tuple(merged))

        new_text = incoming if isinstance(incoming, str) else render_attributes(incoming)
        prompt = self.prompts.render(
            SUMMARIZER, inferred_attributes=render_attributes(current.attributes), new_attributes=new_text
        )
        try:
            refined = await self.ask(SUMMARIZER, prompt, parse_extractor, log)
        except RepairExhausted as e:
            log.fallbacks += 1
            log.warn(f"Summarizer output unusable after {len(e.raw_outputs)} attempts; merging mechanically")
            new = parse_lenient(incoming) if isinstance(incoming, str) else incoming
            refined = mechanical_merge([*current.attributes, *new], log.warn)
        if seen is not None:
            refined = filter_evidence(refined, seen, log)
        profile = Profile(user_id=current.user_id, attributes=tuple(collapse_duplicates(refined, log.warn)))
        log.records[-1].envelope = envelope_for(Sender.SUMMARIZER, profile).model_dump(mode="json")
        logger.info(f"Summarizer: profile now holds {len(profile)} attributes")
        return profile

