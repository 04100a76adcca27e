"""The profiling workflow: Strategist-driven loop, ablations, persistence and resume.

Run directory layout (`<runs_dir>/<run_id>/`):

    state.json        WorkflowState after the last completed iteration
    transcript.jsonl  header line, then one line per backend call or Retriever step
    profile.json      final Profile (written when the run finishes)
    usage.json        token and cost totals of the run

Every iteration is committed atomically: transcript lines are appended first, then state.json is
replaced with a state whose `transcript_lines` counts them. Resume truncates the transcript back to
that count, so a crash mid-iteration leaves no trace in a resumed run.
"""

import json
import logging
import math
import uuid
from collections.abc import Awaitable, Callable
from dataclasses import dataclass
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from .agents import (
    DEFAULT_INSTRUCTIONS,
    EXTRACTOR,
    NO_ATTRIBUTES,
    RETRIEVER,
    AgentSettings,
    AgentTeam,
    CallLog,
    CallRecord,
    ExtractorOutput,
    PromptLibrary,
    mechanical_merge,
    parse_lenient,
    render_batch,
)
from .errors import BackendFailure, GatewayError, RepairExhausted, StateMissing, TemplateMismatch
from .ingestion import ActivitySource, Cursor
from .llm.chunking import chunk_text
from .llm.gateway import BackendConfig, Gateway, UsageRecord, create_gateway
from .models import Action, Activity, Profile, StrategistDecision
from .utils import approximate_tokens, atomic_write_text, canonical_json

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 200


class AblationConfig(BaseModel):
    """Which optional agents take part. The Extractor always does."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    strategist: bool = True
    retriever: bool = True
    summarizer: bool = True

    @property
    def extractor_only(self) -> bool:
        return not (self.strategist or self.retriever or self.summarizer)

    @property
    def name(self) -> str:
        for name, preset in ABLATION_PRESETS.items():
            if preset == self:
                return name
        return "custom"


ABLATION_PRESETS: dict[str, AblationConfig] = {
    "e": AblationConfig(strategist=False, retriever=False, summarizer=False),
    "es": AblationConfig(strategist=True, retriever=False, summarizer=False),
    "esr": AblationConfig(strategist=True, retriever=True, summarizer=False),
    "esu": AblationConfig(strategist=True, retriever=False, summarizer=True),
    "all": AblationConfig(),
}


class ProfilerConfig(BaseModel):
    """Run configuration, loaded from a JSON file. Unknown keys are rejected."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    backend: BackendConfig = BackendConfig()
    agents: AgentSettings = AgentSettings()
    ablation: AblationConfig = AblationConfig()
    batch_size: int = Field(default=10, gt=0)
    max_iterations: int | None = Field(default=None, gt=0)
    memory: bool = True
    context_chars: int = Field(default=24000, gt=0)
    context_window_tokens: int = Field(default=8000, gt=0)
    prompts_dir: str | None = None
    runs_dir: str = "runs"

    @classmethod
    def load(cls, path: str | Path) -> "ProfilerConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


class WorkflowState(BaseModel):
    """Everything needed to continue a run. Persisted as state.json after every iteration."""

    run_id: str
    user_id: str
    template_hash: str
    ablation: AblationConfig
    max_iterations: int
    total_activities: int | None = None
    cursor: Cursor = None
    pending_batch: list[Activity] | None = None
    pending_chunk: str | None = None
    profile: Profile
    iteration: int = 0
    exhausted: bool = False
    refined: bool = True
    retrieved: int = 0
    shown_seqs: list[int] = Field(default_factory=list)
    action_log: list[tuple[int, Action]] = Field(default_factory=list)
    agent_calls: dict[str, int] = Field(default_factory=dict)
    history: list[str] = Field(default_factory=list)
    fixed_schedule: bool = False
    fallbacks: int = 0
    violations: list[str] = Field(default_factory=list)
    finished: bool = False
    stop_reason: str | None = None
    transcript_lines: int = 0
    usage: UsageRecord = UsageRecord()

    @property
    def has_pending(self) -> bool:
        return bool(self.pending_batch) or bool(self.pending_chunk)

    @property
    def last_action(self) -> Action | None:
        return self.action_log[-1][1] if self.action_log else None


@dataclass
class RunResult:
    run_id: str
    profile: Profile
    transcript: list[dict]
    usage: UsageRecord
    state: WorkflowState

    @property
    def used_fallback(self) -> bool:
        return self.state.fallbacks > 0


def max_iterations_for(activity_count: int | None, batch_size: int, configured: int | None = None) -> int:
    """4x the minimal loop count; `configured` applies when the source size is unknown."""
    if activity_count is None:
        return configured or DEFAULT_MAX_ITERATIONS
    return 4 * max(1, math.ceil(activity_count / batch_size))


def render_progress(state: WorkflowState) -> str:
    """Strategist view of the run. Its size depends on the profile, not on activity text volume."""
    remaining = "unknown" if state.total_activities is None else str(state.total_activities - state.retrieved)
    if state.pending_batch:
        waiting = str(len(state.pending_batch))
    else:
        waiting = "a chunk of text" if state.pending_chunk else "0"
    lines = [
        f"Activities retrieved: {state.retrieved}",
        f"Activities remaining: {'0' if state.exhausted else remaining}",
        f"Activities waiting for analysis: {waiting}",
        f"All activities collected: {'yes' if state.exhausted else 'no'}",
        f"Profile refined since the last inference: {'yes' if state.refined else 'no'}",
        f"Last action: {state.last_action.value if state.last_action else 'none'}",
        f"Attributes held: {len(state.profile)}",
    ]
    for attribute in state.profile.attributes:
        seqs = ", ".join(str(seq) for seq in sorted(attribute.evidence_seqs()))
        lines.append(
            f"- {attribute.attr_type}: {' | '.join(attribute.values)} "
            f"(confidence {attribute.confidence}; evidence {seqs or 'none'})"
        )
    return "\n".join(lines)


def truncate_history(history: list[str], window_tokens: int) -> list[str]:
    """Drop the oldest entries until the history fits the window."""
    kept = list(history)
    while kept and sum(approximate_tokens(entry) for entry in kept) > window_tokens:
        kept.pop(0)
    return kept


def _chunk_seqs(text: str, chunks: list[str], activities: list[Activity]) -> list[frozenset[int]]:
    """For each chunk (consecutive slices of `text`), the seqs of activities whose header starts in it."""
    starts = []
    position = 0
    for activity in activities:
        starts.append((position, activity.seq))
        position += len(activity.render()) + 2
    seqs = []
    offset = 0
    for chunk in chunks:
        begin = text.index(chunk, offset)
        offset = begin + len(chunk)
        seqs.append(frozenset(seq for start, seq in starts if begin <= start < offset))
    return seqs


class RunStore:
    """Owns one run directory; all JSON is canonical and whole-file writes are atomic."""

    def __init__(self, runs_dir: str | Path, run_id: str):
        self.run_id = run_id
        self.dir = Path(runs_dir) / run_id
        self.state_path = self.dir / "state.json"
        self.transcript_path = self.dir / "transcript.jsonl"
        self.profile_path = self.dir / "profile.json"
        self.usage_path = self.dir / "usage.json"

    def exists(self) -> bool:
        return self.state_path.is_file()

    def start(self, header: dict) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.transcript_path, canonical_json(header) + "\n")

    def append_transcript(self, lines: list[dict]) -> None:
        if not lines:
            return
        with open(self.transcript_path, "a", encoding="utf-8") as f:
            f.writelines(canonical_json(line) + "\n" for line in lines)

    def truncate_transcript(self, line_count: int) -> None:
        lines = self.transcript_path.read_text(encoding="utf-8").splitlines(keepends=True)
        if len(lines) != line_count:
            logger.info(f"Discarding {len(lines) - line_count} uncommitted transcript lines of {self.run_id}")
            atomic_write_text(self.transcript_path, "".join(lines[:line_count]))

    def read_transcript(self) -> list[dict]:
        with open(self.transcript_path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def save_state(self, state: WorkflowState) -> None:
        atomic_write_text(self.state_path, canonical_json(state.model_dump(mode="json")))

    def load_state(self) -> WorkflowState:
        if not self.exists():
            raise StateMissing(f"No persisted state for run {self.run_id} under {self.dir}")
        return WorkflowState.model_validate_json(self.state_path.read_text(encoding="utf-8"))

    def save_outputs(self, state: WorkflowState) -> None:
        atomic_write_text(self.profile_path, canonical_json(state.profile.model_dump(mode="json")))
        atomic_write_text(self.usage_path, canonical_json(state.usage.model_dump(mode="json")))

    def load_profile(self) -> Profile:
        return Profile.model_validate_json(self.profile_path.read_text(encoding="utf-8"))


def _transcript_line(iteration: int, record: CallRecord) -> dict:
    return {
        "iteration": iteration,
        "agent": record.agent,
        "step": record.step,
        "raw": record.raw,
        "envelope": record.envelope,
        "warnings": record.warnings,
    }


class Profiler:
    """Runs the workflow for one user at a time; several runs may share one gateway concurrently."""

    def __init__(self, config: ProfilerConfig, gateway: Gateway, prompts: PromptLibrary | None = None):
        self.config = config
        self.gateway = gateway
        self.prompts = prompts or PromptLibrary.load(config.prompts_dir)
        self.team = AgentTeam(gateway, self.prompts, config.agents)
        self._chunk_cache: dict[str, tuple[list[str], frozenset[int]]] = {}

    # --- entry points ---

    async def run(self, source: ActivitySource, run_id: str | None = None) -> RunResult:
        run_id = run_id or f"{source.user_id}-{uuid.uuid4().hex[:8]}"
        store = RunStore(self.config.runs_dir, run_id)
        ablation = self.config.ablation
        total = source.size()
        if ablation.retriever or ablation.extractor_only:
            max_iterations = max_iterations_for(total, self.config.batch_size, self.config.max_iterations)
        else:
            chunks, _ = await self._chunks(source)
            max_iterations = 4 * max(1, len(chunks))
        state = WorkflowState(
            run_id=run_id,
            user_id=source.user_id,
            template_hash=self.prompts.template_hash,
            ablation=ablation,
            max_iterations=max_iterations,
            total_activities=total,
            profile=Profile(user_id=source.user_id),
            fixed_schedule=not ablation.strategist,
        )
        store.start(
            {
                "kind": "header",
                "template_hash": state.template_hash,
                "user_id": state.user_id,
                "ablation": ablation.model_dump(mode="json"),
            }
        )
        state.transcript_lines = 1
        store.save_state(state)
        logger.info(f"Starting run {run_id} for {source.user_id} (ablation {ablation.name})")
        return await self._drive(state, source, store)

    async def resume(self, run_id: str, source: ActivitySource) -> RunResult:
        store = RunStore(self.config.runs_dir, run_id)
        state = store.load_state()
        if state.template_hash != self.prompts.template_hash:
            raise TemplateMismatch(state.template_hash, self.prompts.template_hash)
        if state.finished:
            logger.info(f"Run {run_id} already finished; returning the stored profile")
            return RunResult(run_id, state.profile, store.read_transcript(), state.usage, state)
        store.truncate_transcript(state.transcript_lines)
        logger.info(f"Resuming run {run_id} at iteration {state.iteration + 1}")
        return await self._drive(state, source, store)

    # --- loop ---

    async def _drive(self, state: WorkflowState, source: ActivitySource, store: RunStore) -> RunResult:
        if state.ablation.extractor_only and not state.finished:
            state = await self._step(state, store, lambda work, log: self._extractor_only(work, source, log))
        elif state.total_activities == 0 and not state.action_log:
            state.action_log.append((state.iteration, Action.FINISH))
            self._finish(state, "empty source")
            store.save_state(state)
        while not state.finished:
            if state.iteration >= state.max_iterations:
                logger.warning(f"Run {state.run_id} reached max_iterations={state.max_iterations}")
                self._finish(state, "max_iterations")
                store.save_state(state)
                break
            state = await self._step(state, store, lambda work, log: self._iterate(work, source, log))
        store.save_outputs(state)
        logger.info(f"Run {state.run_id} finished ({state.stop_reason}): {len(state.profile)} attributes")
        return RunResult(state.run_id, state.profile, store.read_transcript(), state.usage, state)

    async def _step(
        self,
        state: WorkflowState,
        store: RunStore,
        body: Callable[[WorkflowState, CallLog], Awaitable[None]],
    ) -> WorkflowState:
        """One committed iteration: `body` works on a copy, which is persisted and returned."""
        work = state.model_copy(deep=True)
        work.iteration += 1
        log = CallLog(steps=dict(work.agent_calls))
        try:
            await body(work, log)
        except GatewayError as e:
            # Uncommitted lines; a resume truncates them.
            store.append_transcript([_transcript_line(work.iteration, r) for r in log.records])
            raise BackendFailure(state.run_id, e) from e
        lines = [_transcript_line(work.iteration, r) for r in log.records]
        store.append_transcript(lines)
        work.agent_calls = dict(log.steps)
        work.usage = work.usage + log.usage
        work.fallbacks += log.fallbacks
        work.transcript_lines += len(lines)
        store.save_state(work)
        return work

    @staticmethod
    def _finish(state: WorkflowState, reason: str) -> None:
        state.finished = True
        state.stop_reason = reason

    @staticmethod
    def _violation(state: WorkflowState, log: CallLog, message: str) -> None:
        state.violations.append(f"iteration {state.iteration}: {message}")
        log.warn(f"Protocol violation: {message}")

    async def _decide(self, state: WorkflowState, log: CallLog) -> StrategistDecision:
        if not state.fixed_schedule:
            try:
                return await self.team.strategist_decide(self._progress_summary(state), log)
            except RepairExhausted:
                log.fallbacks += 1
                log.warn("Strategist output unusable; switching to the fixed schedule")
                state.fixed_schedule = True
        if state.has_pending:
            action = Action.INFER
        elif not state.exhausted:
            action = Action.RETRIEVE
        else:
            action = Action.FINISH
        return StrategistDecision(action=action, rationale="fixed schedule", instructions=DEFAULT_INSTRUCTIONS)

    def _enforce(self, state: WorkflowState, decision: StrategistDecision, log: CallLog) -> Action:
        action = decision.action
        if state.exhausted and not state.has_pending and state.refined and action is not Action.FINISH:
            self._violation(state, log, f"{action.value} with nothing left to do; finishing")
            return Action.FINISH
        if action is Action.RETRIEVE and state.exhausted:
            self._violation(state, log, "Retrieve after the source was exhausted; finishing")
            return Action.FINISH
        if action is Action.INFER and not state.has_pending:
            replacement = Action.FINISH if state.exhausted else Action.RETRIEVE
            self._violation(state, log, f"Infer with no pending activities; {replacement.value} instead")
            return replacement
        return action

    async def _iterate(self, state: WorkflowState, source: ActivitySource, log: CallLog) -> None:
        decision = await self._decide(state, log)
        action = self._enforce(state, decision, log)
        if action is Action.REFINE and state.last_action is Action.REFINE:
            self._violation(state, log, "Refine right after a Refine; skipped")
            return
        state.action_log.append((state.iteration, action))
        if action is Action.FINISH:
            self._finish(state, "finish")
        elif action is Action.RETRIEVE:
            await self._retrieve(state, source, log)
        elif action is Action.INFER:
            incoming = await self._infer(state, decision.instructions, log)
            # Refine is queued automatically after every Infer.
            state.action_log.append((state.iteration, Action.REFINE))
            await self._refine(state, incoming, log)
        elif state.profile.attributes:
            # A standalone Refine re-reads the whole profile as new findings.
            current = list(state.profile.attributes)
            state.profile = Profile(user_id=state.user_id)
            await self._refine(state, current, log)

    # --- actions ---

    async def _retrieve(self, state: WorkflowState, source: ActivitySource, log: CallLog) -> None:
        if state.ablation.retriever:
            batch, state.cursor, state.exhausted = await self.team.retrieve_batch(
                source, state.cursor, log, self.config.batch_size
            )
            state.pending_batch = [*(state.pending_batch or []), *batch] or None
            state.retrieved += len(batch)
            if not self.config.memory and batch:
                self._remember(state, render_batch(batch))
            return

        chunks, chunk_seqs = await self._chunks(source)
        index = int(state.cursor or 0)
        chunk = chunks[index] if index < len(chunks) else ""
        if chunk:
            state.shown_seqs = sorted({*state.shown_seqs, *chunk_seqs[index]})
        state.cursor = index + 1
        state.exhausted = state.cursor >= len(chunks)
        state.retrieved = len(state.shown_seqs)
        state.pending_chunk = "\n\n".join(c for c in (state.pending_chunk, chunk) if c) or None
        log.record(RETRIEVER)
        logger.info(f"Chunk {index + 1}/{len(chunks)} queued for analysis")
        if not self.config.memory and chunk:
            self._remember(state, chunk)

    async def _chunks(self, source: ActivitySource) -> tuple[list[str], list[frozenset[int]]]:
        """Without the Retriever the whole archive text is cut into context-sized chunks.

        Each chunk comes with the seqs of the activities whose header starts inside it.
        """
        if source.user_id not in self._chunk_cache:
            activities = await source.all_activities()
            text = render_batch(activities)
            chunks = chunk_text(text, self.config.context_chars)
            self._chunk_cache[source.user_id] = (chunks, _chunk_seqs(text, chunks, activities))
        return self._chunk_cache[source.user_id]

    @staticmethod
    def _shown(state: WorkflowState) -> Callable[[int], bool]:
        """Seqs of every activity the run has put in front of an agent so far."""
        if state.ablation.retriever:
            return lambda seq: 1 <= seq <= state.retrieved
        return frozenset(state.shown_seqs).__contains__

    async def _infer(self, state: WorkflowState, instructions: str, log: CallLog) -> ExtractorOutput:
        if state.pending_batch:
            text = render_batch(state.pending_batch)
            allowed: Callable[[int], bool] = {a.seq for a in state.pending_batch}.__contains__
        else:
            text = state.pending_chunk or ""
            allowed = self._shown(state)

        if self.config.memory:
            incoming = await self.team.extract_text(text, allowed, instructions, log, context=state.profile)
        else:
            # The raw history stands in for the structured profile.
            history = "\n\n".join(state.history) or NO_ATTRIBUTES
            shown = self._shown(state)
            incoming = await self.team.extract_text(text, shown, instructions, log, history=history)
            if log.records and log.records[-1].agent == EXTRACTOR:
                self._remember(state, log.records[-1].raw)
        state.pending_batch = None
        state.pending_chunk = None
        state.refined = False
        return incoming

    async def _refine(self, state: WorkflowState, incoming: ExtractorOutput, log: CallLog) -> None:
        state.profile = await self.team.summarize_refine(
            state.profile, incoming, log, enabled=state.ablation.summarizer, seen=self._shown(state)
        )
        state.refined = True

    async def _extractor_only(self, state: WorkflowState, source: ActivitySource, log: CallLog) -> None:
        activities = await source.all_activities()
        full_text = render_batch(activities)
        text = full_text[: self.config.context_chars]
        (shown,) = _chunk_seqs(full_text, [text], activities)
        state.shown_seqs = sorted(shown)
        state.retrieved = len(shown)
        state.exhausted = True
        state.action_log.append((state.iteration, Action.INFER))
        if activities:
            incoming = await self.team.extract_text(text, shown.__contains__, DEFAULT_INSTRUCTIONS, log)
            attributes = parse_lenient(incoming) if isinstance(incoming, str) else incoming
            merged = mechanical_merge(attributes, log.warn)
            state.profile = Profile(user_id=state.user_id, attributes=tuple(merged))
        state.action_log.append((state.iteration, Action.FINISH))
        self._finish(state, "extractor only")

    # --- memory ---

    def _progress_summary(self, state: WorkflowState) -> str:
        summary = render_progress(state)
        if self.config.memory:
            return summary
        history = "\n\n".join(state.history) or NO_ATTRIBUTES
        return f"{summary}\n\nFull history, oldest entries dropped when over the context window:\n{history}"

    def _remember(self, state: WorkflowState, entry: str) -> None:
        state.history = truncate_history([*state.history, entry], self.config.context_window_tokens)


def _profiler(config: ProfilerConfig, gateway: Gateway | None, prompts: PromptLibrary | None) -> Profiler:
    return Profiler(config, gateway or create_gateway(config.backend), prompts)


async def run_profile(
    source: ActivitySource,
    config: ProfilerConfig,
    gateway: Gateway | None = None,
    prompts: PromptLibrary | None = None,
    run_id: str | None = None,
) -> RunResult:
    return await _profiler(config, gateway, prompts).run(source, run_id)


async def run_ablation(
    source: ActivitySource,
    ablation: AblationConfig,
    config: ProfilerConfig,
    gateway: Gateway | None = None,
    prompts: PromptLibrary | None = None,
    run_id: str | None = None,
) -> RunResult:
    return await run_profile(source, config.model_copy(update={"ablation": ablation}), gateway, prompts, run_id)


async def resume(
    run_id: str,
    source: ActivitySource,
    config: ProfilerConfig,
    gateway: Gateway | None = None,
    prompts: PromptLibrary | None = None,
) -> RunResult:
    return await _profiler(config, gateway, prompts).resume(run_id, source)
