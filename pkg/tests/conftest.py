from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from pseudoscope.agents import AgentSettings, AgentTeam, PromptLibrary
from pseudoscope.llm.gateway import Gateway
from pseudoscope.llm.scripted import ScriptedBackend
from pseudoscope.models import Activity, ActivityKind, Evidence, InferredAttribute
from pseudoscope.orchestrator import ProfilerConfig

FIXTURES = Path(__file__).parent / "fixtures"
ARCHIVE_25 = FIXTURES / "archive_25.jsonl"
SCRIPT_25 = FIXTURES / "script_25.jsonl"
SYNTHPAI_MINI = FIXTURES / "synthpai_mini"
FTI_SCRIPT = FIXTURES / "synthpai_fti_script.jsonl"
GOLDEN = FIXTURES / "golden"

START = datetime(2023, 1, 1, tzinfo=timezone.utc)

# Retrieve when nothing is waiting, infer when something is, finish once all is collected and analysed.
PLAIN_STRATEGIST: list[tuple[dict, str]] = [
    (
        {"agent": "strategist", "contains": "Activities waiting for analysis: 0\nAll activities collected: yes"},
        '{"action": "finish", "rationale": "done"}',
    ),
    (
        {"agent": "strategist", "contains": "Activities waiting for analysis: 0"},
        '{"action": "retrieve", "rationale": "more"}',
    ),
    ({"agent": "strategist"}, '{"action": "infer", "rationale": "analyse"}'),
]


def make_activity(seq: int, text: str = "", **extra) -> Activity:
    return Activity(
        id=extra.pop("id", f"a{seq}"),
        seq=seq,
        timestamp=extra.pop("timestamp", START + timedelta(hours=seq)),
        kind=extra.pop("kind", ActivityKind.COMMENT),
        text=text or f"activity number {seq}",
        **extra,
    )


def make_attribute(attr_type: str, *values: str, confidence: int = 4, seqs: tuple[int, ...] = ()) -> InferredAttribute:
    return InferredAttribute(
        attr_type=attr_type,
        values=values or ("x",),
        confidence=confidence,
        evidence=tuple(Evidence(seq=s, quote=f"quote {s}") for s in seqs),
    )


def scripted_gateway(*responses: tuple[dict, str]) -> Gateway:
    return Gateway(ScriptedBackend.from_responses(list(responses)))


def file_gateway(path: Path, prepend: list[str] | None = None, tmp_path: Path | None = None) -> Gateway:
    """Gateway over a script file, optionally with extra raw lines placed before it."""
    if prepend:
        patched = tmp_path / f"patched_{path.name}"
        patched.write_text("\n".join(prepend) + "\n" + path.read_text(encoding="utf-8"), encoding="utf-8")
        path = patched
    return Gateway(ScriptedBackend.from_file(path))


@pytest.fixture
def prompts() -> PromptLibrary:
    return PromptLibrary.load()


@pytest.fixture
def config(tmp_path) -> ProfilerConfig:
    return ProfilerConfig(runs_dir=str(tmp_path / "runs"))


@pytest.fixture
def team_for(prompts):
    def build(*responses: tuple[dict, str], **settings) -> AgentTeam:
        return AgentTeam(scripted_gateway(*responses), prompts, AgentSettings(**settings))

    return build
