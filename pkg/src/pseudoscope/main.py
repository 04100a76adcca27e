import asyncio
import logging
import sys
from contextlib import contextmanager
from enum import Enum
from pathlib import Path

import click
import typer
from dotenv import load_dotenv
from typer.core import TyperGroup

from .agents import AgentTeam, PromptLibrary
from .analysis import (
    DEFAULT_MIN_CONFIDENCE,
    analyze_profile,
    load_corrections,
    load_score_table,
    render_report,
    write_review_file,
)
from .errors import InvalidValue, PseudoscopeError
from .evaluation import (
    SynonymMatch,
    accuracy_frame,
    anonymity_set,
    calibration_table,
    deanon_by_volume,
    exact_match,
    load_aux_dataset,
    run_noise_experiment,
    run_synthpai_evaluation,
    write_results,
)
from .ingestion import (
    SYNTHPAI_COUNTS,
    ArchiveSource,
    BuiltinEntityDetector,
    EntityDetector,
    PresidioEntityDetector,
    SpanFileDetector,
    load_synthpai,
    mask_archive,
    open_archive,
)
from .llm.gateway import create_gateway
from .models import Profile
from .orchestrator import ABLATION_PRESETS, ProfilerConfig, RunStore, resume, run_profile
from .utils import atomic_write_text, canonical_json

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_FALLBACK = 2
EXIT_USAGE = 64


class _ExitCodeGroup(TyperGroup):
    """Root command group; usage errors exit with 64 so that 2 stays free for fallback runs."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            code = super().main(
                args=args, prog_name=prog_name, complete_var=complete_var, standalone_mode=False, **extra
            )
        except click.UsageError as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_FATAL)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_FATAL)
        sys.exit(code if isinstance(code, int) else EXIT_OK)


app = typer.Typer(
    cls=_ExitCodeGroup,
    help="Audits what an LLM-agent adversary can infer about a pseudonymous user from public activity.",
    no_args_is_help=True,
)
evaluate_app = typer.Typer(help="Evaluate attribute inference against labeled datasets.", no_args_is_help=True)
app.add_typer(evaluate_app, name="evaluate")


class Ablation(str, Enum):
    e = "e"
    es = "es"
    esr = "esr"
    esu = "esu"
    all = "all"


class Method(str, Enum):
    autoprofiler = "autoprofiler"
    fti = "fti"


class Detector(str, Enum):
    builtin = "builtin"
    spans = "spans"
    presidio = "presidio"


class MatchMode(str, Enum):
    exact = "exact"
    synonym = "synonym"


class CategorizerMode(str, Enum):
    rule = "rule"
    llm = "llm"


@contextmanager
def _exit_on_error():
    try:
        yield
    except InvalidValue as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(code=EXIT_USAGE)
    except (PseudoscopeError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=EXIT_FATAL)


def _resolve(ctx: typer.Context, path: Path) -> Path:
    workdir: Path = ctx.obj or Path.cwd()
    return path if path.is_absolute() else workdir / path


def _load_config(ctx: typer.Context, config_path: Path | None, script: Path | None) -> ProfilerConfig:
    config = ProfilerConfig.load(_resolve(ctx, config_path)) if config_path else ProfilerConfig()
    backend = config.backend
    script_path = script or (Path(backend.script_path) if backend.script_path else None)
    if script_path is not None:
        backend = backend.model_copy(update={"script_path": str(_resolve(ctx, script_path))})
    update = {"backend": backend, "runs_dir": str(_resolve(ctx, Path(config.runs_dir)))}
    if config.prompts_dir:
        update["prompts_dir"] = str(_resolve(ctx, Path(config.prompts_dir)))
    return config.model_copy(update=update)


def _check_consent(source: ArchiveSource, i_own_this_data: bool) -> None:
    if source.meta.fixture:
        return
    if not i_own_this_data:
        typer.echo(
            "Error: profiling a non-fixture archive requires --i-own-this-data "
            "(only audit archives you own or are authorized to audit).",
            err=True,
        )
        raise typer.Exit(code=EXIT_USAGE)
    if not source.meta.consent:
        logger.error(f"Archive {source.path} has no consent marker in its metadata; refusing to profile it.")
        raise typer.Exit(code=EXIT_FATAL)


@app.callback()
def cli(
    ctx: typer.Context,
    workdir: Path = typer.Option(
        Path("."),
        "--workdir",
        "-w",
        file_okay=False,
        help="Directory that all relative paths (archives, configs, runs, outputs) are resolved against.",
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging (DEBUG level)."),
):
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=log_level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    # Reduce verbosity from libraries
    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("google_genai").setLevel(logging.WARNING)
    ctx.obj = workdir.resolve()


@app.command()
def profile(
    ctx: typer.Context,
    archive: Path = typer.Option(..., "--archive", "-a", help="JSON-Lines activity archive of one user."),
    config_path: Path | None = typer.Option(None, "--config", "-c", help="Run configuration (JSON)."),
    ablation: Ablation | None = typer.Option(
        None, "--ablation", help="Agent combination: e, es, esr, esu or all. Overrides the config."
    ),
    resume_id: str | None = typer.Option(None, "--resume", help="Continue the run with this id."),
    run_id: str | None = typer.Option(None, "--run-id", help="Id for a new run (default: generated)."),
    script: Path | None = typer.Option(None, "--script", help="Script file for the scripted backend."),
    i_own_this_data: bool = typer.Option(
        False, "--i-own-this-data", help="Confirm that you own or are authorized to audit the archive."
    ),
):
    """Profile one user's archive and write the run directory."""
    with _exit_on_error():
        source = open_archive(_resolve(ctx, archive))
        _check_consent(source, i_own_this_data)
        config = _load_config(ctx, config_path, script)
        if ablation is not None:
            config = config.model_copy(update={"ablation": ABLATION_PRESETS[ablation.value]})
        gateway = create_gateway(config.backend)
        if resume_id:
            result = asyncio.run(resume(resume_id, source, config, gateway))
        else:
            result = asyncio.run(run_profile(source, config, gateway, run_id=run_id))

    typer.echo(str(Path(config.runs_dir) / result.run_id))
    if result.used_fallback:
        logger.warning(f"Run {result.run_id} used {result.state.fallbacks} fallback(s)")
        raise typer.Exit(code=EXIT_FALLBACK)


@evaluate_app.command("synthpai")
def evaluate_synthpai(
    ctx: typer.Context,
    data: Path = typer.Option(..., "--data", "-d", help="synthpai.jsonl, or a directory containing it."),
    method: Method = typer.Option(Method.autoprofiler, "--method", "-m", help="autoprofiler or fti."),
    config_path: Path | None = typer.Option(None, "--config", "-c", help="Run configuration (JSON)."),
    script: Path | None = typer.Option(None, "--script", help="Script file for the scripted backend."),
    jobs: int = typer.Option(1, "--jobs", "-j", min=1, help="Users profiled concurrently."),
    out: Path = typer.Option(Path("results"), "--out", "-o", help="Output directory for CSV and JSON results."),
    expect_full: bool = typer.Option(
        False, "--expect-full", help="Validate user, comment and label counts of the full public release."
    ),
):
    """Prediction accuracy per attribute type, plus calibration and re-identification tables."""
    with _exit_on_error():
        dataset = load_synthpai(_resolve(ctx, data), SYNTHPAI_COUNTS if expect_full else None)
        config = _load_config(ctx, config_path, script)
        gateway = create_gateway(config.backend)
        result = asyncio.run(run_synthpai_evaluation(dataset, method.value, config, gateway, jobs=jobs))
        out_dir = _resolve(ctx, out)
        frame = accuracy_frame({method.value: result.accuracy})
        write_results(frame, result.detail(), out_dir, f"synthpai_{method.value}")
        calibration_table(result.predictions, dataset.labels).to_csv(
            out_dir / f"synthpai_{method.value}_calibration.csv", index=False
        )
        deanon_by_volume(dataset, result.predictions).to_csv(
            out_dir / f"synthpai_{method.value}_deanon.csv", index=False
        )

    typer.echo(frame.to_string(index=False))
    if result.fallbacks:
        raise typer.Exit(code=EXIT_FALLBACK)


@app.command()
def deanon(
    ctx: typer.Context,
    profile_path: Path = typer.Option(..., "--profile", "-p", help="Profile JSON (e.g. a run's profile.json)."),
    aux: Path = typer.Option(..., "--aux", help="Auxiliary dataset: JSONL of {attribute type: value} records."),
    n: int = typer.Option(..., "--n", min=1, help="Minimum number of matching attributes."),
    k: int = typer.Option(..., "--k", min=0, help="Maximum anonymity set size for deanonymization."),
    match: MatchMode = typer.Option(MatchMode.exact, "--match", help="Value matching: exact or synonym."),
):
    """Anonymity set size of a profile against an auxiliary dataset, and whether (n, k) holds."""
    with _exit_on_error():
        inferred = Profile.model_validate_json(_resolve(ctx, profile_path).read_text(encoding="utf-8"))
        records = load_aux_dataset(_resolve(ctx, aux))
        f = exact_match if match is MatchMode.exact else SynonymMatch()
        size = anonymity_set(inferred, records, f, n)
    typer.echo(canonical_json({"anonymity_set": size, "deanonymized": size <= k, "k": k, "n": n}))


def _analyze(
    ctx: typer.Context,
    inferred: Profile,
    scores: Path | None,
    min_conf: int,
    categorizer: CategorizerMode,
    config_path: Path | None,
    script: Path | None,
    corrections: Path | None,
):
    table = load_score_table(_resolve(ctx, scores) if scores else None)
    team = None
    if categorizer is CategorizerMode.llm:
        config = _load_config(ctx, config_path, script)
        team = AgentTeam(create_gateway(config.backend), PromptLibrary.load(config.prompts_dir), config.agents)
    fixes = load_corrections(_resolve(ctx, corrections)) if corrections else None
    return asyncio.run(analyze_profile(inferred, table, min_conf, categorizer.value, team, fixes))


@app.command()
def risk(
    ctx: typer.Context,
    profile_path: Path = typer.Option(..., "--profile", "-p", help="Profile JSON (e.g. a run's profile.json)."),
    scores: Path | None = typer.Option(None, "--scores", "-s", help="Score table JSON (default: bundled table)."),
    min_conf: int = typer.Option(
        DEFAULT_MIN_CONFIDENCE, "--min-conf", min=1, max=5, help="Drop attributes below this confidence."
    ),
    categorizer: CategorizerMode = typer.Option(CategorizerMode.rule, "--categorizer", help="rule or llm."),
    config_path: Path | None = typer.Option(None, "--config", "-c", help="Run configuration for llm mode."),
    script: Path | None = typer.Option(None, "--script", help="Script file for the scripted backend."),
    review: Path | None = typer.Option(None, "--review", help="Write a category correction file here."),
    corrections: Path | None = typer.Option(None, "--corrections", help="Apply an edited correction file."),
):
    """Average sensitivity and identifiability of a profile, with per-category counts."""
    with _exit_on_error():
        inferred = Profile.model_validate_json(_resolve(ctx, profile_path).read_text(encoding="utf-8"))
        analysis = _analyze(ctx, inferred, scores, min_conf, categorizer, config_path, script, corrections)
        if review:
            write_review_file(_resolve(ctx, review), analysis.profile, analysis.categories)
    typer.echo(canonical_json(analysis.risk.to_dict()))


@app.command("noise-test")
def noise_test(
    ctx: typer.Context,
    data: Path = typer.Option(..., "--data", "-d", help="synthpai.jsonl, or a directory containing it."),
    fraction: float = typer.Option(0.10, "--fraction", help="Share of each user's activities to replace."),
    seed: int = typer.Option(0, "--seed", help="Seed for choosing and drawing replacements."),
    method: Method = typer.Option(Method.autoprofiler, "--method", "-m", help="autoprofiler or fti."),
    config_path: Path | None = typer.Option(None, "--config", "-c", help="Run configuration (JSON)."),
    script: Path | None = typer.Option(None, "--script", help="Script file for the scripted backend."),
    jobs: int = typer.Option(1, "--jobs", "-j", min=1, help="Users profiled concurrently."),
    out: Path = typer.Option(Path("results"), "--out", "-o", help="Output directory for CSV and JSON results."),
):
    """Accuracy on the original dataset and on a copy with other users' comments mixed in."""
    with _exit_on_error():
        dataset = load_synthpai(_resolve(ctx, data))
        config = _load_config(ctx, config_path, script)
        gateway = create_gateway(config.backend)
        frame, results = asyncio.run(
            run_noise_experiment(dataset, fraction, seed, config, gateway, method.value, jobs=jobs)
        )
        detail = {"fraction": fraction, "seed": seed, **{label: r.detail() for label, r in results.items()}}
        write_results(frame, detail, _resolve(ctx, out), f"noise_{method.value}")

    typer.echo(frame.to_string(index=False))
    if any(r.fallbacks for r in results.values()):
        raise typer.Exit(code=EXIT_FALLBACK)


@app.command()
def mask(
    ctx: typer.Context,
    archive: Path = typer.Option(..., "--archive", "-a", help="JSON-Lines activity archive to mask."),
    detector: Detector = typer.Option(
        Detector.builtin, "--detector", help="builtin (regex), spans (file) or presidio (NER)."
    ),
    language: str = typer.Option("en", "--language", help="Language code for the presidio detector."),
    score_threshold: float = typer.Option(
        0.5, "--score-threshold", min=0.0, max=1.0, help="Minimum presidio entity score."
    ),
    spans: Path | None = typer.Option(None, "--spans", help="JSONL of {line, spans} for the spans detector."),
    out: Path | None = typer.Option(None, "--out", "-o", help="Masked archive path (default: <name>.masked.jsonl)."),
):
    """Replace detected entities in activity texts with ***."""
    if detector is Detector.spans and spans is None:
        raise typer.BadParameter("the spans detector needs a span file", param_hint="--spans")
    with _exit_on_error():
        source_path = _resolve(ctx, archive)
        if detector is Detector.builtin:
            entity_detector: EntityDetector = BuiltinEntityDetector()
        elif detector is Detector.presidio:
            entity_detector = PresidioEntityDetector(language=language, score_threshold=score_threshold)
        else:
            entity_detector = SpanFileDetector(_resolve(ctx, spans))
        out_path = _resolve(ctx, out) if out else source_path.with_name(f"{source_path.stem}.masked.jsonl")
        count = mask_archive(source_path, entity_detector, out_path)
    typer.echo(f"{out_path} ({count} spans masked)")


@app.command()
def report(
    ctx: typer.Context,
    run: str = typer.Option(..., "--run", "-r", help="Id of a finished run."),
    config_path: Path | None = typer.Option(None, "--config", "-c", help="Run configuration (locates runs_dir)."),
    scores: Path | None = typer.Option(None, "--scores", "-s", help="Score table JSON (default: bundled table)."),
    min_conf: int = typer.Option(
        DEFAULT_MIN_CONFIDENCE, "--min-conf", min=1, max=5, help="Drop attributes below this confidence."
    ),
    categorizer: CategorizerMode = typer.Option(CategorizerMode.rule, "--categorizer", help="rule or llm."),
    script: Path | None = typer.Option(None, "--script", help="Script file for the scripted backend."),
    out: Path | None = typer.Option(None, "--out", "-o", help="Report path (default: <run dir>/report.md)."),
    review: Path | None = typer.Option(None, "--review", help="Write a category correction file here."),
    corrections: Path | None = typer.Option(None, "--corrections", help="Apply an edited correction file."),
):
    """Markdown privacy report of a finished run."""
    with _exit_on_error():
        config = _load_config(ctx, config_path, script)
        store = RunStore(config.runs_dir, run)
        inferred = store.load_profile()
        analysis = _analyze(ctx, inferred, scores, min_conf, categorizer, config_path, script, corrections)
        out_path = _resolve(ctx, out) if out else store.dir / "report.md"
        atomic_write_text(out_path, render_report(analysis))
        if review:
            write_review_file(_resolve(ctx, review), analysis.profile, analysis.categories)
    typer.echo(str(out_path))


if __name__ == "__main__":
    app()
