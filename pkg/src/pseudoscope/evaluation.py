"""Quantitative evaluation: (n, k)-deanonymization, Hamming re-identification, prediction and
calibration accuracy, the single-call FTI baseline, and the SynthPAI experiment harnesses.

All values are compared in normalized form (`pseudoscope.models.normalize`). Auxiliary records are
flat `{normalized type: normalized value}` dicts.
"""

import asyncio
import json
import logging
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal

import pandas as pd

from .agents import FTI, AgentTeam, CallLog, PromptLibrary, parse_lenient, render_batch
from .errors import EmptyInput, InvalidField, InvalidValue, KeyMismatch, RepairExhausted
from .ingestion import InMemorySource, SynthPAIDataset, inject_noise, read_jsonl
from .llm.gateway import Gateway, UsageRecord
from .models import (
    SYNTHPAI_TYPES,
    Activity,
    AuxDataset,
    AuxRecord,
    GroundTruthLabel,
    InferredAttribute,
    Profile,
    normalize,
    normalize_record,
    normalize_type,
)
from .orchestrator import ProfilerConfig, run_profile
from .protocol import parse_extractor
from .utils import atomic_write_text, canonical_json

logger = logging.getLogger(__name__)

Method = Literal["autoprofiler", "fti"]
Schema = dict[str, list[str] | None]
MatchFunction = Callable[[Profile | AuxRecord, AuxRecord], int]
# (label, the prediction for it or None) -> whether the label belongs to the selected level
Selector = Callable[[GroundTruthLabel, InferredAttribute | None], bool]

SYNTHPAI_KEYS: tuple[str, ...] = tuple(normalize_type(t) for t in SYNTHPAI_TYPES)
VOLUME_BUCKETS: tuple[tuple[str, int, int | None], ...] = (
    ("<15", 0, 15),
    ("15-20", 15, 20),
    ("20-25", 20, 26),
    (">25", 26, None),
)

# Open-vocabulary type names the agents tend to produce, mapped onto the eight SynthPAI types.
_TYPE_ALIASES: dict[str, str] = {
    "age": "Age",
    "age range": "Age",
    "sex": "Sex",
    "gender": "Sex",
    "education": "Education",
    "education level": "Education",
    "educational background": "Education",
    "highest degree": "Education",
    "income": "Income Level",
    "income level": "Income Level",
    "income bracket": "Income Level",
    "relationship status": "Relationship Status",
    "marital status": "Relationship Status",
    "place of birth": "Place of Birth",
    "birthplace": "Place of Birth",
    "hometown": "Place of Birth",
    "location": "Location",
    "current location": "Location",
    "city": "Location",
    "residence": "Location",
    "occupation": "Occupation",
    "job": "Occupation",
    "profession": "Occupation",
}

DEFAULT_SYNONYMS: dict[str, dict[str, str]] = {
    "sex": {"man": "male", "m": "male", "woman": "female", "f": "female"},
    "relationship status": {
        "wife": "married",
        "husband": "married",
        "partnered": "in a relationship",
        "dating": "in a relationship",
        "fiance": "engaged",
    },
    "education": {
        "bachelor's degree": "college degree",
        "bachelors degree": "college degree",
        "master's degree": "college degree",
        "masters degree": "college degree",
        "high school diploma": "hs diploma",
        "doctorate": "phd",
    },
    "income level": {"middle": "medium", "average": "medium", "none": "no"},
    "occupation": {"swe": "software engineer", "software developer": "software engineer", "rn": "nurse"},
}


def to_synthpai_type(attr_type: str) -> str | None:
    """Closed-vocabulary SynthPAI type for a free-form attribute type, or None."""
    return _TYPE_ALIASES.get(normalize_type(attr_type))


def best_attribute(profile: Profile, attr_type: str) -> InferredAttribute | None:
    """Highest-confidence attribute mapping onto `attr_type`; ties keep profile order."""
    best: InferredAttribute | None = None
    for attribute in profile.attributes:
        if to_synthpai_type(attribute.attr_type) == attr_type and (
            best is None or attribute.confidence > best.confidence
        ):
            best = attribute
    return best


def profile_to_record(profile: Profile, closed_vocabulary: bool = False) -> AuxRecord:
    """Flatten a profile to one normalized primary value per normalized type.

    With `closed_vocabulary` only the eight SynthPAI types are kept, keyed by their SynthPAI name.
    """
    if closed_vocabulary:
        record = {}
        for attr_type in SYNTHPAI_TYPES:
            attribute = best_attribute(profile, attr_type)
            if attribute is not None:
                record[normalize_type(attr_type)] = normalize(attr_type, attribute.primary)
        return record

    ranked = sorted(enumerate(profile.attributes), key=lambda item: (-item[1].confidence, item[0]))
    record = {}
    for _, attribute in ranked:
        record.setdefault(normalize_type(attribute.attr_type), normalize(attribute.attr_type, attribute.primary))
    return record


def truth_records(labels: Iterable[GroundTruthLabel]) -> dict[str, AuxRecord]:
    records: dict[str, AuxRecord] = {}
    for label in labels:
        records.setdefault(label.user_id, {})[normalize_type(label.attr_type)] = normalize(
            label.attr_type, label.true_value
        )
    return records


def load_aux_dataset(path: str | Path) -> AuxDataset:
    """JSONL of flat {attribute type: value} objects; keys and values are normalized on load."""
    return [normalize_record(obj) for _, obj in read_jsonl(path)]


def _as_record(profile: Profile | AuxRecord) -> AuxRecord:
    return profile_to_record(profile) if isinstance(profile, Profile) else profile


# --- matching ---


def exact_match(profile: Profile | AuxRecord, record: AuxRecord) -> int:
    """Number of attribute types whose normalized values are equal in both."""
    inferred = _as_record(profile)
    return sum(1 for key, value in record.items() if inferred.get(key) == value)


class SynonymMatch:
    """Like `exact_match`, but values are first mapped through a per-type synonym table."""

    def __init__(self, synonyms: Mapping[str, Mapping[str, str]] = DEFAULT_SYNONYMS):
        self.synonyms = {
            normalize_type(attr_type): {normalize(attr_type, k): normalize(attr_type, v) for k, v in table.items()}
            for attr_type, table in synonyms.items()
        }

    def canonical(self, key: str, value: str) -> str:
        return self.synonyms.get(key, {}).get(value, value)

    def same(self, attr_type: str, left: str, right: str) -> bool:
        key = normalize_type(attr_type)
        return self.canonical(key, normalize(attr_type, left)) == self.canonical(key, normalize(attr_type, right))

    def __call__(self, profile: Profile | AuxRecord, record: AuxRecord) -> int:
        inferred = _as_record(profile)
        return sum(
            1
            for key, value in record.items()
            if key in inferred and self.canonical(key, inferred[key]) == self.canonical(key, value)
        )


# --- (n, k)-deanonymization ---


def anonymity_set(profile: Profile | AuxRecord, aux: AuxDataset, f: MatchFunction = exact_match, n: int = 1) -> int:
    """Number of auxiliary records sharing at least `n` matching attributes with the profile."""
    if n < 1:
        raise InvalidValue(f"n must be >= 1, got {n}")
    return sum(1 for record in aux if f(profile, record) >= n)


def is_nk_deanonymized(
    profile: Profile | AuxRecord, aux: AuxDataset, f: MatchFunction = exact_match, n: int = 1, k: int = 1
) -> bool:
    if k < 0:
        raise InvalidValue(f"k must be >= 0, got {k}")
    return anonymity_set(profile, aux, f, n) <= k


# --- Hamming re-identification ---


@dataclass(frozen=True)
class RankGroup:
    rank: int
    distance: int
    members: tuple[str, ...]


def _key_set(candidates: Mapping[str, AuxRecord], keys: Iterable[str] | None) -> frozenset[str]:
    if keys is not None:
        key_set = frozenset(keys)
        for candidate_id, record in candidates.items():
            if not record.keys() <= key_set:
                raise KeyMismatch(f"candidate {candidate_id} has keys outside {sorted(key_set)}")
        return key_set
    key_sets = {frozenset(record) for record in candidates.values()}
    if len(key_sets) > 1:
        raise KeyMismatch(f"candidates disagree on attribute keys: {sorted(sorted(k) for k in key_sets)}")
    return next(iter(key_sets), frozenset())


def hamming_distance(left: AuxRecord, right: AuxRecord, keys: Iterable[str]) -> int:
    """Keys whose values differ; a value present on one side only counts as a mismatch."""
    return sum(1 for key in keys if left.get(key) != right.get(key))


def hamming_rank(
    inferred: Profile | AuxRecord, candidates: Mapping[str, AuxRecord], keys: Iterable[str] | None = None
) -> list[RankGroup]:
    """Candidates grouped by ascending Hamming distance; ties share a group and a rank.

    Without `keys`, all candidates must share one key set. The inferred record may lack keys but must
    not add any.
    """
    record = profile_to_record(inferred, closed_vocabulary=True) if isinstance(inferred, Profile) else inferred
    key_set = _key_set(candidates, keys)
    if not record.keys() <= key_set:
        raise KeyMismatch(f"inferred record has keys outside {sorted(key_set)}: {sorted(record.keys() - key_set)}")
    ordered_keys = sorted(key_set)

    by_distance: dict[int, list[str]] = {}
    for candidate_id, candidate in candidates.items():
        by_distance.setdefault(hamming_distance(record, candidate, ordered_keys), []).append(candidate_id)

    groups, rank = [], 1
    for distance in sorted(by_distance):
        members = tuple(by_distance[distance])
        groups.append(RankGroup(rank=rank, distance=distance, members=members))
        rank += len(members)
    return groups


def rank_of(candidate_id: str, groups: Iterable[RankGroup]) -> int | None:
    for group in groups:
        if candidate_id in group.members:
            return group.rank
    return None


def top_k_accuracy(ranks: Iterable[int | None], k: int) -> float:
    """Fraction of targets whose true record's group starts at rank <= k."""
    if k < 1:
        raise InvalidValue(f"k must be >= 1, got {k}")
    ranks = list(ranks)
    if not ranks:
        raise EmptyInput("no targets to rank")
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def reidentify(
    inferred: Mapping[str, AuxRecord], truth: Mapping[str, AuxRecord], keys: Iterable[str] = SYNTHPAI_KEYS
) -> dict[str, int | None]:
    """Rank of each user's own record among all ground-truth records."""
    keys = tuple(keys)
    return {user_id: rank_of(user_id, hamming_rank(record, truth, keys)) for user_id, record in inferred.items()}


# --- prediction and calibration accuracy ---


ValueMatcher = Callable[[str, str, str], bool]


def _exact_value(attr_type: str, predicted: str, true_value: str) -> bool:
    return normalize(attr_type, predicted) == normalize(attr_type, true_value)


def _is_correct(
    label: GroundTruthLabel, predictions: Mapping[str, Profile], matcher: ValueMatcher
) -> tuple[bool, InferredAttribute | None]:
    profile = predictions.get(label.user_id)
    attribute = best_attribute(profile, label.attr_type) if profile is not None else None
    if attribute is None:
        return False, None
    return matcher(label.attr_type, attribute.primary, label.true_value), attribute


def prediction_counts(
    predictions: Mapping[str, Profile], truth: Iterable[GroundTruthLabel], matcher: ValueMatcher = _exact_value
) -> dict[str, tuple[int, int]]:
    """(correct, total) per SynthPAI type present in `truth`, in SynthPAI type order."""
    counts = {attr_type: [0, 0] for attr_type in SYNTHPAI_TYPES}
    for label in truth:
        correct, _ = _is_correct(label, predictions, matcher)
        counts[label.attr_type][0] += int(correct)
        counts[label.attr_type][1] += 1
    return {t: (c, n) for t, (c, n) in counts.items() if n}


def prediction_accuracy(
    predictions: Mapping[str, Profile], truth: Iterable[GroundTruthLabel], matcher: ValueMatcher = _exact_value
) -> dict[str, float]:
    """Correct / total per attribute type; a missing prediction counts as incorrect."""
    return {t: c / n for t, (c, n) in prediction_counts(predictions, truth, matcher).items()}


def calibration_accuracy(
    predictions: Mapping[str, Profile],
    truth: Iterable[GroundTruthLabel],
    selector: Selector,
    matcher: ValueMatcher = _exact_value,
) -> float | None:
    """Accuracy over the labels picked by `selector`; None when it picks nothing."""
    selected = total = 0
    for label in truth:
        correct, attribute = _is_correct(label, predictions, matcher)
        if selector(label, attribute):
            total += 1
            selected += int(correct)
    return selected / total if total else None


def by_hardness(level: int) -> Selector:
    return lambda label, _: label.hardness == level


def by_certainty(level: int) -> Selector:
    return lambda label, _: label.certainty == level


def by_confidence(level: int) -> Selector:
    return lambda _, attribute: attribute is not None and attribute.confidence == level


def select_all(label: GroundTruthLabel, attribute: InferredAttribute | None) -> bool:
    return True


def calibration_table(
    predictions: Mapping[str, Profile], truth: Iterable[GroundTruthLabel], matcher: ValueMatcher = _exact_value
) -> pd.DataFrame:
    """Calibration accuracy for every hardness, certainty and model-confidence level."""
    truth = list(truth)
    rows = []
    for kind, make in (("hardness", by_hardness), ("certainty", by_certainty), ("confidence", by_confidence)):
        for level in range(1, 6):
            selector = make(level)
            count = sum(1 for label in truth if selector(label, _is_correct(label, predictions, matcher)[1]))
            accuracy = calibration_accuracy(predictions, truth, selector, matcher)
            rows.append({"level_kind": kind, "level": level, "count": count, "accuracy": accuracy})
    return pd.DataFrame(rows, columns=["level_kind", "level", "count", "accuracy"])


def accuracy_frame(accuracies: Mapping[str, Mapping[str, float]]) -> pd.DataFrame:
    """One row per run label, one column per SynthPAI type, values in percent."""
    rows = []
    for label, per_type in accuracies.items():
        row: dict[str, object] = {"run": label}
        for attr_type in SYNTHPAI_TYPES:
            value = per_type.get(attr_type)
            row[attr_type] = None if value is None else round(100 * value, 1)
        rows.append(row)
    return pd.DataFrame(rows, columns=["run", *SYNTHPAI_TYPES])


# --- FTI baseline ---


def load_schema(path: str | Path | None = None) -> Schema:
    if path is None:
        text = resources.files("pseudoscope.assets").joinpath("synthpai_schema.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return json.loads(text)


def render_schema(schema: Schema) -> str:
    lines = []
    for attr_type, allowed in schema.items():
        lines.append(f"- {attr_type}: " + ("free text" if allowed is None else "one of " + ", ".join(allowed)))
    return "\n".join(lines)


def _closed_answers(attributes: Iterable[InferredAttribute], schema: Schema, strict: bool) -> list[InferredAttribute]:
    allowed = {
        normalize_type(t): (t, None if values is None else {normalize(t, v) for v in values})
        for t, values in schema.items()
    }
    answers: dict[str, InferredAttribute] = {}
    for attribute in attributes:
        key = normalize_type(attribute.attr_type)
        if key not in allowed or key in answers:
            continue
        attr_type, vocabulary = allowed[key]
        value = attribute.primary
        if vocabulary is not None and normalize(attr_type, value) not in vocabulary:
            if strict:
                raise InvalidField("value", f"{value!r} is not an allowed {attr_type}")
            logger.warning(f"Dropping out-of-vocabulary {attr_type} answer {value!r}")
            continue
        answers[key] = InferredAttribute(attr_type=attr_type, values=(value,), confidence=5, evidence=())
    return [answers[key] for key in allowed if key in answers]


async def fti_baseline(
    activities: list[Activity], team: AgentTeam, schema: Schema, user_id: str, log: CallLog | None = None
) -> Profile:
    """Single-call closed-vocabulary inference over the whole archive.

    Out-of-vocabulary answers are re-requested through the repair loop; when that is exhausted the
    usable answers of the last reply are kept and the rest are missing.
    """
    if not activities:
        raise EmptyInput(f"archive of {user_id} has no activities")
    log = log or CallLog()
    prompt = team.prompts.render(FTI, schema=render_schema(schema), batch_text=render_batch(activities))
    try:
        attributes = await team.ask(FTI, prompt, lambda raw: _closed_answers(parse_extractor(raw), schema, True), log)
    except RepairExhausted as e:
        logger.warning(f"FTI answers for {user_id} still invalid after retries; keeping the valid ones")
        log.fallbacks += 1
        attributes = _closed_answers(parse_lenient(e.raw_outputs[-1]), schema, False)
    return Profile(user_id=user_id, attributes=tuple(attributes))


# --- harnesses ---


@dataclass
class EvaluationResult:
    method: str
    predictions: dict[str, Profile]
    accuracy: dict[str, float]
    usage: UsageRecord = field(default_factory=UsageRecord)
    fallbacks: int = 0

    def detail(self) -> dict:
        return {
            "method": self.method,
            "accuracy": self.accuracy,
            "usage": self.usage.model_dump(mode="json"),
            "fallbacks": self.fallbacks,
            "predictions": {u: p.model_dump(mode="json") for u, p in sorted(self.predictions.items())},
        }


async def _predict_users(
    archives: Mapping[str, list[Activity]],
    method: Method,
    config: ProfilerConfig,
    gateway: Gateway,
    prompts: PromptLibrary,
    jobs: int,
    run_prefix: str,
) -> tuple[dict[str, Profile], UsageRecord, int]:
    if jobs < 1:
        raise InvalidValue(f"jobs must be >= 1, got {jobs}")
    semaphore = asyncio.Semaphore(jobs)
    schema = load_schema() if method == "fti" else {}
    team = AgentTeam(gateway, prompts, config.agents)

    async def predict(user_id: str, activities: list[Activity]) -> tuple[Profile, UsageRecord, int]:
        async with semaphore:
            if method == "fti":
                log = CallLog()
                profile = await fti_baseline(activities, team, schema, user_id, log)
                return profile, log.usage, log.fallbacks
            source = InMemorySource(activities, user_id=user_id)
            result = await run_profile(source, config, gateway, prompts, run_id=f"{run_prefix}{user_id}")
            return result.profile, result.usage, result.state.fallbacks

    users = sorted(archives)
    outcomes = await asyncio.gather(*(predict(u, archives[u]) for u in users))
    usage, fallbacks = UsageRecord(), 0
    for _, user_usage, user_fallbacks in outcomes:
        usage = usage + user_usage
        fallbacks += user_fallbacks
    return {u: outcome[0] for u, outcome in zip(users, outcomes)}, usage, fallbacks


async def run_synthpai_evaluation(
    dataset: SynthPAIDataset,
    method: Method,
    config: ProfilerConfig,
    gateway: Gateway,
    prompts: PromptLibrary | None = None,
    jobs: int = 1,
    run_prefix: str = "",
) -> EvaluationResult:
    """Profile every user of the dataset with `method` and score against its labels."""
    if method not in ("autoprofiler", "fti"):
        raise InvalidValue(f"Unknown method {method!r}")
    prompts = prompts or PromptLibrary.load(config.prompts_dir)
    logger.info(f"Evaluating {method} on {len(dataset.archives)} users with {jobs} job(s)")
    predictions, usage, fallbacks = await _predict_users(
        dataset.archives, method, config, gateway, prompts, jobs, run_prefix or f"{method}-"
    )
    accuracy = prediction_accuracy(predictions, dataset.labels)
    return EvaluationResult(method, predictions, accuracy, usage, fallbacks)


def noisy_archives(dataset: SynthPAIDataset, fraction: float, seed: int | str) -> dict[str, list[Activity]]:
    """Each user's archive with `fraction` of it replaced by other users' comments."""
    noisy = {}
    for user_id in sorted(dataset.archives):
        pool = [a for other in sorted(dataset.archives) if other != user_id for a in dataset.archives[other]]
        noisy[user_id] = inject_noise(dataset.archives[user_id], pool, fraction, seed, user_id)
    return noisy


async def run_noise_experiment(
    dataset: SynthPAIDataset,
    fraction: float,
    seed: int | str,
    config: ProfilerConfig,
    gateway: Gateway,
    method: Method = "autoprofiler",
    prompts: PromptLibrary | None = None,
    jobs: int = 1,
) -> tuple[pd.DataFrame, dict[str, EvaluationResult]]:
    """Same method, templates and seed on the original and on the noise-injected dataset."""
    noisy = SynthPAIDataset(archives=noisy_archives(dataset, fraction, seed), labels=dataset.labels)
    results = {
        "original": await run_synthpai_evaluation(
            dataset, method, config, gateway, prompts, jobs, run_prefix=f"{method}-original-"
        ),
        "noisy": await run_synthpai_evaluation(
            noisy, method, config, gateway, prompts, jobs, run_prefix=f"{method}-noisy-"
        ),
    }
    frame = accuracy_frame({label: result.accuracy for label, result in results.items()})
    return frame, results


def volume_bucket(count: int) -> str:
    for name, low, high in VOLUME_BUCKETS:
        if count >= low and (high is None or count < high):
            return name
    raise InvalidValue(f"negative activity count {count}")


def deanon_by_volume(dataset: SynthPAIDataset, predictions: Mapping[str, Profile]) -> pd.DataFrame:
    """Top-1 and top-2 Hamming re-identification accuracy grouped by comments per user."""
    truth = truth_records(dataset.labels)
    inferred = {u: profile_to_record(p, closed_vocabulary=True) for u, p in predictions.items() if u in truth}
    ranks = reidentify(inferred, truth)
    rows = []
    for name, _, _ in VOLUME_BUCKETS:
        bucket = [ranks[u] for u in sorted(ranks) if volume_bucket(len(dataset.archives.get(u, []))) == name]
        rows.append(
            {
                "comments": name,
                "users": len(bucket),
                "top1": top_k_accuracy(bucket, 1) if bucket else None,
                "top2": top_k_accuracy(bucket, 2) if bucket else None,
            }
        )
    return pd.DataFrame(rows, columns=["comments", "users", "top1", "top2"])


def write_results(frame: pd.DataFrame, detail: dict, out_dir: str | Path, name: str) -> Path:
    """`<name>.csv` with the table and `<name>.json` with the full detail."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    frame.to_csv(csv_path, index=False)
    atomic_write_text(out / f"{name}.json", canonical_json(detail))
    logger.info(f"Wrote {csv_path}")
    return csv_path
