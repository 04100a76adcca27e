import json
import random
from fractions import Fraction
from pathlib import Path

import pandas as pd
import pytest

from conftest import (
    FTI_SCRIPT,
    PLAIN_STRATEGIST,
    SYNTHPAI_MINI,
    file_gateway,
    make_activity,
    make_attribute,
    scripted_gateway,
)
from pseudoscope.agents import CallLog
from pseudoscope.errors import EmptyInput, InvalidValue, KeyMismatch, SchemaMismatch
from pseudoscope.evaluation import (
    SYNTHPAI_KEYS,
    RankGroup,
    SynonymMatch,
    accuracy_frame,
    anonymity_set,
    by_certainty,
    by_confidence,
    by_hardness,
    calibration_accuracy,
    calibration_table,
    deanon_by_volume,
    exact_match,
    fti_baseline,
    hamming_distance,
    hamming_rank,
    is_nk_deanonymized,
    load_aux_dataset,
    load_schema,
    noisy_archives,
    prediction_accuracy,
    prediction_counts,
    profile_to_record,
    rank_of,
    reidentify,
    run_noise_experiment,
    run_synthpai_evaluation,
    select_all,
    to_synthpai_type,
    top_k_accuracy,
    truth_records,
    volume_bucket,
    write_results,
)
from pseudoscope.ingestion import SynthPAIDataset, load_synthpai
from pseudoscope.models import SYNTHPAI_TYPES, GroundTruthLabel, Profile

FTI_COUNTS = {
    "Age": (1, 1),
    "Sex": (1, 2),
    "Education": (1, 2),
    "Income Level": (0, 2),
    "Relationship Status": (2, 2),
    "Location": (2, 3),
    "Occupation": (2, 3),
}


@pytest.fixture
def dataset():
    return load_synthpai(SYNTHPAI_MINI)


@pytest.fixture
async def fti_result(dataset, config):
    return await run_synthpai_evaluation(dataset, "fti", config, file_gateway(FTI_SCRIPT))


def _profile(*attributes, user_id="u") -> Profile:
    return Profile(user_id=user_id, attributes=attributes)


# --- records ---


def test_profile_to_record_takes_most_confident_value():
    profile = _profile(
        make_attribute("Location", "Tacoma, USA", confidence=3),
        make_attribute("location ", "Seattle, USA.", confidence=5),
        make_attribute("Gender", "Female", confidence=4),
    )
    assert profile_to_record(profile) == {"location": "seattle, usa", "gender": "female"}
    assert profile_to_record(profile, closed_vocabulary=True) == {"sex": "female", "location": "seattle, usa"}


def test_to_synthpai_type():
    assert to_synthpai_type("Marital Status") == "Relationship Status"
    assert to_synthpai_type(" city ") == "Location"
    assert to_synthpai_type("Pet ownership") is None


def test_load_aux_dataset(tmp_path):
    path = tmp_path / "aux.jsonl"
    path.write_text('{"Location": "Seattle, USA.", "Age": ""}\n\n{"Occupation": " Nurse"}\n', encoding="utf-8")
    assert load_aux_dataset(path) == [{"location": "seattle, usa"}, {"occupation": "nurse"}]
    path.write_text("[1]\n", encoding="utf-8")
    with pytest.raises(SchemaMismatch, match="line 1: expected an object"):
        load_aux_dataset(path)


def test_load_aux_dataset_reports_malformed_line(tmp_path):
    path = tmp_path / "aux.jsonl"
    path.write_text('{"Age": "32"}\n{"Location": "Seattle\n', encoding="utf-8")
    with pytest.raises(SchemaMismatch, match="line 2: invalid JSON"):
        load_aux_dataset(path)


# --- (n, k)-deanonymization ---

TARGET = {"location": "seattle, usa", "age": "32", "sex": "female", "occupation": "nurse"}
AUX = [
    {"location": "seattle, usa", "age": "32", "sex": "female", "occupation": "nurse"},
    {"location": "seattle, usa", "age": "32", "sex": "female", "occupation": "teacher"},
    {"location": "seattle, usa", "age": "50", "sex": "male", "occupation": "farmer"},
    {"location": "boise, usa", "age": "41", "sex": "male", "occupation": "farmer"},
    {"location": "boise, usa", "age": "32", "sex": "male", "occupation": "teacher"},
]


def test_anonymity_set_and_nk():
    assert [anonymity_set(TARGET, AUX, n=n) for n in (1, 2, 3, 4)] == [4, 2, 2, 1]
    assert is_nk_deanonymized(TARGET, AUX, n=4, k=1)
    assert not is_nk_deanonymized(TARGET, AUX, n=4, k=0)
    assert not is_nk_deanonymized(TARGET, AUX, n=3, k=1)
    assert is_nk_deanonymized(TARGET, AUX, n=3, k=2)


def test_anonymity_set_accepts_profiles():
    profile = _profile(
        make_attribute("Location", "Seattle, USA."), make_attribute("Age", "32"), make_attribute("Sex", "Female")
    )
    assert anonymity_set(profile, AUX, n=3) == 2


def test_empty_aux_dataset_is_trivially_deanonymized():
    assert anonymity_set(TARGET, [], n=1) == 0
    assert is_nk_deanonymized(TARGET, [], n=1, k=1)


def test_nk_argument_checks():
    with pytest.raises(InvalidValue):
        anonymity_set(TARGET, AUX, n=0)
    with pytest.raises(InvalidValue):
        is_nk_deanonymized(TARGET, AUX, k=-1)


def test_synonym_match():
    match = SynonymMatch()
    assert match({"sex": "woman", "occupation": "swe"}, {"sex": "female", "occupation": "software engineer"}) == 2
    assert exact_match({"sex": "woman"}, {"sex": "female"}) == 0
    assert match.same("Relationship Status", "Husband", "married")
    assert anonymity_set({"sex": "f"}, [{"sex": "female"}, {"sex": "male"}], match) == 1


def _random_record(rng: random.Random, keys: list[str]) -> dict[str, str]:
    return {k: rng.choice("abc") for k in keys if rng.random() < 0.8}


def test_anonymity_set_matches_brute_force():
    rng = random.Random(11)
    keys = ["k1", "k2", "k3", "k4"]
    for _ in range(200):
        target = _random_record(rng, keys)
        aux = [_random_record(rng, keys) for _ in range(rng.randint(0, 12))]
        n = rng.randint(1, 4)
        expected = 0
        for record in aux:
            shared = [key for key in record if key in target and target[key] == record[key]]
            expected += len(shared) >= n
        assert anonymity_set(target, aux, n=n) == expected


def test_anonymity_set_shrinks_as_n_grows_and_nk_grows_with_k():
    rng = random.Random(12)
    keys = ["k1", "k2", "k3", "k4", "k5"]
    for _ in range(500):
        target = _random_record(rng, keys)
        aux = [_random_record(rng, keys) for _ in range(rng.randint(0, 15))]
        sizes = [anonymity_set(target, aux, n=n) for n in range(1, 6)]
        assert sizes == sorted(sizes, reverse=True)
        n = rng.randint(1, 5)
        flags = [is_nk_deanonymized(target, aux, n=n, k=k) for k in range(0, 16)]
        assert flags == sorted(flags)


# --- Hamming re-identification ---


def test_hamming_distance_counts_missing_as_mismatch():
    assert hamming_distance({"a": "1", "b": "2"}, {"a": "1", "b": "3"}, ["a", "b"]) == 1
    assert hamming_distance({"a": "1"}, {"a": "1", "b": "3"}, ["a", "b"]) == 1
    assert hamming_distance({}, {}, ["a", "b"]) == 0


def test_hamming_rank_groups_ties():
    candidates = {
        "x": {"a": "1", "b": "1"},
        "y": {"a": "2", "b": "1"},
        "z": {"a": "2", "b": "2"},
        "w": {"a": "1", "b": "1"},
    }
    groups = hamming_rank({"a": "1", "b": "1"}, candidates)
    assert groups == [
        RankGroup(rank=1, distance=0, members=("x", "w")),
        RankGroup(rank=3, distance=1, members=("y",)),
        RankGroup(rank=4, distance=2, members=("z",)),
    ]
    assert rank_of("w", groups) == 1
    assert rank_of("z", groups) == 4
    assert rank_of("nobody", groups) is None


def test_hamming_rank_key_checks():
    with pytest.raises(KeyMismatch):
        hamming_rank({"a": "1"}, {"x": {"a": "1"}, "y": {"b": "1"}})
    with pytest.raises(KeyMismatch):
        hamming_rank({"c": "1"}, {"x": {"a": "1"}})
    with pytest.raises(KeyMismatch):
        hamming_rank({"a": "1"}, {"x": {"a": "1", "z": "2"}}, keys=["a"])
    groups = hamming_rank({"a": "1"}, {"x": {"a": "1"}, "y": {"b": "1"}}, keys=["a", "b"])
    assert [g.members for g in groups] == [("x",), ("y",)]


def test_hamming_rank_matches_brute_force():
    rng = random.Random(13)
    keys = ["k1", "k2", "k3"]
    for _ in range(200):
        candidates = {f"c{i}": {k: rng.choice("ab") for k in keys} for i in range(rng.randint(1, 10))}
        inferred = {k: rng.choice("ab") for k in keys if rng.random() < 0.7}
        groups = hamming_rank(inferred, candidates)
        for candidate_id, candidate in candidates.items():
            distance = hamming_distance(inferred, candidate, keys)
            closer = sum(1 for other in candidates.values() if hamming_distance(inferred, other, keys) < distance)
            assert rank_of(candidate_id, groups) == closer + 1
        assert sum(len(g.members) for g in groups) == len(candidates)


def test_top_k_accuracy():
    assert top_k_accuracy([1, 3, None], 1) == pytest.approx(1 / 3)
    assert top_k_accuracy([1, 2, 3], 2) == pytest.approx(2 / 3)
    with pytest.raises(EmptyInput):
        top_k_accuracy([], 1)
    with pytest.raises(InvalidValue):
        top_k_accuracy([1], 0)


@pytest.mark.parametrize(
    "count, bucket",
    [(0, "<15"), (14, "<15"), (15, "15-20"), (19, "15-20"), (20, "20-25"), (25, "20-25"), (26, ">25")],
)
def test_volume_bucket(count, bucket):
    assert volume_bucket(count) == bucket


def test_volume_bucket_rejects_negative_counts():
    with pytest.raises(InvalidValue):
        volume_bucket(-1)


# --- prediction accuracy on the SynthPAI sample ---


async def test_fti_evaluation_accuracy(fti_result):
    assert sorted(fti_result.predictions) == [
        "coastal_kayaker", "diesel_dad", "night_owl", "quiet_coder", "retired_teacher",
    ]  # fmt: skip
    assert fti_result.fallbacks == 0
    assert fti_result.usage.calls == 5
    assert fti_result.accuracy == {t: pytest.approx(c / n) for t, (c, n) in FTI_COUNTS.items()}


async def test_prediction_counts_follow_type_order(fti_result, dataset):
    counts = prediction_counts(fti_result.predictions, dataset.labels)
    assert list(counts) == [t for t in SYNTHPAI_TYPES if t in FTI_COUNTS]
    assert counts == FTI_COUNTS
    assert sum(c for c, _ in counts.values()) == 9


async def test_synonym_matcher_accepts_equivalent_occupations(fti_result, dataset):
    accuracy = prediction_accuracy(fti_result.predictions, dataset.labels, SynonymMatch().same)
    assert accuracy["Occupation"] == 1.0
    assert accuracy["Education"] == 0.5


async def test_missing_predictions_count_as_wrong(dataset):
    assert prediction_accuracy({}, dataset.labels)["Age"] == 0.0


async def test_calibration(fti_result, dataset):
    predictions, labels = fti_result.predictions, dataset.labels
    by_level = [calibration_accuracy(predictions, labels, by_hardness(level)) for level in range(1, 6)]
    assert by_level == pytest.approx([1.0, 0.8, 1 / 3, 0.0, 0.0])
    assert calibration_accuracy(predictions, labels, select_all) == pytest.approx(9 / 15)
    assert calibration_accuracy(predictions, labels, by_confidence(5)) == pytest.approx(9 / 14)
    assert calibration_accuracy(predictions, labels, by_confidence(1)) is None

    table = calibration_table(predictions, labels)
    assert list(table.columns) == ["level_kind", "level", "count", "accuracy"]
    assert len(table) == 15
    hardness = table[table["level_kind"] == "hardness"]
    assert list(hardness["count"]) == [4, 5, 3, 2, 1]
    certainty = table[table["level_kind"] == "certainty"]
    assert list(certainty["count"]) == [1, 2, 3, 5, 4]
    confidence = table[table["level_kind"] == "confidence"]
    assert list(confidence["count"]) == [0, 0, 0, 0, 14]
    assert pd.isna(confidence.iloc[0]["accuracy"])


async def test_reidentification_on_sample(fti_result, dataset):
    truth = truth_records(dataset.labels)
    inferred = {u: profile_to_record(p, closed_vocabulary=True) for u, p in fti_result.predictions.items()}
    assert set(truth["night_owl"]) == {"education", "income level", "sex"}
    assert reidentify(inferred, truth) == {user_id: 1 for user_id in truth}
    assert set(SYNTHPAI_KEYS) >= set(truth["coastal_kayaker"])

    frame = deanon_by_volume(dataset, fti_result.predictions)
    assert list(frame["comments"]) == ["<15", "15-20", "20-25", ">25"]
    assert list(frame["users"]) == [5, 0, 0, 0]
    assert frame.iloc[0]["top1"] == 1.0
    assert pd.isna(frame.iloc[1]["top1"])


# --- brute-force oracles ---

_VALUES = ["a", "A.", "b", "c!"]


def _canon(value: str) -> str:
    return value.lower().rstrip(".!")


def _random_instance(rng: random.Random) -> tuple[dict[str, Profile], list[GroundTruthLabel]]:
    users = [f"u{i}" for i in range(rng.randint(1, 5))]
    truth = [
        GroundTruthLabel(
            user_id=rng.choice(users),
            attr_type=rng.choice(SYNTHPAI_TYPES),
            true_value=rng.choice(_VALUES),
            hardness=rng.randint(1, 5),
            certainty=rng.randint(1, 5),
        )
        for _ in range(rng.randint(0, 14))
    ]
    predictions = {}
    for user in users:
        if rng.random() < 0.2:
            continue
        attributes = {}
        for _ in range(rng.randint(0, 8)):
            attribute = make_attribute(rng.choice(SYNTHPAI_TYPES), rng.choice(_VALUES), confidence=rng.randint(1, 5))
            attributes.setdefault(attribute.key(), attribute)
        predictions[user] = Profile(user_id=user, attributes=tuple(attributes.values()))
    return predictions, truth


def _brute_best(predictions, label):
    profile = predictions.get(label.user_id)
    candidates = [a for a in (profile.attributes if profile else ()) if a.attr_type == label.attr_type]
    return max(candidates, key=lambda a: a.confidence) if candidates else None


def _brute_correct(predictions, label) -> bool:
    best = _brute_best(predictions, label)
    return best is not None and _canon(best.primary) == _canon(label.true_value)


def test_prediction_accuracy_matches_brute_force():
    rng = random.Random(21)
    for _ in range(200):
        predictions, truth = _random_instance(rng)
        expected = {}
        for attr_type in SYNTHPAI_TYPES:
            labels = [label for label in truth if label.attr_type == attr_type]
            if labels:
                correct = sum(_brute_correct(predictions, label) for label in labels)
                expected[attr_type] = float(Fraction(correct, len(labels)))
        assert prediction_accuracy(predictions, truth) == expected


def test_calibration_accuracy_matches_brute_force():
    rng = random.Random(22)
    for _ in range(200):
        predictions, truth = _random_instance(rng)
        for level in range(1, 6):
            groups = {
                "hardness": (by_hardness(level), [label for label in truth if label.hardness == level]),
                "certainty": (by_certainty(level), [label for label in truth if label.certainty == level]),
                "confidence": (
                    by_confidence(level),
                    [
                        label
                        for label in truth
                        if (best := _brute_best(predictions, label)) is not None and best.confidence == level
                    ],
                ),
            }
            for selector, selected in groups.values():
                expected = (
                    float(Fraction(sum(_brute_correct(predictions, label) for label in selected), len(selected)))
                    if selected
                    else None
                )
                assert calibration_accuracy(predictions, truth, selector) == expected


def _random_partition(rng: random.Random) -> list[set[int]]:
    blocks: list[set[int]] = []
    for level in range(1, 6):
        if blocks and rng.random() < 0.5:
            rng.choice(blocks).add(level)
        else:
            blocks.append({level})
    return blocks


def test_level_accuracies_average_back_to_overall_accuracy():
    rng = random.Random(23)
    fixtures = 0
    while fixtures < 100:
        predictions, truth = _random_instance(rng)
        if not truth:
            continue
        fixtures += 1
        overall = calibration_accuracy(predictions, truth, select_all)
        for level_of in (lambda label: label.hardness, lambda label: label.certainty):
            weighted = 0.0
            for block in _random_partition(rng):

                def selector(label, _, block=block):
                    return level_of(label) in block

                count = sum(1 for label in truth if selector(label, None))
                accuracy = calibration_accuracy(predictions, truth, selector)
                if count:
                    weighted += count * accuracy
            assert abs(weighted / len(truth) - overall) <= 1e-12


def test_accuracy_frame():
    frame = accuracy_frame({"original": {"Location": 2 / 3}, "noisy": {}})
    assert list(frame.columns) == ["run", *SYNTHPAI_TYPES]
    assert frame.iloc[0]["Location"] == 66.7
    assert pd.isna(frame.iloc[1]["Location"])


# --- FTI baseline ---


async def test_fti_keeps_schema_types_in_schema_order(team_for):
    reply = json.dumps(
        {
            "attributes": [
                {"type": "Location", "value": ["Berlin, Germany"], "confidence": 3},
                {"type": "Hobby", "value": ["chess"], "confidence": 5},
                {"type": "age", "value": ["40"], "confidence": 4},
                {"type": "Age", "value": ["41"], "confidence": 4},
            ]
        }
    )
    team = team_for(({"agent": "fti"}, reply))
    profile = await fti_baseline([make_activity(1)], team, load_schema(), "u")
    assert [(a.attr_type, a.primary, a.confidence) for a in profile.attributes] == [
        ("Age", "40", 5),
        ("Location", "Berlin, Germany", 5),
    ]


async def test_fti_out_of_vocabulary_answers_are_repaired_then_dropped(team_for):
    reply = json.dumps(
        {
            "attributes": [
                {"type": "Sex", "value": ["robot"], "confidence": 5},
                {"type": "Age", "value": ["40"], "confidence": 5},
            ]
        }
    )
    team = team_for(({"agent": "fti"}, reply))
    log = CallLog()
    profile = await fti_baseline([make_activity(1)], team, load_schema(), "u", log)
    assert [a.attr_type for a in profile.attributes] == ["Age"]
    assert log.fallbacks == 1
    assert team.gateway.backend.calls == 3
    assert log.records[0].warnings == ["InvalidField(value)"]


async def test_fti_prompt_lists_allowed_values(team_for):
    team = team_for(({"agent": "fti", "contains": "Sex: one of male, female"}, '{"attributes": []}'))
    profile = await fti_baseline([make_activity(1)], team, load_schema(), "u")
    assert profile == Profile(user_id="u")


async def test_fti_needs_activities(team_for):
    with pytest.raises(EmptyInput):
        await fti_baseline([], team_for(), load_schema(), "u")


# --- harnesses ---


def _workflow_gateway():
    location = json.dumps(
        {"attributes": [{"type": "Location", "value": ["Seattle, USA"], "confidence": 4, "evidence": [{"seq": 1}]}]}
    )
    return scripted_gateway(
        *PLAIN_STRATEGIST,
        ({"agent": "extractor", "contains": "Paddled past"}, location),
        ({"agent": "extractor"}, '{"attributes": []}'),
        ({"agent": "summarizer"}, location),
    )


async def test_autoprofiler_evaluation_runs_every_user(dataset, config):
    result = await run_synthpai_evaluation(dataset, "autoprofiler", config, _workflow_gateway(), jobs=3)
    assert result.method == "autoprofiler"
    assert [a.primary for a in result.predictions["coastal_kayaker"].attributes] == ["Seattle, USA"]
    assert result.predictions["diesel_dad"].attributes == ()
    assert result.accuracy["Location"] == pytest.approx(1 / 3)
    run_dirs = sorted(p.name for p in Path(config.runs_dir).iterdir())
    assert run_dirs == [f"autoprofiler-{u}" for u in sorted(dataset.archives)]


async def test_evaluation_argument_checks(dataset, config):
    with pytest.raises(InvalidValue):
        await run_synthpai_evaluation(dataset, "oracle", config, scripted_gateway())
    with pytest.raises(InvalidValue):
        await run_synthpai_evaluation(dataset, "fti", config, scripted_gateway(), jobs=0)


def test_noisy_archives(dataset):
    noisy = noisy_archives(dataset, 0.34, seed=3)
    assert noisy == noisy_archives(dataset, 0.34, seed=3)
    for user_id, activities in noisy.items():
        original = dataset.archives[user_id]
        assert [a.seq for a in activities] == [a.seq for a in original]
        foreign = [a for a in activities if a.id.startswith("noise:")]
        assert len(foreign) == 1
        assert foreign[0].text not in {a.text for a in original}


async def test_noise_experiment(dataset, config, tmp_path):
    script = tmp_path / "fti.jsonl"
    catch_all = json.dumps({"match": {"agent": "fti"}, "response": '{"attributes": []}'})
    script.write_text(FTI_SCRIPT.read_text(encoding="utf-8").rstrip("\n") + "\n" + catch_all + "\n", encoding="utf-8")
    frame, results = await run_noise_experiment(dataset, 0.34, 3, config, file_gateway(script), method="fti")
    assert list(frame["run"]) == ["original", "noisy"]
    assert frame.iloc[0]["Location"] == 66.7
    assert set(results) == {"original", "noisy"}

    path = write_results(frame, {label: r.detail() for label, r in results.items()}, tmp_path / "out", "noise")
    assert path.name == "noise.csv"
    assert list(pd.read_csv(path)["run"]) == ["original", "noisy"]
    detail = json.loads((tmp_path / "out" / "noise.json").read_text(encoding="utf-8"))
    assert detail["original"]["method"] == "fti"
    assert set(detail["noisy"]["predictions"]) == set(dataset.archives)


async def test_full_noise_swaps_two_archives_and_drops_their_hits(dataset, config):
    # One comment per user and fraction 1.0: each user's only comment becomes the other user's.
    users = ["coastal_kayaker", "diesel_dad"]
    pair = SynthPAIDataset(
        archives={u: dataset.archives[u][:1] for u in users},
        labels=[label for label in dataset.labels if label.user_id in users],
    )
    noisy = noisy_archives(pair, 1.0, seed=0)
    assert noisy["coastal_kayaker"][0].text == pair.archives["diesel_dad"][0].text
    assert noisy["diesel_dad"][0].text == pair.archives["coastal_kayaker"][0].text

    frame, _ = await run_noise_experiment(pair, 1.0, 0, config, file_gateway(FTI_SCRIPT), method="fti")
    original = frame.iloc[0]
    noisy_row = frame.iloc[1]
    expected_original = {
        "Location": 50.0,
        "Sex": 100.0,
        "Education": 0.0,
        "Occupation": 100.0,
        "Relationship Status": 100.0,
    }
    for attr_type, value in expected_original.items():
        assert original[attr_type] == value
        assert noisy_row[attr_type] == 0.0
    delta = {t: noisy_row[t] - original[t] for t in expected_original}
    assert delta == {
        "Location": -50.0,
        "Sex": -100.0,
        "Education": 0.0,
        "Occupation": -100.0,
        "Relationship Status": -100.0,
    }
    for attr_type in ("Age", "Income Level", "Place of Birth"):
        assert pd.isna(original[attr_type]) and pd.isna(noisy_row[attr_type])
