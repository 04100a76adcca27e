import json
import random
from datetime import datetime, timezone

import pytest
from pydantic import ValidationError

from conftest import GOLDEN, make_activity, make_attribute
from pseudoscope.errors import (
    ConfidenceInvalid,
    InvalidField,
    InvalidValue,
    MissingField,
    NoJsonFound,
    ProtocolError,
    RepairExhausted,
    ScriptMiss,
    UnknownAction,
    UnknownCategory,
)
from pseudoscope.models import (
    Action,
    Activity,
    ActivityKind,
    Category,
    Evidence,
    InferredAttribute,
    Profile,
    StrategistDecision,
)
from pseudoscope.protocol import (
    CORRECTIVE_PROMPT,
    AttributeReply,
    CategoryReply,
    MessageEnvelope,
    Sender,
    StrategistReply,
    decode,
    encode,
    envelope_for,
    extract_json_object,
    parse_category,
    parse_extractor,
    parse_strategist,
    repair_loop,
)

# --- JSON extraction ---


def test_extract_plain_object():
    assert extract_json_object('{"a": 1}') == {"a": 1}


def test_extract_from_fence():
    raw = 'Sure!\n```json\n{"action": "finish", "rationale": "done"}\n```\nAnything else?'
    assert extract_json_object(raw)["action"] == "finish"


def test_extract_skips_prose_braces():
    raw = 'I think {this} is it: {"category": "Health"} and {"category": "Finance"}'
    assert extract_json_object(raw) == {"category": "Health"}


def test_extract_honours_braces_in_strings():
    raw = 'x {"quote": "a } inside", "n": {"m": 2}} y'
    assert extract_json_object(raw) == {"quote": "a } inside", "n": {"m": 2}}


@pytest.mark.parametrize("raw", ["", "   ", "no json here", "[1, 2, 3]", '{"unterminated": '])
def test_extract_without_object(raw):
    with pytest.raises(NoJsonFound):
        extract_json_object(raw)


def test_extract_never_returns_a_nested_object():
    with pytest.raises(NoJsonFound):
        extract_json_object('x {"outer": {"inner": 1}, bad} y')


def test_extract_stops_at_unbalanced_top_level_brace():
    with pytest.raises(NoJsonFound):
        extract_json_object("{" * 20_000 + '{"a": 1}')


def test_extract_resumes_after_a_failed_group():
    assert extract_json_object('{not json} then {"a": {"b": 2}}') == {"a": {"b": 2}}


# --- strategist ---


def test_parse_strategist():
    decision = parse_strategist('{"action": "Retrieve", "rationale": "need more", "instructions": "look for jobs"}')
    assert decision == StrategistDecision(action=Action.RETRIEVE, rationale="need more", instructions="look for jobs")


def test_parse_strategist_is_case_insensitive_and_instructions_optional():
    decision = parse_strategist('{"action": " INFER ", "rationale": ""}')
    assert decision.action is Action.INFER
    assert decision.instructions == ""
    assert parse_strategist('{"action": "finish", "rationale": "x", "instructions": null}').instructions == ""


@pytest.mark.parametrize(
    "raw, error",
    [
        ('{"rationale": "x"}', MissingField),
        ('{"action": "retrieve"}', MissingField),
        ('{"action": "dance", "rationale": "x"}', UnknownAction),
        ('{"action": 3, "rationale": "x"}', InvalidField),
        ('{"action": "finish", "rationale": 5}', InvalidField),
        ("retrieve please", NoJsonFound),
    ],
)
def test_parse_strategist_errors(raw, error):
    with pytest.raises(error):
        parse_strategist(raw)


def test_error_labels_are_stable():
    with pytest.raises(UnknownAction) as e:
        parse_strategist('{"action": "dance", "rationale": "x"}')
    assert e.value.label == "UnknownAction(dance)"
    with pytest.raises(MissingField) as e:
        parse_strategist('{"action": "finish"}')
    assert e.value.label == "MissingField(rationale)"


def test_reply_models_validate_directly():
    reply = StrategistReply.model_validate({"action": "refine", "rationale": "merge", "extra": 1})
    assert reply.to_decision() == StrategistDecision(action=Action.REFINE, rationale="merge")
    with pytest.raises(ValidationError):
        AttributeReply.model_validate({"type": "Age", "value": ["30"], "confidence": 6})
    assert CategoryReply.model_validate({"category": " finance "}).category is Category.FINANCE


@pytest.mark.parametrize(
    "item, label",
    [
        ({"value": ["x"], "confidence": 3}, "MissingField(type)"),
        ({"type": "Age", "value": [30], "confidence": 3}, "InvalidField(value)"),
        ({"type": "Age", "value": ["30"], "confidence": 3, "evidence": [{"quote": "q"}]}, "MissingField(evidence.seq)"),
        ({"type": "Age", "value": ["30"], "confidence": 3, "evidence": [{"seq": -4}]}, "InvalidField(evidence.seq)"),
        ({"type": "Age", "value": ["30"], "confidence": "high"}, "ConfidenceInvalid"),
    ],
)
def test_validation_errors_map_to_field_labels(item, label):
    with pytest.raises(ProtocolError) as e:
        parse_extractor(json.dumps({"attributes": [item]}))
    assert e.value.label == label
    assert isinstance(e.value.__cause__, ValidationError)


# --- extractor ---


def test_parse_extractor():
    raw = json.dumps(
        {
            "attributes": [
                {
                    "type": "Location",
                    "value": ["Seattle, USA", "Tacoma, USA"],
                    "confidence": 4,
                    "evidence": [{"seq": 1, "quote": "Lake Union drizzle"}],
                },
                {"type": "Age", "value": "32", "confidence": 5},
            ]
        }
    )
    location, age = parse_extractor(raw)
    assert location.values == ("Seattle, USA", "Tacoma, USA")
    assert location.evidence[0].seq == 1
    assert age.values == ("32",)
    assert age.evidence == ()


def test_parse_extractor_empty_list():
    assert parse_extractor('{"attributes": []}') == []


def test_parse_extractor_truncates_values_with_warning():
    warnings: list[str] = []
    raw = '{"attributes": [{"type": "City", "value": ["a", "b", "c", "d"], "confidence": 2}]}'
    (attribute,) = parse_extractor(raw, warnings)
    assert attribute.values == ("a", "b", "c")
    assert len(warnings) == 1


@pytest.mark.parametrize(
    "item, error",
    [
        ({"value": ["x"], "confidence": 3}, MissingField),
        ({"type": "  ", "value": ["x"], "confidence": 3}, InvalidField),
        ({"type": "Age", "confidence": 3}, MissingField),
        ({"type": "Age", "value": [], "confidence": 3}, InvalidField),
        ({"type": "Age", "value": [" "], "confidence": 3}, InvalidField),
        ({"type": "Age", "value": [30], "confidence": 3}, InvalidField),
        ({"type": "Age", "value": ["30"]}, MissingField),
        ({"type": "Age", "value": ["30"], "confidence": 0}, ConfidenceInvalid),
        ({"type": "Age", "value": ["30"], "confidence": 4.5}, ConfidenceInvalid),
        ({"type": "Age", "value": ["30"], "confidence": True}, ConfidenceInvalid),
        ({"type": "Age", "value": ["30"], "confidence": 3, "evidence": [{"seq": 0}]}, InvalidField),
        ({"type": "Age", "value": ["30"], "confidence": 3, "evidence": "seq 3"}, InvalidField),
        ({"type": "Age", "value": ["30"], "confidence": 3, "evidence": [{"seq": 2, "quote": 7}]}, InvalidField),
    ],
)
def test_parse_extractor_errors(item, error):
    with pytest.raises(error):
        parse_extractor(json.dumps({"attributes": [item]}))


def test_parse_extractor_needs_attribute_list():
    with pytest.raises(MissingField):
        parse_extractor('{"profile": []}')
    with pytest.raises(InvalidField):
        parse_extractor('{"attributes": {"type": "Age"}}')


# --- categorizer ---


def test_parse_category():
    assert parse_category('{"category": "health"}') is Category.HEALTH
    assert parse_category('Answer: {"category": "Asset"}') is Category.ASSET
    with pytest.raises(UnknownCategory):
        parse_category('{"category": "Hobbies"}')


# --- fuzz ---

_FRAGMENTS = [
    "{",
    "}",
    "[",
    "]",
    '"',
    ":",
    ",",
    " ",
    "\\",
    "```",
    "json",
    '"action"',
    '"rationale"',
    '"attributes"',
    '"type"',
    '"value"',
    '"confidence"',
    '"evidence"',
    '"seq"',
    '"quote"',
    '"category"',
    '"retrieve"',
    '"Health"',
    "null",
    "true",
    "0",
    "3",
    "-1",
    "4.5",
    '""',
    '" "',
    "[]",
    "{}",
    "prose ",
]


def _random_reply(rng: random.Random) -> str:
    if rng.random() < 0.3:
        # Structurally valid JSON with random field contents.
        values = [None, True, 0, 3, 7, -2, 2.5, "", " ", "Age", "x", [], ["a"], [" "], {}, {"seq": 1}, [{"seq": 2}]]
        item = {k: rng.choice(values) for k in ("type", "value", "confidence", "evidence") if rng.random() < 0.8}
        obj = {
            "attributes": rng.choice([[item], item, None, []]),
            "action": rng.choice(values + ["finish", "Infer"]),
            "rationale": rng.choice(values),
            "category": rng.choice(values + ["Health"]),
        }
        return json.dumps({k: v for k, v in obj.items() if rng.random() < 0.7})
    return "".join(rng.choice(_FRAGMENTS) for _ in range(rng.randint(0, 40)))


def test_parsers_never_raise_anything_but_protocol_errors():
    rng = random.Random(20240229)
    for _ in range(10_000):
        raw = _random_reply(rng)
        for parser in (parse_strategist, parse_extractor, parse_category):
            try:
                result = parser(raw)
            except ProtocolError:
                continue
            if parser is parse_extractor:
                assert all(isinstance(a, InferredAttribute) for a in result)
            elif parser is parse_strategist:
                assert isinstance(result, StrategistDecision)
            else:
                assert isinstance(result, Category)


# --- envelopes ---


def test_envelopes_round_trip():
    rng = random.Random(7)
    for _ in range(1_000):
        attributes = tuple(
            make_attribute(f"type {i}", f"value {rng.randint(0, 99)}", confidence=rng.randint(1, 5), seqs=(i + 1,))
            for i in range(rng.randint(0, 4))
        )
        sender = rng.choice(list(Sender))
        if sender is Sender.STRATEGIST:
            value = StrategistDecision(action=rng.choice(list(Action)), rationale="r", instructions="i")
        elif sender is Sender.RETRIEVER:
            value = [make_activity(i + 1, text=f"text ü {i}") for i in range(rng.randint(0, 3))]
        elif sender is Sender.EXTRACTOR:
            value = attributes
        else:
            value = Profile(user_id="u", attributes=attributes)
        envelope = envelope_for(sender, value)
        text = encode(envelope)
        assert decode(text) == envelope
        assert encode(decode(text)) == text


def test_encode_is_canonical():
    envelope = envelope_for(Sender.STRATEGIST, StrategistDecision(action=Action.FINISH, rationale="done"))
    assert encode(envelope) == (
        '{"payload":{"decision":{"action":"Finish","instructions":"","rationale":"done"},"kind":"decision"},'
        '"sender":"Strategist"}'
    )


def test_encoded_envelopes_match_golden():
    location = InferredAttribute(
        attr_type="Location",
        values=("Seattle, USA", "Tacoma, USA"),
        confidence=4,
        evidence=(Evidence(seq=1, quote="Café on Pike"),),
    )
    profile = Profile(
        user_id="throwaway_42",
        attributes=(
            location.model_copy(update={"values": ("Seattle, USA",), "confidence": 5}),
            InferredAttribute(attr_type="Age", values=("32",), confidence=5),
        ),
    )
    activities = [
        Activity(
            id="a01",
            seq=1,
            timestamp=datetime(2023, 1, 2, 8, 15, tzinfo=timezone.utc),
            kind=ActivityKind.COMMENT,
            text="Café on Pike again, same barista.",
            thread_context="Where do you get coffee?",
            venue="r/Seattle",
        ),
        Activity(
            id="a02",
            seq=2,
            timestamp=datetime(2023, 1, 3, 21, 40, tzinfo=timezone.utc),
            kind=ActivityKind.POST,
            text="New keyboard day.",
        ),
    ]
    envelopes = [
        envelope_for(
            Sender.STRATEGIST,
            StrategistDecision(
                action=Action.INFER, rationale="A batch is waiting.", instructions="Look for the neighbourhood."
            ),
        ),
        envelope_for(Sender.RETRIEVER, activities),
        envelope_for(Sender.EXTRACTOR, [location]),
        envelope_for(Sender.SUMMARIZER, profile),
    ]
    golden = (GOLDEN / "envelopes.jsonl").read_bytes()
    assert "".join(encode(e) + "\n" for e in envelopes).encode("utf-8") == golden
    assert [decode(line) for line in golden.decode("utf-8").splitlines()] == envelopes


def test_decode_rejects_payload_of_other_sender():
    text = encode(envelope_for(Sender.EXTRACTOR, [make_attribute("Age", "32")]))
    forged = text.replace('"Extractor"', '"Strategist"')
    with pytest.raises(ValidationError):
        decode(forged)
    assert isinstance(decode(text), MessageEnvelope)


# --- repair loop ---


class _Replies:
    def __init__(self, *replies: str):
        self.replies = list(replies)
        self.seen: list[list[tuple[str, str]]] = []

    async def __call__(self, corrections):
        self.seen.append(corrections)
        return self.replies[min(len(self.seen), len(self.replies)) - 1]


async def test_repair_loop_first_reply_ok():
    call = _Replies('{"category": "Health"}')
    result = await repair_loop(call, parse_category, max_retries=2)
    assert result.value is Category.HEALTH
    assert result.attempts == 1
    assert call.seen == [[]]


async def test_repair_loop_recovers_with_corrective_prompt():
    call = _Replies("no idea", '{"category": "Finance"}')
    result = await repair_loop(call, parse_category, max_retries=2)
    assert result.value is Category.FINANCE
    assert result.attempts == 2
    assert result.errors == ["NoJsonFound"]
    (corrections,) = call.seen[1:]
    assert corrections == [("no idea", CORRECTIVE_PROMPT.format(error="NoJsonFound"))]


@pytest.mark.parametrize("max_retries", [0, 1, 2, 5])
async def test_repair_loop_exhausts_after_max_retries_plus_one(max_retries):
    call = _Replies('{"category": "Hobbies"}')
    with pytest.raises(RepairExhausted) as e:
        await repair_loop(call, parse_category, max_retries=max_retries)
    assert len(call.seen) == max_retries + 1
    assert len(e.value.raw_outputs) == max_retries + 1
    assert e.value.last_error.label == "UnknownCategory(Hobbies)"
    assert len(call.seen[-1]) == max_retries


async def test_repair_loop_lets_backend_errors_through():
    async def failing(corrections):
        raise ScriptMiss("categorizer", 0)

    with pytest.raises(ScriptMiss):
        await repair_loop(failing, parse_category, max_retries=2)


async def test_repair_loop_rejects_negative_retries():
    with pytest.raises(InvalidValue):
        await repair_loop(_Replies("{}"), parse_category, max_retries=-1)
