"""Post-run analysis: confidence filtering, categorization, privacy-risk scoring and reports."""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import pandas as pd

from .agents import CATEGORIZER, AgentTeam, CallLog, render_attributes
from .errors import InvalidValue, RepairExhausted, SchemaMismatch
from .models import Category, InferredAttribute, Profile, ScoreTable, normalize_type
from .protocol import parse_category
from .utils import atomic_write_text, canonical_json

logger = logging.getLogger(__name__)

DEFAULT_MIN_CONFIDENCE = 4
SCORE_TABLE_NOTE = "Scores are configurable defaults chosen for this tool, not published ground truth."

# Checked in order; the first category with a keyword hit wins.
CATEGORY_KEYWORDS: tuple[tuple[Category, tuple[str, ...]], ...] = (
    (
        Category.IDENTIFIER,
        ("name", "email", "e-mail", "phone", "username", "handle", "address", "ssn", "passport", "id number"),
    ),
    (
        Category.HEALTH,
        ("health", "medical", "condition", "illness", "disease", "diagnosis", "medication", "mental",
         "disability", "allergy", "height", "weight", "sleep", "insomnia", "pregnancy", "diet"),
    ),
    (
        Category.FINANCE,
        ("income", "salary", "finance", "financial", "debt", "loan", "loans", "wealth", "savings",
         "investment", "investments", "credit", "spending", "budget"),
    ),
    (
        Category.SECRETS,
        ("secret", "secrets", "criminal", "crime", "drug", "drugs", "affair", "addiction", "illegal",
         "sexual", "orientation"),
    ),
    (
        Category.ASSET,
        ("vehicle", "car", "property", "real estate", "ownership", "owns", "pet", "pets", "asset", "assets"),
    ),
    (
        Category.RELATIONSHIP,
        ("relationship", "marital", "married", "spouse", "partner", "family", "children", "child", "parent",
         "sibling", "friend", "friends", "dating"),
    ),
    (
        Category.DEMOGRAPHIC,
        ("age", "sex", "gender", "ethnicity", "race", "nationality", "religion", "language"),
    ),
    (
        Category.BACKGROUND,
        ("occupation", "job", "profession", "employer", "work", "career", "education", "degree", "school",
         "university", "skill", "skills", "industry"),
    ),
    (
        Category.GEOGRAPHIC,
        ("location", "city", "country", "place of birth", "birthplace", "hometown", "residence", "region",
         "neighborhood", "neighbourhood"),
    ),
)

_KEYWORD_PATTERNS = tuple(
    (category, re.compile(r"\b(?:" + "|".join(re.escape(k) for k in keywords) + r")\b"))
    for category, keywords in CATEGORY_KEYWORDS
)


def filter_by_confidence(profile: Profile, min_conf: int = DEFAULT_MIN_CONFIDENCE) -> Profile:
    """Keep exactly the attributes with confidence >= min_conf, in order."""
    if not 1 <= min_conf <= 5:
        raise InvalidValue(f"min_conf must be in [1, 5], got {min_conf}")
    kept = tuple(a for a in profile.attributes if a.confidence >= min_conf)
    return Profile(user_id=profile.user_id, attributes=kept)


def categorize_rule(attribute: InferredAttribute) -> Category:
    """Keyword table over the type name, then over the values; Behavior when nothing matches."""
    for text in (normalize_type(attribute.attr_type), " ".join(attribute.values).lower()):
        for category, pattern in _KEYWORD_PATTERNS:
            if pattern.search(text):
                return category
    return Category.BEHAVIOR


async def categorize(
    attribute: InferredAttribute, mode: str = "rule", team: AgentTeam | None = None, log: CallLog | None = None
) -> Category:
    if mode == "rule":
        return categorize_rule(attribute)
    if mode != "llm":
        raise InvalidValue(f"Unknown categorization mode {mode!r}")
    if team is None:
        raise InvalidValue("llm categorization needs an agent team")
    prompt = team.prompts.render(CATEGORIZER, attribute=render_attributes([attribute]))
    try:
        return await team.ask(CATEGORIZER, prompt, parse_category, log or CallLog())
    except RepairExhausted:
        logger.warning(f"Categorizer output unusable for {attribute.attr_type!r}; using the keyword table")
        return categorize_rule(attribute)


async def categorize_profile(
    profile: Profile,
    mode: str = "rule",
    team: AgentTeam | None = None,
    corrections: dict[int, Category] | None = None,
) -> list[Category]:
    """Category per attribute (same order); `corrections` from a review file override by index."""
    log = CallLog()
    categories = [await categorize(attribute, mode, team, log) for attribute in profile.attributes]
    for index, category in (corrections or {}).items():
        if 0 <= index < len(categories):
            categories[index] = category
        else:
            logger.warning(f"Correction for attribute {index} ignored: profile has {len(categories)} attributes")
    return categories


# --- review / corrections ---


def write_review_file(path: str | Path, profile: Profile, categories: list[Category]) -> None:
    """One JSONL line per attribute; edit `category` and pass the file back as corrections."""
    lines = [
        canonical_json(
            {"attr_index": i, "type": a.attr_type, "value": a.primary, "category": c.value}
        )
        for i, (a, c) in enumerate(zip(profile.attributes, categories))
    ]
    atomic_write_text(Path(path), "".join(line + "\n" for line in lines))
    logger.info(f"Wrote review file with {len(lines)} attributes to {path}")


def load_corrections(path: str | Path) -> dict[int, Category]:
    corrections: dict[int, Category] = {}
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                corrections[int(obj["attr_index"])] = Category(obj["category"])
            except (ValueError, KeyError, TypeError) as e:
                raise SchemaMismatch(str(path), f"line {line_number}: expected attr_index and category") from e
    return corrections


# --- risk ---


@dataclass
class RiskSummary:
    avg_sensitivity: float | None
    avg_identifiability: float | None
    counts: dict[Category, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def group_shares(self) -> tuple[float, float]:
        """PII and SPI percentages; they sum to 100 on a nonempty profile."""
        if not self.total:
            return 0.0, 0.0
        pii = 100 * sum(n for c, n in self.counts.items() if c.is_pii) / self.total
        return pii, 100 - pii

    def to_dict(self) -> dict:
        pii, spi = self.group_shares()
        return {
            "avg_sensitivity": self.avg_sensitivity,
            "avg_identifiability": self.avg_identifiability,
            "counts": {c.value: n for c, n in self.counts.items()},
            "pii_percent": pii,
            "spi_percent": spi,
        }


def privacy_risk(categories: list[Category], table: ScoreTable) -> RiskSummary:
    """Unweighted means of the per-attribute category scores; None for an empty profile."""
    counts = Counter(categories)
    ordered = {c: counts[c] for c in Category if counts[c]}
    if not categories:
        return RiskSummary(None, None, ordered)
    sensitivity = sum(table[c].sensitivity for c in categories) / len(categories)
    identifiability = sum(table[c].identifiability for c in categories) / len(categories)
    return RiskSummary(sensitivity, identifiability, ordered)


def load_score_table(path: str | Path | None = None) -> ScoreTable:
    if path is None:
        text = resources.files("pseudoscope.assets").joinpath("score_table.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return ScoreTable.model_validate_json(text)


# --- statistics ---


def category_statistics(categorized: dict[str, list[Category]]) -> pd.DataFrame:
    """Per user: attribute count, distinct categories and the share of each category."""
    rows = []
    for user_id, categories in categorized.items():
        counts = Counter(categories)
        row: dict[str, object] = {
            "user_id": user_id,
            "attributes": len(categories),
            "distinct_categories": len(counts),
        }
        for category in Category:
            row[category.value] = counts[category] / len(categories) if categories else 0.0
        rows.append(row)
    columns = ["user_id", "attributes", "distinct_categories", *(c.value for c in Category)]
    return pd.DataFrame(rows, columns=columns)


# --- report ---


@dataclass
class ProfileAnalysis:
    profile: Profile
    categories: list[Category]
    risk: RiskSummary
    min_conf: int = DEFAULT_MIN_CONFIDENCE


async def analyze_profile(
    profile: Profile,
    table: ScoreTable,
    min_conf: int = DEFAULT_MIN_CONFIDENCE,
    mode: str = "rule",
    team: AgentTeam | None = None,
    corrections: dict[int, Category] | None = None,
) -> ProfileAnalysis:
    filtered = filter_by_confidence(profile, min_conf)
    categories = await categorize_profile(filtered, mode, team, corrections)
    return ProfileAnalysis(filtered, categories, privacy_risk(categories, table), min_conf)


def _score(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def render_report(analysis: ProfileAnalysis) -> str:
    """Deterministic Markdown report of an analyzed profile."""
    profile, risk = analysis.profile, analysis.risk
    lines = [f"# Privacy exposure report: {profile.user_id}", ""]
    if not profile.attributes:
        lines += [f"This profile has no attributes above threshold (confidence >= {analysis.min_conf}).", ""]
        return "\n".join(lines)

    pii, spi = risk.group_shares()
    lines += [
        f"Attributes with confidence >= {analysis.min_conf}: {len(profile)}",
        "",
        "## Risk",
        "",
        f"- Average sensitivity: {_score(risk.avg_sensitivity)}",
        f"- Average identifiability: {_score(risk.avg_identifiability)}",
        f"- PII: {pii:.1f}% / SPI: {spi:.1f}%",
        f"- {SCORE_TABLE_NOTE}",
        "",
    ]
    for category in Category:
        members = [a for a, c in zip(profile.attributes, analysis.categories) if c is category]
        if not members:
            continue
        lines += [f"## {category.value} ({category.group})", ""]
        for attribute in members:
            alternatives = f" (alternatives: {', '.join(attribute.values[1:])})" if len(attribute.values) > 1 else ""
            lines.append(
                f"- **{attribute.attr_type}**: {attribute.primary}{alternatives}, confidence {attribute.confidence}"
            )
            for evidence in attribute.evidence:
                lines.append(f"  - [{evidence.seq}] \"{evidence.quote}\"")
        lines.append("")
    return "\n".join(lines)
