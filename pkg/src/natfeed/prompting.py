"""Feedback taxonomy, category parsing, and extraction prompt templates."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

PLACEHOLDER = "{{conversation}}"

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"


class FeedbackCategory(Enum):
    """The five feedback categories: four negative flavors and one positive."""

    REPHRASE = "rephrase"
    AWARE_CORRECT = "aware_correct"
    AWARE_NO_CORRECT = "aware_no_correct"
    CLARIFY = "clarify"
    POSITIVE = "positive"

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    FeedbackCategory.REPHRASE: "Repeat or Rephrase",
    FeedbackCategory.AWARE_CORRECT: "Make Aware with Correction",
    FeedbackCategory.AWARE_NO_CORRECT: "Make Aware without Correction",
    FeedbackCategory.CLARIFY: "Ask for Clarification",
    FeedbackCategory.POSITIVE: "Positive Feedback",
}

_BY_CANONICAL_NAME = {name.lower(): cat for cat, name in _DISPLAY_NAMES.items()}
_BY_VALUE = {cat.value: cat for cat in FeedbackCategory}

NEGATIVE_CATEGORIES = frozenset(
    cat for cat in FeedbackCategory if cat is not FeedbackCategory.POSITIVE
)

_TRIM_CHARS = string.whitespace + string.punctuation


class Polarity(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


def parse_category(raw: str) -> FeedbackCategory | None:
    """Map a generated category name onto the taxonomy, or None if invalid.

    Matching is case-insensitive after trimming surrounding whitespace and
    punctuation. Models are known to invent category names ("Ask for
    Examples" and the like); those return None so the caller can discard.
    """
    cleaned = raw.strip(_TRIM_CHARS).lower()
    return _BY_CANONICAL_NAME.get(cleaned)


def category_from_value(value: str) -> FeedbackCategory:
    """Resolve a serialized category: short value first, display name fallback."""
    if value in _BY_VALUE:
        return _BY_VALUE[value]
    category = parse_category(value)
    if category is None:
        raise ValueError(f"unknown feedback category: {value!r}")
    return category


def polarity(category: FeedbackCategory) -> Polarity:
    """Positive Feedback is the single positive category; the rest are negative."""
    if category is FeedbackCategory.POSITIVE:
        return Polarity.POSITIVE
    return Polarity.NEGATIVE


class TemplateError(ValueError):
    """Template file malformed: bad placeholder count or unknown manifest value."""


_CATEGORY_SETS = ("full", "limited", "none")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    expects_confidence: bool = False
    category_set: str = "full"

    def __post_init__(self) -> None:
        count = self.body.count(PLACEHOLDER)
        if count != 1:
            raise TemplateError(
                f"template {self.name!r} must contain {PLACEHOLDER} exactly once, found {count}"
            )
        if self.category_set not in _CATEGORY_SETS:
            raise TemplateError(
                f"template {self.name!r}: category_set must be one of {_CATEGORY_SETS}"
            )


def render_messages(messages) -> str:
    """Serialize messages into '# user:' / '# assistant:' blocks, in order."""
    return "\n".join(f"# {message.role}: {message.content}" for message in messages)


def render_conversation(conv) -> str:
    return render_messages(conv.messages)


def render_prompt(template: PromptTemplate, conv) -> str:
    """Substitute the conversation rendering into the template placeholder."""
    return template.body.replace(PLACEHOLDER, render_conversation(conv))


def load_template(path: str | Path) -> PromptTemplate:
    """Load a template body plus its sidecar JSON manifest (same stem, .json)."""
    path = Path(path)
    body = path.read_text(encoding="utf-8")
    manifest: dict = {}
    manifest_path = path.with_suffix(".json")
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return PromptTemplate(
        name=str(manifest.get("name", path.stem)),
        body=body,
        expects_confidence=bool(manifest.get("expects_confidence", False)),
        category_set=str(manifest.get("category_set", "full")),
    )


def builtin_template(name: str) -> PromptTemplate:
    """Load one of the templates shipped with the package by name."""
    path = TEMPLATE_DIR / f"{name}.txt"
    if not path.exists():
        available = sorted(p.stem for p in TEMPLATE_DIR.glob("*.txt"))
        raise TemplateError(f"no builtin template {name!r}; available: {available}")
    return load_template(path)


def resolve_template(name_or_path: str | Path) -> PromptTemplate:
    """Accept either a builtin template name or a path to a template file."""
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        return load_template(path)
    return builtin_template(str(name_or_path))
