"""Canonical conversation model, JSONL ingestion, and corpus filters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping

USER = "user"
ASSISTANT = "assistant"
ROLES = (USER, ASSISTANT)

DEFAULT_ROLE_ALIASES = {
    "human": USER,
    "ai": ASSISTANT,
    "bot": ASSISTANT,
    "gpt": ASSISTANT,
    "model": ASSISTANT,
}


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True)
class Conversation:
    """An alternating user/assistant exchange, user first.

    Alternation is enforced at construction: span offsets and turn indices
    downstream need an unambiguous message sequence.
    """

    id: str
    messages: tuple[Message, ...]
    model_name: str | None = None
    language: str | None = None
    moderation_flagged: bool | None = None
    redacted: bool | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("conversation must contain at least one message")
        for i, message in enumerate(self.messages):
            expected = USER if i % 2 == 0 else ASSISTANT
            if message.role != expected:
                raise ValueError(
                    f"messages must alternate user/assistant starting with user "
                    f"(message {i} has role {message.role!r})"
                )

    @property
    def complete_turns(self) -> int:
        """Number of complete (user, assistant) pairs."""
        return len(self.messages) // 2

    def user_ordinal(self, message_index: int) -> int:
        """1-based ordinal of a user message among the user messages."""
        message = self.messages[message_index]
        if message.role != USER:
            raise ValueError(f"message {message_index} is not a user message")
        return message_index // 2 + 1


def to_canonical_dict(conv: Conversation) -> dict:
    return {
        "id": conv.id,
        "model_name": conv.model_name,
        "messages": [{"role": m.role, "content": m.content} for m in conv.messages],
        "language": conv.language,
        "moderation_flagged": conv.moderation_flagged,
        "redacted": conv.redacted,
    }


def conversation_from_canonical(data: Mapping) -> Conversation:
    return Conversation(
        id=str(data["id"]),
        messages=tuple(Message(m["role"], m["content"]) for m in data["messages"]),
        model_name=data.get("model_name"),
        language=data.get("language"),
        moderation_flagged=data.get("moderation_flagged"),
        redacted=data.get("redacted"),
    )


@dataclass(frozen=True)
class SchemaMap:
    """Field mapping from a source JSONL layout onto the canonical model."""

    name: str
    id_key: str
    messages_key: str
    role_key: str = "role"
    content_key: str = "content"
    model_key: str | None = None
    language_key: str | None = None
    moderation_key: str | None = None
    redacted_key: str | None = None
    role_aliases: Mapping[str, str] = field(default_factory=dict)


SCHEMA_PRESETS = {
    # canonical round-trips to_canonical_dict output unchanged
    "canonical": SchemaMap(
        name="canonical",
        id_key="id",
        messages_key="messages",
        model_key="model_name",
        language_key="language",
        moderation_key="moderation_flagged",
        redacted_key="redacted",
    ),
    "lmsys": SchemaMap(
        name="lmsys",
        id_key="conversation_id",
        messages_key="conversation",
        model_key="model",
        language_key="language",
        moderation_key="openai_moderation",
        redacted_key="redacted",
    ),
    "wildchat": SchemaMap(
        name="wildchat",
        id_key="conversation_hash",
        messages_key="conversation",
        model_key="model",
        language_key="language",
        moderation_key="toxic",
        redacted_key="redacted",
        role_aliases=DEFAULT_ROLE_ALIASES,
    ),
}


def load_schema_map(name_or_path: str | Path) -> SchemaMap:
    """Resolve a preset name or a user-supplied JSON mapping file."""
    if str(name_or_path) in SCHEMA_PRESETS:
        return SCHEMA_PRESETS[str(name_or_path)]
    path = Path(name_or_path)
    data = json.loads(path.read_text(encoding="utf-8"))
    return SchemaMap(
        name=data.get("name", path.stem),
        id_key=data["id_key"],
        messages_key=data["messages_key"],
        role_key=data.get("role_key", "role"),
        content_key=data.get("content_key", "content"),
        model_key=data.get("model_key"),
        language_key=data.get("language_key"),
        moderation_key=data.get("moderation_key"),
        redacted_key=data.get("redacted_key"),
        role_aliases=data.get("role_aliases", {}),
    )


@dataclass(frozen=True)
class IngestError:
    line_number: int
    reason: str  # invalid-json | missing-field | unknown-role | non-alternating | bad-structure
    detail: str = ""


class _LineError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(detail)
        self.reason = reason
        self.detail = detail


def _flag_value(raw) -> bool:
    # LMSYS-style moderation metadata is a per-message list of result objects
    if isinstance(raw, list):
        return any(isinstance(item, dict) and item.get("flagged") for item in raw)
    return bool(raw)


def _convert_line(obj, schema: SchemaMap) -> Conversation:
    if not isinstance(obj, dict):
        raise _LineError("bad-structure", "line is not a JSON object")
    if schema.id_key not in obj:
        raise _LineError("missing-field", f"missing {schema.id_key!r}")
    if schema.messages_key not in obj:
        raise _LineError("missing-field", f"missing {schema.messages_key!r}")
    raw_messages = obj[schema.messages_key]
    if not isinstance(raw_messages, list) or not raw_messages:
        raise _LineError("bad-structure", f"{schema.messages_key!r} must be a non-empty list")

    messages = []
    for i, raw in enumerate(raw_messages):
        if not isinstance(raw, dict):
            raise _LineError("bad-structure", f"message {i} is not an object")
        if schema.role_key not in raw:
            raise _LineError("missing-field", f"message {i} missing {schema.role_key!r}")
        if schema.content_key not in raw:
            raise _LineError("missing-field", f"message {i} missing {schema.content_key!r}")
        raw_role = str(raw[schema.role_key])
        role = schema.role_aliases.get(raw_role, schema.role_aliases.get(raw_role.lower(), raw_role.lower()))
        if role not in ROLES:
            raise _LineError("unknown-role", f"message {i} has role {raw_role!r}")
        content = raw[schema.content_key]
        if content is None:
            raise _LineError("missing-field", f"message {i} content is null")
        if not isinstance(content, str):
            raise _LineError("bad-structure", f"message {i} content is not a string")
        expected = USER if i % 2 == 0 else ASSISTANT
        if role != expected:
            raise _LineError(
                "non-alternating",
                f"message {i} has role {role!r}, expected {expected!r}",
            )
        messages.append(Message(role, content))

    def _opt(key):
        return obj.get(key) if key else None

    language = _opt(schema.language_key)
    moderation = _opt(schema.moderation_key)
    redacted = _opt(schema.redacted_key)
    return Conversation(
        id=str(obj[schema.id_key]),
        messages=tuple(messages),
        model_name=str(obj[schema.model_key]) if schema.model_key and obj.get(schema.model_key) is not None else None,
        language=str(language) if language is not None else None,
        moderation_flagged=_flag_value(moderation) if moderation is not None else None,
        redacted=bool(redacted) if redacted is not None else None,
    )


def ingest_jsonl(path: str | Path, schema: SchemaMap) -> Iterator[Conversation | IngestError]:
    """Stream conversations out of a JSONL dump, one per line.

    Malformed lines yield IngestError with line number and reason; the
    stream never aborts on a bad line. Input order is preserved.
    """
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                yield IngestError(line_number, "invalid-json", "empty line")
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                yield IngestError(line_number, "invalid-json", str(exc))
                continue
            try:
                yield _convert_line(obj, schema)
            except _LineError as exc:
                yield IngestError(line_number, exc.reason, exc.detail)


class RejectReason(Enum):
    TOO_FEW_TURNS = "too_few_turns"
    LANGUAGE = "language"
    MODERATION = "moderation"
    REDACTED = "redacted"


@dataclass(frozen=True)
class FilterPolicy:
    """Corpus filters: turn count floor, language allowlist, safety flags.

    min_turns counts complete (user, assistant) pairs. The default of 2
    drops one-turn conversations, which cannot contain feedback on a model
    response; conversations with exactly 2 turns are kept.
    """

    min_turns: int = 2
    allowed_languages: frozenset[str] | None = None
    drop_moderation_flagged: bool = False
    drop_redacted: bool = False

    def __post_init__(self) -> None:
        if self.min_turns < 1:
            raise ValueError("min_turns must be >= 1")
        if self.allowed_languages is not None:
            object.__setattr__(
                self, "allowed_languages", frozenset(t.lower() for t in self.allowed_languages)
            )


def apply_filters(conv: Conversation, policy: FilterPolicy) -> RejectReason | None:
    """Return None when the conversation is accepted, else the first failing check.

    Checks run in a fixed order: turns, language, moderation, redacted.
    Language comparison is case-insensitive and trusts corpus metadata.
    """
    if conv.complete_turns < policy.min_turns:
        return RejectReason.TOO_FEW_TURNS
    if policy.allowed_languages is not None:
        tag = (conv.language or "").lower()
        if tag not in policy.allowed_languages:
            return RejectReason.LANGUAGE
    if policy.drop_moderation_flagged and conv.moderation_flagged:
        return RejectReason.MODERATION
    if policy.drop_redacted and conv.redacted:
        return RejectReason.REDACTED
    return None


def index_conversations(conversations) -> dict[str, Conversation]:
    """Index a conversation iterable by id. Later duplicates are ignored."""
    index: dict[str, Conversation] = {}
    for conv in conversations:
        index.setdefault(conv.id, conv)
    return index


def load_corpus(
    path: str | Path,
    schema: SchemaMap,
    policy: FilterPolicy | None = None,
) -> tuple[list[Conversation], list[IngestError], dict[str, int]]:
    """Materialize a corpus: accepted conversations, ingest errors, reject counts."""
    accepted: list[Conversation] = []
    errors: list[IngestError] = []
    rejected: dict[str, int] = {}
    for item in ingest_jsonl(path, schema):
        if isinstance(item, IngestError):
            errors.append(item)
            continue
        if policy is not None:
            reason = apply_filters(item, policy)
            if reason is not None:
                rejected[reason.value] = rejected.get(reason.value, 0) + 1
                continue
        accepted.append(item)
    return accepted, errors, rejected
