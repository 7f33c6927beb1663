"""Build training datasets out of validated feedback records."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Conversation, Message
from .extractor import FeedbackRecord
from .prompting import FeedbackCategory

DESIRABLE = "desirable"
UNDESIRABLE = "undesirable"

DEFAULT_NEGATIVE_CATEGORIES = frozenset(
    {FeedbackCategory.AWARE_CORRECT, FeedbackCategory.AWARE_NO_CORRECT}
)


@dataclass(frozen=True)
class Provenance:
    conversation_id: str
    user_message_index: int
    run_id: str = ""

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "user_message_index": self.user_message_index,
            "run_id": self.run_id,
        }


@dataclass(frozen=True)
class SftExample:
    """A conversation prefix whose next assistant reply earned positive feedback."""

    context: tuple[Message, ...]
    target: str
    provenance: Provenance


@dataclass(frozen=True)
class PreferenceExample:
    """One response labeled desirable or undesirable (unpaired preference datum)."""

    context: tuple[Message, ...]
    response: str
    label: str
    category: FeedbackCategory
    provenance: Provenance


@dataclass(frozen=True)
class PairExample:
    """Chosen/rejected responses reconstructed from a rephrased-request episode.

    The chosen response answers the rephrased prompt, not the original one,
    so pairs carry an experimental marker downstream.
    """

    original_prompt: str
    rejected: str
    chosen: str
    rephrased_prompt: str
    provenance: Provenance


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")


def _bump(diagnostics: dict | None, key: str) -> None:
    if diagnostics is not None:
        diagnostics[key] = diagnostics.get(key, 0) + 1


def _target_slot(record: FeedbackRecord, corpus: dict[str, Conversation], diagnostics: dict | None):
    """Resolve (conversation, context, target assistant content) for a record.

    The target is the assistant message immediately preceding the feedback
    user message; the context is everything before that target.
    """
    conv = corpus.get(record.conversation_id)
    if conv is None:
        _bump(diagnostics, "missing_conversation")
        return None
    k = record.user_message_index
    if k < 1 or k >= len(conv.messages) or conv.messages[k].role != "user":
        _bump(diagnostics, "bad_anchor")
        return None
    if conv.messages[k - 1].role != "assistant":
        _bump(diagnostics, "no_preceding_assistant")
        return None
    return conv, conv.messages[: k - 1], conv.messages[k - 1].content


def build_sft(
    records: Sequence[FeedbackRecord],
    corpus: dict[str, Conversation],
    diagnostics: dict | None = None,
) -> list[SftExample]:
    """One SFT example per positive-category record; skips are counted, never fatal."""
    examples = []
    for record in records:
        if record.category is not FeedbackCategory.POSITIVE:
            continue
        slot = _target_slot(record, corpus, diagnostics)
        if slot is None:
            continue
        _, context, target = slot
        examples.append(
            SftExample(
                context=context,
                target=target,
                provenance=Provenance(record.conversation_id, record.user_message_index, record.run_id),
            )
        )
    return examples


def build_kto(
    records: Sequence[FeedbackRecord],
    corpus: dict[str, Conversation],
    negative_categories: frozenset[FeedbackCategory] = DEFAULT_NEGATIVE_CATEGORIES,
    downsample_ratio: float = 1.0,
    seed: int = 0,
    diagnostics: dict | None = None,
) -> list[PreferenceExample]:
    """Desirable examples from positives, undesirable from the negative categories.

    Negatives are down-sampled uniformly without replacement to
    round(ratio x positives) under the seed, keeping record order, because
    the raw pipeline yields far more negatives than positives. Clarify stays
    out of the default negative set: its sentiment is too ambiguous to treat
    as a clean negative signal.
    """
    if downsample_ratio <= 0:
        raise ValueError("downsample_ratio must be positive")
    if FeedbackCategory.POSITIVE in negative_categories:
        raise ValueError("the positive category cannot be a negative source")
    desirable: list[PreferenceExample] = []
    undesirable: list[PreferenceExample] = []
    for record in records:
        if record.category is FeedbackCategory.POSITIVE:
            label = DESIRABLE
        elif record.category in negative_categories:
            label = UNDESIRABLE
        else:
            continue
        slot = _target_slot(record, corpus, diagnostics)
        if slot is None:
            continue
        _, context, response = slot
        example = PreferenceExample(
            context=context,
            response=response,
            label=label,
            category=record.category,
            provenance=Provenance(record.conversation_id, record.user_message_index, record.run_id),
        )
        (desirable if label == DESIRABLE else undesirable).append(example)
    if not desirable and undesirable:
        raise ValueError("no positive examples: downsampling ratio is unachievable")
    target = round(downsample_ratio * len(desirable))
    if len(undesirable) > target:
        rng = random.Random(seed)
        keep = sorted(rng.sample(range(len(undesirable)), target))
        undesirable = [undesirable[i] for i in keep]
    return desirable + undesirable


def build_rephrase_pairs(
    records: Sequence[FeedbackRecord],
    corpus: dict[str, Conversation],
    diagnostics: dict | None = None,
) -> list[PairExample]:
    """Chosen/rejected pairs around each rephrase-category record.

    rejected answers the request before the rephrase; chosen is the
    assistant reply right after it. Records at conversation end (no reply to
    the rephrase) are skipped and counted.
    """
    pairs = []
    for record in records:
        if record.category is not FeedbackCategory.REPHRASE:
            continue
        slot = _target_slot(record, corpus, diagnostics)
        if slot is None:
            continue
        conv, _, rejected = slot
        k = record.user_message_index
        if k + 1 >= len(conv.messages):
            _bump(diagnostics, "no_following_response")
            continue
        pairs.append(
            PairExample(
                original_prompt=conv.messages[k - 2].content,
                rejected=rejected,
                chosen=conv.messages[k + 1].content,
                rephrased_prompt=conv.messages[k].content,
                provenance=Provenance(record.conversation_id, k, record.run_id),
            )
        )
    return pairs


def split_train_val(examples: Sequence, spec: SplitSpec) -> tuple[list, list]:
    """Seeded uniform shuffle, then prefix split at round(fraction x n)."""
    if not examples:
        raise ValueError("cannot split an empty example list")
    indices = list(range(len(examples)))
    random.Random(spec.seed).shuffle(indices)
    cut = round(spec.train_fraction * len(examples))
    train = [examples[i] for i in indices[:cut]]
    val = [examples[i] for i in indices[cut:]]
    return train, val


def _messages_to_dicts(messages: Iterable[Message]) -> list[dict]:
    return [{"role": m.role, "content": m.content} for m in messages]


def sft_to_dict(example: SftExample) -> dict:
    return {
        "messages": _messages_to_dicts(example.context),
        "completion": example.target,
        "provenance": example.provenance.to_dict(),
    }


def preference_to_dict(example: PreferenceExample) -> dict:
    return {
        "messages": _messages_to_dicts(example.context),
        "completion": example.response,
        "label": example.label,
        "category": example.category.value,
        "provenance": example.provenance.to_dict(),
    }


def pair_to_dict(example: PairExample) -> dict:
    return {
        "prompt": example.original_prompt,
        "chosen": example.chosen,
        "rejected": example.rejected,
        "metadata": {
            "rephrased_prompt": example.rephrased_prompt,
            "experimental": True,
            **example.provenance.to_dict(),
        },
    }


def save_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
