"""Scoring against gold annotations, annotator agreement, and dataset statistics."""

from __future__ import annotations

import csv
import io
import json
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import Conversation
from .extractor import FeedbackRecord
from .prompting import FeedbackCategory, Polarity, polarity

NONE_LABEL = "none"


@dataclass(frozen=True)
class GoldSpan:
    user_message_index: int
    category: FeedbackCategory
    span_text: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class GoldAnnotation:
    """One annotator's verdict on one conversation.

    A skipped conversation (unsafe/offensive content) carries zero spans.
    """

    conversation_id: str
    annotator_id: str
    spans: tuple[GoldSpan, ...] = ()
    skipped: bool = False

    def __post_init__(self) -> None:
        if self.skipped and self.spans:
            raise ValueError("skipped annotations must carry zero spans")


def gold_span_to_dict(span: GoldSpan) -> dict:
    return {
        "user_message_index": span.user_message_index,
        "category": span.category.value,
        "span_text": span.span_text,
        "char_start": span.char_start,
        "char_end": span.char_end,
    }


def gold_span_from_dict(data: dict) -> GoldSpan:
    return GoldSpan(
        user_message_index=data["user_message_index"],
        category=FeedbackCategory(data["category"]),
        span_text=data["span_text"],
        char_start=data["char_start"],
        char_end=data["char_end"],
    )


def gold_to_dict(annotation: GoldAnnotation) -> dict:
    return {
        "conversation_id": annotation.conversation_id,
        "annotator_id": annotation.annotator_id,
        "skipped": annotation.skipped,
        "spans": [gold_span_to_dict(s) for s in annotation.spans],
    }


def gold_from_dict(data: dict) -> GoldAnnotation:
    return GoldAnnotation(
        conversation_id=data["conversation_id"],
        annotator_id=data["annotator_id"],
        skipped=data.get("skipped", False),
        spans=tuple(gold_span_from_dict(s) for s in data.get("spans", [])),
    )


def load_gold(path: str | Path) -> list[GoldAnnotation]:
    annotations = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                annotations.append(gold_from_dict(json.loads(line)))
    return annotations


def save_gold(annotations: Iterable[GoldAnnotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for annotation in annotations:
            fh.write(json.dumps(gold_to_dict(annotation), ensure_ascii=False) + "\n")


def verify_gold(annotation: GoldAnnotation, conv: Conversation) -> None:
    """Enforce the same anchoring invariants records obey."""
    for span in annotation.spans:
        message = conv.messages[span.user_message_index]
        if message.role != "user":
            raise ValueError(f"gold span on non-user message in {conv.id}")
        if span.user_message_index < 2:
            raise ValueError(f"gold span on the first user message in {conv.id}")
        if message.content[span.char_start : span.char_end] != span.span_text:
            raise ValueError(f"gold offsets do not reconstruct span text in {conv.id}")


def flatten_gold(annotations: Iterable[GoldAnnotation]) -> list[tuple[str, GoldSpan]]:
    """Flatten annotations into (conversation_id, span) items for matching."""
    return [(a.conversation_id, span) for a in annotations for span in a.spans]


def span_match(pred: FeedbackRecord, gold: GoldSpan) -> bool:
    """Substring-and-half-length rule, within the same user message.

    Length is in characters. Both sides must reference the same conversation;
    match_all enforces that pairing.
    """
    return (
        pred.user_message_index == gold.user_message_index
        and pred.span_text in gold.span_text
        and len(pred.span_text) * 2 >= len(gold.span_text)
    )


@dataclass
class Matching:
    pairs: list[tuple[FeedbackRecord, tuple[str, GoldSpan]]]
    unmatched_preds: list[FeedbackRecord]
    unmatched_golds: list[tuple[str, GoldSpan]]


def match_all(
    preds: Sequence[FeedbackRecord], golds: Sequence[tuple[str, GoldSpan]]
) -> Matching:
    """Greedy one-to-one assignment of predictions to gold spans.

    Candidate pairs (same conversation, span_match true) are consumed in
    order of descending predicted-span length, breaking ties by input
    position, while both sides are unused. Each side joins at most one pair.
    """
    candidates = []
    for i, pred in enumerate(preds):
        for j, (conv_id, gold) in enumerate(golds):
            if pred.conversation_id == conv_id and span_match(pred, gold):
                candidates.append((-len(pred.span_text), i, j))
    candidates.sort()
    used_preds: set[int] = set()
    used_golds: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_preds or j in used_golds:
            continue
        used_preds.add(i)
        used_golds.add(j)
        pairs.append((preds[i], golds[j]))
    unmatched_preds = [p for i, p in enumerate(preds) if i not in used_preds]
    unmatched_golds = [g for j, g in enumerate(golds) if j not in used_golds]
    return Matching(pairs=pairs, unmatched_preds=unmatched_preds, unmatched_golds=unmatched_golds)


def confusion_labels() -> list[str]:
    return [c.value for c in FeedbackCategory] + [NONE_LABEL]


def _empty_confusion() -> dict[str, dict[str, int]]:
    labels = confusion_labels()
    return {row: {col: 0 for col in labels} for row in labels}


@dataclass
class BootstrapResult:
    mean: float
    std: float
    reps: int
    skipped: int
    values: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "reps": self.reps, "skipped": self.skipped}


@dataclass
class EvalReport:
    gold_total: int
    predicted_total: int
    span_correct: int
    category_correct: int
    span_precision: float | None
    span_recall: float | None
    category_precision: float | None
    category_recall: float | None
    confusion: dict[str, dict[str, int]] = field(default_factory=_empty_confusion)
    bootstrap: dict[str, BootstrapResult] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "counts": {
                "gold_total": self.gold_total,
                "predicted_total": self.predicted_total,
                "span_correct": self.span_correct,
                "category_correct": self.category_correct,
            },
            "span_precision": self.span_precision,
            "span_recall": self.span_recall,
            "category_precision": self.category_precision,
            "category_recall": self.category_recall,
            "confusion": self.confusion,
            "bootstrap": {name: result.to_dict() for name, result in self.bootstrap.items()},
        }


def compute_metrics(matching: Matching) -> EvalReport:
    """Span and category precision/recall plus the confusion matrix.

    Zero denominators yield None, never a silent 0. Confusion rows are the
    gold category, columns the predicted category; unmatched items land in
    the "none" margins.
    """
    predicted_total = len(matching.pairs) + len(matching.unmatched_preds)
    gold_total = len(matching.pairs) + len(matching.unmatched_golds)
    span_correct = len(matching.pairs)
    category_correct = sum(
        1 for pred, (_, gold) in matching.pairs if pred.category == gold.category
    )
    confusion = _empty_confusion()
    for pred, (_, gold) in matching.pairs:
        confusion[gold.category.value][pred.category.value] += 1
    for _, gold in matching.unmatched_golds:
        confusion[gold.category.value][NONE_LABEL] += 1
    for pred in matching.unmatched_preds:
        confusion[NONE_LABEL][pred.category.value] += 1

    def ratio(num: int, denom: int) -> float | None:
        return None if denom == 0 else num / denom

    return EvalReport(
        gold_total=gold_total,
        predicted_total=predicted_total,
        span_correct=span_correct,
        category_correct=category_correct,
        span_precision=ratio(span_correct, predicted_total),
        span_recall=ratio(span_correct, gold_total),
        category_precision=ratio(category_correct, predicted_total),
        category_recall=ratio(category_correct, gold_total),
    )


def confusion_to_csv(confusion: dict[str, dict[str, int]]) -> str:
    """Confusion matrix as CSV with gold categories as rows."""
    labels = confusion_labels()
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["gold\\predicted"] + labels)
    for row in labels:
        writer.writerow([row] + [confusion[row][col] for col in labels])
    return buffer.getvalue()


MetricFn = Callable[[Sequence[FeedbackRecord], Sequence[tuple[str, GoldSpan]]], "float | None"]


def _counts(preds, golds) -> tuple[int, int, int, int]:
    matching = match_all(preds, golds)
    span_correct = len(matching.pairs)
    category_correct = sum(1 for p, (_, g) in matching.pairs if p.category == g.category)
    return len(preds), len(golds), span_correct, category_correct


def span_precision_metric(preds, golds) -> float | None:
    p, _, s, _ = _counts(preds, golds)
    return None if p == 0 else s / p


def span_recall_metric(preds, golds) -> float | None:
    _, g, s, _ = _counts(preds, golds)
    return None if g == 0 else s / g


def category_precision_metric(preds, golds) -> float | None:
    p, _, _, c = _counts(preds, golds)
    return None if p == 0 else c / p


def category_recall_metric(preds, golds) -> float | None:
    _, g, _, c = _counts(preds, golds)
    return None if g == 0 else c / g


METRICS: dict[str, MetricFn] = {
    "span_precision": span_precision_metric,
    "span_recall": span_recall_metric,
    "category_precision": category_precision_metric,
    "category_recall": category_recall_metric,
}


def bootstrap_ci(
    metric: MetricFn,
    preds: Sequence[FeedbackRecord],
    golds: Sequence[tuple[str, GoldSpan]],
    reps: int = 1000,
    seed: int = 0,
    conversation_ids: Sequence[str] | None = None,
) -> BootstrapResult:
    """Bootstrap the metric by resampling conversations with replacement.

    Each conversation keeps its predictions and golds together. Replicate r
    draws with random.Random(f"{seed}:{r}").choices over the sorted id list,
    so runs are deterministic and replicates are independent of each other's
    consumption. Replicates where the metric is undefined are skipped and
    counted. std is the sample standard deviation of replicate values.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    by_conv_preds: dict[str, list[FeedbackRecord]] = {}
    for pred in preds:
        by_conv_preds.setdefault(pred.conversation_id, []).append(pred)
    by_conv_golds: dict[str, list[tuple[str, GoldSpan]]] = {}
    for item in golds:
        by_conv_golds.setdefault(item[0], []).append(item)
    if conversation_ids is None:
        ids = sorted(set(by_conv_preds) | set(by_conv_golds))
    else:
        ids = list(conversation_ids)
    values: list[float] = []
    skipped = 0
    for r in range(reps):
        rng = random.Random(f"{seed}:{r}")
        sample = rng.choices(ids, k=len(ids)) if ids else []
        sampled_preds: list[FeedbackRecord] = []
        sampled_golds: list[tuple[str, GoldSpan]] = []
        for conv_id in sample:
            sampled_preds.extend(by_conv_preds.get(conv_id, []))
            sampled_golds.extend(by_conv_golds.get(conv_id, []))
        value = metric(sampled_preds, sampled_golds)
        if value is None:
            skipped += 1
        else:
            values.append(value)
    mean = statistics.fmean(values) if values else float("nan")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return BootstrapResult(mean=mean, std=std, reps=reps, skipped=skipped, values=tuple(values))


def evaluate(
    preds: Sequence[FeedbackRecord],
    annotations: Iterable[GoldAnnotation],
    bootstrap_reps: int = 0,
    seed: int = 0,
) -> EvalReport:
    """Full evaluation of predictions against a gold file."""
    golds = flatten_gold(annotations)
    report = compute_metrics(match_all(preds, golds))
    if bootstrap_reps > 0:
        for name, metric in METRICS.items():
            report.bootstrap[name] = bootstrap_ci(metric, preds, golds, bootstrap_reps, seed)
    return report


def cohen_kappa(labels_a: Sequence[bool], labels_b: Sequence[bool]) -> float:
    """Chance-corrected agreement on per-conversation binary labels."""
    if len(labels_a) != len(labels_b):
        raise ValueError("label sequences must have equal length")
    n = len(labels_a)
    if n == 0:
        raise ValueError("label sequences must be non-empty")
    observed = sum(1 for a, b in zip(labels_a, labels_b) if bool(a) == bool(b)) / n
    pa = sum(map(bool, labels_a)) / n
    pb = sum(map(bool, labels_b)) / n
    expected = pa * pb + (1 - pa) * (1 - pb)
    if expected == 1:
        raise ValueError("kappa undefined: chance agreement is 1 (both labelings constant)")
    return (observed - expected) / (1 - expected)


def category_agreement(
    pairs: Sequence[tuple[FeedbackCategory, FeedbackCategory]]
) -> float | None:
    """Fraction of mutually-identified feedback labeled with the same category."""
    if not pairs:
        return None
    return sum(1 for a, b in pairs if a == b) / len(pairs)


def _spans_mutual(a: GoldSpan, b: GoldSpan) -> bool:
    # symmetric containment: the shorter span must cover >= half the longer
    if a.user_message_index != b.user_message_index:
        return False
    shorter, longer = sorted((a.span_text, b.span_text), key=len)
    return shorter in longer and len(shorter) * 2 >= len(longer)


def mutual_category_pairs(
    annotations_a: Iterable[GoldAnnotation], annotations_b: Iterable[GoldAnnotation]
) -> list[tuple[FeedbackCategory, FeedbackCategory]]:
    """Pair up feedback both annotators found, greedily, one-to-one per conversation."""
    by_conv_b: dict[str, list[GoldSpan]] = {}
    for annotation in annotations_b:
        by_conv_b.setdefault(annotation.conversation_id, []).extend(annotation.spans)
    pairs: list[tuple[FeedbackCategory, FeedbackCategory]] = []
    for annotation in annotations_a:
        b_spans = by_conv_b.get(annotation.conversation_id, [])
        candidates = []
        for i, a_span in enumerate(annotation.spans):
            for j, b_span in enumerate(b_spans):
                if _spans_mutual(a_span, b_span):
                    candidates.append((-len(a_span.span_text), i, j))
        candidates.sort()
        used_a: set[int] = set()
        used_b: set[int] = set()
        for _, i, j in candidates:
            if i in used_a or j in used_b:
                continue
            used_a.add(i)
            used_b.add(j)
            pairs.append((annotation.spans[i].category, b_spans[j].category))
    return pairs


def binary_feedback_labels(
    annotations_a: Iterable[GoldAnnotation], annotations_b: Iterable[GoldAnnotation]
) -> tuple[list[bool], list[bool]]:
    """Align two annotators' gold files into per-conversation binary labels.

    Only conversations labeled by both annotators enter the comparison,
    ordered by conversation id for determinism.
    """
    a_by_conv = {a.conversation_id: a for a in annotations_a}
    b_by_conv = {b.conversation_id: b for b in annotations_b}
    shared = sorted(set(a_by_conv) & set(b_by_conv))
    labels_a = [bool(a_by_conv[cid].spans) for cid in shared]
    labels_b = [bool(b_by_conv[cid].spans) for cid in shared]
    return labels_a, labels_b


@dataclass
class DatasetStats:
    total_records: int
    category_counts: dict[str, int]
    category_fractions: dict[str, float]
    positives: int
    negatives: int
    negatives_per_positive: float | None
    conversations_total: int | None
    conversations_with_feedback: int
    mean_turns_overall: float | None
    mean_turns_feedback_bearing: float | None
    mean_feedback_turn: float | None
    mean_span_tokens: float | None

    def to_dict(self) -> dict:
        return {
            "total_records": self.total_records,
            "category_counts": self.category_counts,
            "category_fractions": self.category_fractions,
            "positives": self.positives,
            "negatives": self.negatives,
            "negatives_per_positive": self.negatives_per_positive,
            "conversations_total": self.conversations_total,
            "conversations_with_feedback": self.conversations_with_feedback,
            "mean_turns_overall": self.mean_turns_overall,
            "mean_turns_feedback_bearing": self.mean_turns_feedback_bearing,
            "mean_feedback_turn": self.mean_feedback_turn,
            "mean_span_tokens": self.mean_span_tokens,
        }


def dataset_stats(
    records: Sequence[FeedbackRecord],
    corpus: dict[str, Conversation] | None = None,
) -> DatasetStats:
    """Distributional statistics over emitted records.

    Turn statistics need the corpus; without it they are None. The feedback
    turn number is the 1-based ordinal of the user message among user
    messages, and span length counts whitespace-delimited tokens.
    """
    counts = {c.value: 0 for c in FeedbackCategory}
    for record in records:
        counts[record.category.value] += 1
    total = len(records)
    fractions = {name: (count / total if total else 0.0) for name, count in counts.items()}
    positives = sum(
        count for name, count in counts.items() if polarity(FeedbackCategory(name)) is Polarity.POSITIVE
    )
    negatives = total - positives
    feedback_conv_ids = {record.conversation_id for record in records}
    mean_feedback_turn = (
        statistics.fmean(r.user_message_index // 2 + 1 for r in records) if records else None
    )
    mean_span_tokens = (
        statistics.fmean(len(r.span_text.split()) for r in records) if records else None
    )
    conversations_total = None
    mean_turns_overall = None
    mean_turns_feedback_bearing = None
    if corpus is not None:
        conversations_total = len(corpus)
        if corpus:
            mean_turns_overall = statistics.fmean(c.complete_turns for c in corpus.values())
        bearing = [corpus[cid].complete_turns for cid in feedback_conv_ids if cid in corpus]
        if bearing:
            mean_turns_feedback_bearing = statistics.fmean(bearing)
    return DatasetStats(
        total_records=total,
        category_counts=counts,
        category_fractions=fractions,
        positives=positives,
        negatives=negatives,
        negatives_per_positive=(negatives / positives) if positives else None,
        conversations_total=conversations_total,
        conversations_with_feedback=len(feedback_conv_ids),
        mean_turns_overall=mean_turns_overall,
        mean_turns_feedback_bearing=mean_turns_feedback_bearing,
        mean_feedback_turn=mean_feedback_turn,
        mean_span_tokens=mean_span_tokens,
    )


def gold_to_records(annotations: Iterable[GoldAnnotation]) -> list[FeedbackRecord]:
    """View gold spans as records, e.g. to run dataset_stats on a gold file."""
    records = []
    for annotation in annotations:
        for span in annotation.spans:
            records.append(
                FeedbackRecord(
                    conversation_id=annotation.conversation_id,
                    user_message_index=span.user_message_index,
                    category=span.category,
                    span_text=span.span_text,
                    char_start=span.char_start,
                    char_end=span.char_end,
                    confidence=None,
                    run_id=f"gold:{annotation.annotator_id}",
                )
            )
    return records
