"""Per-conversation feedback extraction and the resumable batch pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .corpus import Conversation, FilterPolicy, IngestError, SchemaMap, apply_filters, ingest_jsonl
from .llm_client import CacheMiss, EndpointConfig, GenerationParams, LLMClient, TransportFailure
from .parsing import (
    ParseDiagnostics,
    RawFeedback,
    parse_raw_feedback,
    scan_json_objects,
    strip_prompt_echo,
)
from .prompting import FeedbackCategory, PromptTemplate, parse_category, render_prompt

logger = logging.getLogger("natfeed.extractor")

RECORDS_FILENAME = "records.jsonl"
PROGRESS_FILENAME = "progress.jsonl"
REPORT_FILENAME = "run_report.json"


@dataclass(frozen=True)
class FeedbackRecord:
    """A validated feedback span anchored in a specific user message."""

    conversation_id: str
    user_message_index: int
    category: FeedbackCategory
    span_text: str
    char_start: int
    char_end: int
    confidence: int | None = None
    run_id: str = ""

    def verify_against(self, conv: Conversation) -> None:
        """Check the anchoring invariants against the source conversation."""
        message = conv.messages[self.user_message_index]
        if message.role != "user":
            raise ValueError(f"record points at a non-user message in {conv.id}")
        if self.user_message_index < 2:
            raise ValueError(f"record points at the first user message in {conv.id}")
        if message.content[self.char_start : self.char_end] != self.span_text:
            raise ValueError(f"offsets do not reconstruct span text in {conv.id}")


class RejectionReason(Enum):
    SPAN_NOT_FOUND = "span_not_found"
    INVALID_CATEGORY = "invalid_category"
    FIRST_USER_MESSAGE = "first_user_message"
    DUPLICATE = "duplicate"
    MISSING_FIELD = "missing_field"


def record_to_dict(record: FeedbackRecord) -> dict:
    return {
        "conversation_id": record.conversation_id,
        "user_message_index": record.user_message_index,
        "category": record.category.value,
        "span_text": record.span_text,
        "char_start": record.char_start,
        "char_end": record.char_end,
        "confidence": record.confidence,
        "run_id": record.run_id,
    }


def record_from_dict(data: dict) -> FeedbackRecord:
    return FeedbackRecord(
        conversation_id=data["conversation_id"],
        user_message_index=data["user_message_index"],
        category=FeedbackCategory(data["category"]),
        span_text=data["span_text"],
        char_start=data["char_start"],
        char_end=data["char_end"],
        confidence=data.get("confidence"),
        run_id=data.get("run_id", ""),
    )


def load_records(
    path: str | Path, corpus: dict[str, Conversation] | None = None
) -> list[FeedbackRecord]:
    """Load a record file; with a corpus index, every record is re-verified."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = record_from_dict(json.loads(line))
            if corpus is not None:
                record.verify_against(corpus[record.conversation_id])
            records.append(record)
    return records


def eligible_user_indexes(conv: Conversation) -> range:
    """User messages at or after the second one; only those can carry feedback."""
    return range(2, len(conv.messages), 2)


def locate_span(conv: Conversation, span_text: str) -> tuple[int, int] | None:
    """Earliest eligible user message containing the span, with first offset.

    Assistant messages and the opening user message are never searched: a
    user's first request cannot be feedback on a response.
    """
    if not span_text:
        raise ValueError("span_text must be non-empty")
    for index in eligible_user_indexes(conv):
        offset = conv.messages[index].content.find(span_text)
        if offset != -1:
            return index, offset
    return None


def validate_raw(
    raw: RawFeedback,
    conv: Conversation,
    seen: set[tuple[int, str, FeedbackCategory]],
    run_id: str = "",
) -> FeedbackRecord | RejectionReason:
    """Turn a parsed object into a FeedbackRecord or a single rejection reason.

    Checks run in order: category, span location, duplicate triple. seen is
    mutated on acceptance so duplicates within one generation collapse.
    """
    category = parse_category(raw.pattern_text)
    if category is None:
        return RejectionReason.INVALID_CATEGORY
    located = locate_span(conv, raw.span_text)
    if located is None:
        if raw.span_text in conv.messages[0].content:
            return RejectionReason.FIRST_USER_MESSAGE
        return RejectionReason.SPAN_NOT_FOUND
    index, start = located
    key = (index, raw.span_text, category)
    if key in seen:
        return RejectionReason.DUPLICATE
    seen.add(key)
    return FeedbackRecord(
        conversation_id=conv.id,
        user_message_index=index,
        category=category,
        span_text=raw.span_text,
        char_start=start,
        char_end=start + len(raw.span_text),
        confidence=raw.confidence,
        run_id=run_id,
    )


class ConversationExtractionError(Exception):
    """Transport-level failure while extracting one conversation."""

    def __init__(self, conversation_id: str, cause: Exception):
        super().__init__(f"extraction failed for conversation {conversation_id}: {cause}")
        self.conversation_id = conversation_id
        self.cause = cause


@dataclass
class ConversationExtraction:
    """Everything one conversation produced, including the rejection ledger."""

    conversation_id: str
    records: list[FeedbackRecord]
    diagnostics: ParseDiagnostics
    rejections: dict[str, int]
    confidence_filtered: int = 0

    @property
    def objects_parsed(self) -> int:
        return self.diagnostics.objects_found

    def reconciles(self) -> bool:
        return (
            len(self.records) + sum(self.rejections.values()) + self.confidence_filtered
            == self.objects_parsed
        )


def extract_conversation(
    conv: Conversation,
    template: PromptTemplate,
    client: LLMClient,
    params: GenerationParams | None = None,
    run_id: str = "",
    min_confidence: int | None = None,
    exact_prefix_echo: bool = False,
) -> ConversationExtraction:
    """Render, complete, parse, and validate feedback for one conversation.

    Parse-level problems never abort; transport failures are re-raised with
    the conversation id attached. Record order follows object order in the
    generation. min_confidence, when set, drops records whose confidence is
    absent or below it (counted, outside the rejection ledger).
    """
    prompt = render_prompt(template, conv)
    try:
        result = client.complete(prompt, params)
    except (TransportFailure, CacheMiss) as exc:
        raise ConversationExtractionError(conv.id, exc) from exc
    diagnostics = ParseDiagnostics()
    body = strip_prompt_echo(result.text, prompt, diagnostics, exact_prefix_only=exact_prefix_echo)
    candidates = scan_json_objects(body, diagnostics)
    rejections = {reason.value: 0 for reason in RejectionReason}
    records: list[FeedbackRecord] = []
    confidence_filtered = 0
    seen: set[tuple[int, str, FeedbackCategory]] = set()
    for candidate in candidates:
        raw = parse_raw_feedback(candidate, template.expects_confidence, diagnostics)
        if raw is None:
            rejections[RejectionReason.MISSING_FIELD.value] += 1
            continue
        outcome = validate_raw(raw, conv, seen, run_id)
        if isinstance(outcome, RejectionReason):
            rejections[outcome.value] += 1
            continue
        if min_confidence is not None and (
            outcome.confidence is None or outcome.confidence < min_confidence
        ):
            confidence_filtered += 1
            continue
        records.append(outcome)
    return ConversationExtraction(
        conversation_id=conv.id,
        records=records,
        diagnostics=diagnostics,
        rejections=rejections,
        confidence_filtered=confidence_filtered,
    )


@dataclass
class RunReport:
    """Tallies for one pipeline run (cumulative across resumes).

    Conservation: records_emitted + sum(rejections) + confidence_filtered
    equals objects_parsed.
    """

    run_id: str
    template: str
    params: dict
    conversations_seen: int = 0
    conversations_accepted: int = 0
    conversations_processed: int = 0
    transport_failures: int = 0
    ingest_errors: int = 0
    filter_rejections: dict = field(default_factory=dict)
    objects_parsed: int = 0
    records_emitted: int = 0
    rejections: dict = field(default_factory=dict)
    confidence_filtered: int = 0
    duration_seconds: float = 0.0

    def reconciles(self) -> bool:
        return (
            self.records_emitted + sum(self.rejections.values()) + self.confidence_filtered
            == self.objects_parsed
        )

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "template": self.template,
            "params": self.params,
            "conversations_seen": self.conversations_seen,
            "conversations_accepted": self.conversations_accepted,
            "conversations_processed": self.conversations_processed,
            "transport_failures": self.transport_failures,
            "ingest_errors": self.ingest_errors,
            "filter_rejections": self.filter_rejections,
            "objects_parsed": self.objects_parsed,
            "records_emitted": self.records_emitted,
            "rejections": self.rejections,
            "confidence_filtered": self.confidence_filtered,
            "duration_seconds": self.duration_seconds,
        }


def default_run_id(template: PromptTemplate, params: GenerationParams, model_name: str) -> str:
    """Deterministic run id: resuming the same configuration reuses it."""
    payload = json.dumps(
        {
            "template": template.name,
            "template_text": template.body,
            "params": params.to_dict(),
            "model": model_name,
        },
        sort_keys=True,
        ensure_ascii=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _ordered_parallel(items: Iterable, fn: Callable, max_workers: int) -> Iterator:
    """Run fn over items with bounded workers, yielding results in input order.

    A sliding window of futures keeps at most 2x max_workers submissions in
    flight, so memory stays bounded on large corpora while output order stays
    deterministic.
    """
    if max_workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        window: deque = deque()
        for item in items:
            window.append(pool.submit(fn, item))
            if len(window) >= max_workers * 2:
                yield window.popleft().result()
        while window:
            yield window.popleft().result()


def _load_progress(path: Path) -> dict[str, dict]:
    done: dict[str, dict] = {}
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                done[entry["conversation_id"]] = entry
    return done


def _drop_orphan_records(records_path: Path, done_ids: set[str]) -> None:
    """Remove records whose conversation never reached the progress ledger.

    A crash between the record flush and the progress flush leaves orphans;
    their conversation is re-extracted on resume, so the stale lines must go.
    """
    if not records_path.exists():
        return
    tmp = records_path.with_name(records_path.name + ".tmp")
    with open(records_path, encoding="utf-8") as src, open(tmp, "w", encoding="utf-8") as dst:
        for line in src:
            stripped = line.strip()
            if not stripped:
                continue
            if json.loads(stripped)["conversation_id"] in done_ids:
                dst.write(stripped + "\n")
    os.replace(tmp, records_path)


def run_pipeline(
    corpus_path: str | Path,
    schema: SchemaMap,
    policy: FilterPolicy,
    template: PromptTemplate,
    params: GenerationParams,
    endpoint: EndpointConfig,
    output_dir: str | Path,
    cache_path: str | Path | None = None,
    replay: bool = False,
    resume: bool = True,
    run_id: str | None = None,
    min_confidence: int | None = None,
) -> RunReport:
    """Stream a corpus through extraction with bounded parallelism.

    Records append to records.jsonl in corpus order; progress.jsonl records
    one ledger line per finished conversation, flushed after its records, so
    an interrupted run resumes without duplicating work or output. Transport
    failures skip the conversation (it is retried on the next resume) and are
    counted, never fatal.
    """
    started = time.monotonic()
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    records_path = output / RECORDS_FILENAME
    progress_path = output / PROGRESS_FILENAME
    report_path = output / REPORT_FILENAME

    if not resume:
        for path in (records_path, progress_path, report_path):
            if path.exists():
                path.unlink()

    done = _load_progress(progress_path)
    _drop_orphan_records(records_path, set(done))

    run_id = run_id or default_run_id(template, params, endpoint.model_name)
    report = RunReport(
        run_id=run_id,
        template=template.name,
        params=params.to_dict(),
        rejections={reason.value: 0 for reason in RejectionReason},
    )

    def accepted_conversations() -> Iterator[Conversation]:
        for item in ingest_jsonl(corpus_path, schema):
            if isinstance(item, IngestError):
                report.ingest_errors += 1
                continue
            report.conversations_seen += 1
            reason = apply_filters(item, policy)
            if reason is not None:
                report.filter_rejections[reason.value] = (
                    report.filter_rejections.get(reason.value, 0) + 1
                )
                continue
            report.conversations_accepted += 1
            yield item

    client = LLMClient(endpoint, cache_path=cache_path, replay=replay)

    def work(conv: Conversation) -> ConversationExtraction | ConversationExtractionError:
        try:
            return extract_conversation(
                conv,
                template,
                client,
                params=params,
                run_id=run_id,
                min_confidence=min_confidence,
            )
        except ConversationExtractionError as exc:
            return exc

    def pending() -> Iterator[Conversation]:
        for conv in accepted_conversations():
            if conv.id in done:
                continue
            yield conv

    try:
        with open(records_path, "a", encoding="utf-8") as records_fh, open(
            progress_path, "a", encoding="utf-8"
        ) as progress_fh:
            for outcome in _ordered_parallel(pending(), work, endpoint.max_concurrency):
                if isinstance(outcome, ConversationExtractionError):
                    logger.warning("%s", outcome)
                    report.transport_failures += 1
                    continue
                for record in outcome.records:
                    records_fh.write(json.dumps(record_to_dict(record), ensure_ascii=False) + "\n")
                records_fh.flush()
                ledger = {
                    "conversation_id": outcome.conversation_id,
                    "objects": outcome.objects_parsed,
                    "records": len(outcome.records),
                    "rejections": outcome.rejections,
                    "confidence_filtered": outcome.confidence_filtered,
                }
                progress_fh.write(json.dumps(ledger, ensure_ascii=False) + "\n")
                progress_fh.flush()
                done[outcome.conversation_id] = ledger
    finally:
        client.close()

    for entry in done.values():
        report.conversations_processed += 1
        report.objects_parsed += entry["objects"]
        report.records_emitted += entry["records"]
        report.confidence_filtered += entry.get("confidence_filtered", 0)
        for reason, count in entry["rejections"].items():
            report.rejections[reason] = report.rejections.get(reason, 0) + count
    report.duration_seconds = time.monotonic() - started

    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")
    return report
