"""HTTP service backing human span annotation and blinded pairwise judging."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .corpus import Conversation, to_canonical_dict
from .evaluation import GoldAnnotation, GoldSpan, gold_to_dict
from .judge import CHOICE_A, CHOICE_B, CHOICE_TIE, ResponsePair, Verdict, resolve_winner, verdict_to_dict
from .prompting import category_from_value

KIND_SPAN = "span_annotation"
KIND_PAIRWISE = "pairwise"
SUBMISSIONS_FILENAME = "submissions.jsonl"


@dataclass(frozen=True)
class AnnotationTask:
    task_id: str
    kind: str
    ordinal: int
    conversation: Conversation | None = None
    pair: ResponsePair | None = None


class SpanBody(BaseModel):
    user_message_index: int
    category: str
    span_text: str
    char_start: int
    char_end: int


class SubmissionBody(BaseModel):
    task_id: str
    annotator_id: str
    spans: list[SpanBody] | None = None
    skipped: bool = False
    choice: str | None = None


class SkipBody(BaseModel):
    task_id: str
    annotator_id: str


class ServiceState:
    """Tasks from the loaded corpus/pairs plus a durable submission log.

    Tasks are rebuilt from their source files on startup; only submissions
    persist, as an append-only JSONL log replayed into an in-memory index.
    Task assignment is advisory: two annotators may legitimately label the
    same task, which is what agreement measurement needs.
    """

    def __init__(
        self,
        data_dir: str | Path,
        conversations: list[Conversation] | None = None,
        pairs: list[ResponsePair] | None = None,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.data_dir / SUBMISSIONS_FILENAME
        self._write_lock = threading.Lock()
        self.tasks: list[AnnotationTask] = []
        self.by_task_id: dict[str, AnnotationTask] = {}
        self.conversations: dict[str, Conversation] = {}
        for ordinal, conv in enumerate(conversations or []):
            task = AnnotationTask(f"span:{conv.id}", KIND_SPAN, ordinal, conversation=conv)
            self.tasks.append(task)
            self.by_task_id[task.task_id] = task
            self.conversations[conv.id] = conv
        for ordinal, pair in enumerate(pairs or []):
            task = AnnotationTask(f"pair:{pair.pair_id}", KIND_PAIRWISE, ordinal, pair=pair)
            self.tasks.append(task)
            self.by_task_id[task.task_id] = task
        # (task_id, annotator_id) -> latest submission entry
        self.latest: dict[tuple[str, str], dict] = {}
        if self.log_path.exists():
            with open(self.log_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        self.latest[(entry["task_id"], entry["annotator_id"])] = entry

    def append_submission(self, task_id: str, annotator_id: str, body: dict) -> dict:
        key = (task_id, annotator_id)
        with self._write_lock:
            version = self.latest[key]["version"] + 1 if key in self.latest else 1
            entry = {
                "submission_id": f"{task_id}:{annotator_id}:v{version}",
                "task_id": task_id,
                "annotator_id": annotator_id,
                "version": version,
                "timestamp": time.time(),
                "body": body,
            }
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
                fh.flush()
            self.latest[key] = entry
        return entry

    def next_task(self, annotator_id: str, kind: str) -> AnnotationTask | None:
        for task in self.tasks:
            if task.kind != kind:
                continue
            if (task.task_id, annotator_id) not in self.latest:
                return task
        return None

    def progress(self, annotator_id: str, kind: str) -> dict:
        total = sum(1 for t in self.tasks if t.kind == kind)
        done = sum(
            1
            for t in self.tasks
            if t.kind == kind and (t.task_id, annotator_id) in self.latest
        )
        return {"done": done, "total": total}


def _validate_span_submission(body: SubmissionBody, conv: Conversation) -> list[dict]:
    """Field-level validation errors; empty list means acceptable."""
    errors: list[dict] = []
    spans = body.spans or []
    if body.skipped and spans:
        errors.append({"field": "spans", "message": "a skipped submission must carry zero spans"})
    for i, span in enumerate(spans):
        prefix = f"spans[{i}]"
        try:
            category_from_value(span.category)
        except ValueError:
            errors.append({"field": f"{prefix}.category", "message": f"unknown category {span.category!r}"})
        index = span.user_message_index
        if index < 0 or index >= len(conv.messages):
            errors.append({"field": f"{prefix}.user_message_index", "message": "index out of range"})
            continue
        if conv.messages[index].role != "user":
            errors.append({"field": f"{prefix}.user_message_index", "message": "not a user message"})
            continue
        if index < 2:
            errors.append(
                {
                    "field": f"{prefix}.user_message_index",
                    "message": "feedback cannot target the opening user message",
                }
            )
            continue
        content = conv.messages[index].content
        if not (0 <= span.char_start <= span.char_end <= len(content)):
            errors.append({"field": f"{prefix}.char_start", "message": "offsets out of range"})
            continue
        if content[span.char_start : span.char_end] != span.span_text:
            errors.append(
                {"field": f"{prefix}.span_text", "message": "offsets do not reconstruct span text"}
            )
    return errors


def _task_payload(task: AnnotationTask) -> dict:
    if task.kind == KIND_SPAN:
        return {"conversation": to_canonical_dict(task.conversation)}
    first, second = task.pair.presented()
    # presented order only; system identities and the swap stay server-side
    return {
        "pair": {
            "pair_id": task.pair.pair_id,
            "context": [{"role": m.role, "content": m.content} for m in task.pair.context],
            "response_a": first,
            "response_b": second,
        }
    }


def export_gold_annotations(state: ServiceState, annotator: str | None = None) -> list[GoldAnnotation]:
    """Latest span submissions as GoldAnnotations, in corpus order."""
    annotations = []
    for task in state.tasks:
        if task.kind != KIND_SPAN:
            continue
        keys = [
            key
            for key in state.latest
            if key[0] == task.task_id and (annotator is None or key[1] == annotator)
        ]
        for key in sorted(keys, key=lambda k: k[1]):
            entry = state.latest[key]
            body = entry["body"]
            spans = tuple(
                GoldSpan(
                    user_message_index=s["user_message_index"],
                    category=category_from_value(s["category"]),
                    span_text=s["span_text"],
                    char_start=s["char_start"],
                    char_end=s["char_end"],
                )
                for s in body.get("spans", [])
            )
            annotations.append(
                GoldAnnotation(
                    conversation_id=task.conversation.id,
                    annotator_id=key[1],
                    spans=spans,
                    skipped=body.get("skipped", False),
                )
            )
    return annotations


def export_verdicts(state: ServiceState, annotator: str | None = None) -> list[Verdict]:
    """Latest pairwise submissions as unswapped Verdicts, in queue order."""
    verdicts = []
    for task in state.tasks:
        if task.kind != KIND_PAIRWISE:
            continue
        keys = [
            key
            for key in state.latest
            if key[0] == task.task_id and (annotator is None or key[1] == annotator)
        ]
        for key in sorted(keys, key=lambda k: k[1]):
            body = state.latest[key]["body"]
            if body.get("skipped"):
                continue
            choice = body["choice"]
            verdicts.append(
                Verdict(
                    pair_id=task.pair.pair_id,
                    choice=choice,
                    judge_id=key[1],
                    resolved_winner=resolve_winner(task.pair, choice),
                )
            )
    return verdicts


def create_app(state: ServiceState, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="natfeed annotation service")

    @app.get("/tasks/next")
    def tasks_next(kind: str = Query(...), annotator: str = Query(...)) -> dict:
        if kind not in (KIND_SPAN, KIND_PAIRWISE):
            raise HTTPException(status_code=422, detail=f"unknown kind {kind!r}")
        task = state.next_task(annotator, kind)
        progress = state.progress(annotator, kind)
        if task is None:
            return {"task": None, "exhausted": True, "progress": progress}
        return {
            "task": {
                "task_id": task.task_id,
                "kind": task.kind,
                "ordinal": task.ordinal,
                **_task_payload(task),
            },
            "exhausted": False,
            "progress": progress,
        }

    @app.get("/conversations/{conversation_id}")
    def get_conversation(conversation_id: str) -> dict:
        conv = state.conversations.get(conversation_id)
        if conv is None:
            raise HTTPException(status_code=404, detail="unknown conversation")
        return to_canonical_dict(conv)

    @app.post("/submissions")
    def post_submission(body: SubmissionBody) -> dict:
        task = state.by_task_id.get(body.task_id)
        if task is None:
            raise HTTPException(status_code=404, detail="unknown task")
        if not body.annotator_id:
            raise HTTPException(status_code=422, detail="annotator_id is required")
        if task.kind == KIND_SPAN:
            errors = _validate_span_submission(body, task.conversation)
            if errors:
                raise HTTPException(status_code=422, detail=errors)
            stored = {
                "kind": KIND_SPAN,
                "skipped": body.skipped,
                "spans": [
                    {
                        "user_message_index": s.user_message_index,
                        "category": category_from_value(s.category).value,
                        "span_text": s.span_text,
                        "char_start": s.char_start,
                        "char_end": s.char_end,
                    }
                    for s in (body.spans or [])
                ],
            }
        else:
            if body.choice not in (CHOICE_A, CHOICE_B, CHOICE_TIE):
                raise HTTPException(
                    status_code=422,
                    detail=[{"field": "choice", "message": "choice must be A, B, or TIE"}],
                )
            stored = {"kind": KIND_PAIRWISE, "choice": body.choice}
        entry = state.append_submission(body.task_id, body.annotator_id, stored)
        return {
            "status": "accepted",
            "submission_id": entry["submission_id"],
            "version": entry["version"],
        }

    @app.post("/skip")
    def post_skip(body: SkipBody) -> dict:
        task = state.by_task_id.get(body.task_id)
        if task is None:
            raise HTTPException(status_code=404, detail="unknown task")
        entry = state.append_submission(
            body.task_id, body.annotator_id, {"kind": task.kind, "skipped": True, "spans": []}
        )
        return {
            "status": "accepted",
            "submission_id": entry["submission_id"],
            "version": entry["version"],
        }

    @app.get("/export")
    def export(kind: str = Query(...), annotator: str | None = Query(default=None)) -> PlainTextResponse:
        if kind == KIND_SPAN:
            lines = [json.dumps(gold_to_dict(a), ensure_ascii=False) for a in export_gold_annotations(state, annotator)]
        elif kind == KIND_PAIRWISE:
            lines = [json.dumps(verdict_to_dict(v), ensure_ascii=False) for v in export_verdicts(state, annotator)]
        else:
            raise HTTPException(status_code=422, detail=f"unknown kind {kind!r}")
        body = "\n".join(lines) + ("\n" if lines else "")
        return PlainTextResponse(content=body, media_type="application/x-ndjson")

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
