"""Recover structured feedback objects from noisy generated text.

Generations may echo the prompt, wrap JSON in prose or code fences, or emit
malformed candidates; everything here is total and never aborts on bad input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

PATTERN_FIELD = "User Response Pattern"
SPAN_FIELD = "User Response Text"
CONFIDENCE_FIELD = "Confidence Level (1-5)"


@dataclass
class ParseDiagnostics:
    """Counters accumulated across one generation's parse."""

    objects_found: int = 0
    missing_field: int = 0
    invalid_candidates: int = 0
    echo_chars_stripped: int = 0


@dataclass(frozen=True)
class RawFeedback:
    """One feedback object as emitted by the model, before validation."""

    pattern_text: str
    span_text: str
    confidence: int | None = None
    source_offset: int = 0

    def __post_init__(self) -> None:
        if not self.pattern_text:
            raise ValueError("pattern_text must be non-empty")
        if not self.span_text:
            raise ValueError("span_text must be non-empty")


@dataclass(frozen=True)
class JsonCandidate:
    text: str
    start: int
    end: int


def strip_prompt_echo(
    generated: str,
    prompt: str,
    diagnostics: ParseDiagnostics | None = None,
    exact_prefix_only: bool = False,
) -> str:
    """Drop everything up to and including the last echo of the prompt.

    Models sometimes repeat the prompt (occasionally more than once) before
    answering; keeping only the suffix after the last occurrence isolates the
    actual completion. With exact_prefix_only, only a literal prefix is
    removed.
    """
    if not prompt:
        return generated
    if exact_prefix_only:
        if generated.startswith(prompt):
            if diagnostics is not None:
                diagnostics.echo_chars_stripped += len(prompt)
            return generated[len(prompt):]
        return generated
    index = generated.rfind(prompt)
    if index == -1:
        return generated
    cut = index + len(prompt)
    if diagnostics is not None:
        diagnostics.echo_chars_stripped += cut
    return generated[cut:]


def _balanced_end(text: str, start: int) -> int:
    """Exclusive end of the brace-balanced region opening at start, or -1.

    Braces and escapes inside double-quoted string literals do not affect
    balance.
    """
    depth = 0
    in_string = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
        else:
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return i + 1
    return -1


def scan_json_objects(text: str, diagnostics: ParseDiagnostics | None = None) -> list[JsonCandidate]:
    """Find every strict JSON object embedded in free text, left to right.

    Overlapping candidates resolve to the outermost object: once a region
    parses, scanning resumes after it. A balanced region that fails strict
    parsing is counted as invalid and its interior is rescanned, so valid
    objects nested inside broken ones are still recovered. Returned
    candidates never overlap each other.
    """
    candidates: list[JsonCandidate] = []
    pos = 0
    n = len(text)
    while pos < n:
        brace = text.find("{", pos)
        if brace == -1:
            break
        end = _balanced_end(text, brace)
        if end == -1:
            pos = brace + 1
            continue
        region = text[brace:end]
        try:
            obj = json.loads(region)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            candidates.append(JsonCandidate(text=region, start=brace, end=end))
            pos = end
        else:
            if diagnostics is not None:
                diagnostics.invalid_candidates += 1
            pos = brace + 1
    if diagnostics is not None:
        diagnostics.objects_found += len(candidates)
    return candidates


def parse_raw_feedback(
    candidate: JsonCandidate | str,
    expects_confidence: bool,
    diagnostics: ParseDiagnostics | None = None,
) -> RawFeedback | None:
    """Parse one candidate object into RawFeedback, or None on missing fields.

    Both required fields must be present with non-empty string values; field
    names are matched exactly. Confidence is captured only when the template
    expects it and the value is an integer in 1..5; anything else leaves it
    unset rather than rejecting the object. Extra fields are ignored.
    """
    if isinstance(candidate, JsonCandidate):
        text, offset = candidate.text, candidate.start
    else:
        text, offset = candidate, 0
    obj = json.loads(text)
    pattern = obj.get(PATTERN_FIELD)
    span = obj.get(SPAN_FIELD)
    if not isinstance(pattern, str) or not pattern or not isinstance(span, str) or not span:
        if diagnostics is not None:
            diagnostics.missing_field += 1
        return None
    confidence = None
    if expects_confidence:
        value = obj.get(CONFIDENCE_FIELD)
        # bool is an int subclass; True must not read as confidence 1
        if isinstance(value, int) and not isinstance(value, bool) and 1 <= value <= 5:
            confidence = value
    return RawFeedback(
        pattern_text=pattern,
        span_text=span,
        confidence=confidence,
        source_offset=offset,
    )


def raw_feedback_json(raw: RawFeedback) -> str:
    """Serialize RawFeedback back to the on-the-wire object shape."""
    obj: dict = {PATTERN_FIELD: raw.pattern_text, SPAN_FIELD: raw.span_text}
    if raw.confidence is not None:
        obj[CONFIDENCE_FIELD] = raw.confidence
    return json.dumps(obj, ensure_ascii=False)
