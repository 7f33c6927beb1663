"""Blinded pairwise response judging, win rates, and exact binomial tests."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Message
from .llm_client import GenerationParams, LLMClient, TransportFailure
from .prompting import TEMPLATE_DIR, TemplateError, render_messages

logger = logging.getLogger("natfeed.judge")

CHOICE_A = "A"
CHOICE_B = "B"
CHOICE_TIE = "TIE"
AS_IS = "as_is"
SWAPPED = "swapped"

EXCLUDE = "exclude"
HALF_CREDIT = "half_credit"


@dataclass(frozen=True)
class ResponsePair:
    """Two candidate responses over a shared context.

    system_a/system_b name the sources of response_a/response_b as authored;
    presented_order controls what the judge sees. Source systems never enter
    judge-visible payloads.
    """

    pair_id: str
    context: tuple[Message, ...]
    response_a: str
    response_b: str
    system_a: str
    system_b: str
    presented_order: str = AS_IS

    def __post_init__(self) -> None:
        if self.presented_order not in (AS_IS, SWAPPED):
            raise ValueError(f"unknown presented_order {self.presented_order!r}")

    def presented(self) -> tuple[str, str]:
        """Responses in display order (first shown as A, second as B)."""
        if self.presented_order == SWAPPED:
            return self.response_b, self.response_a
        return self.response_a, self.response_b


@dataclass(frozen=True)
class Verdict:
    pair_id: str
    choice: str | None  # A/B as presented, TIE, or None on judge failure
    judge_id: str
    resolved_winner: str | None  # source system after unswapping; None for ties/errors
    error: str | None = None


def blind_pairs(pairs: Sequence[ResponsePair], seed: int) -> list[ResponsePair]:
    """Randomize presentation order, each pair swapped with probability 0.5.

    One generator seeded once drives the whole list, so the assignment is a
    pure function of (seed, list order). System labels are untouched.
    """
    rng = random.Random(seed)
    return [
        dataclasses.replace(pair, presented_order=SWAPPED if rng.random() < 0.5 else AS_IS)
        for pair in pairs
    ]


def resolve_winner(pair: ResponsePair, choice: str) -> str | None:
    """Map a presented-order choice back to the source system."""
    if choice == CHOICE_TIE:
        return None
    if choice not in (CHOICE_A, CHOICE_B):
        raise ValueError(f"unknown choice {choice!r}")
    picked_first = choice == CHOICE_A
    if pair.presented_order == SWAPPED:
        return pair.system_b if picked_first else pair.system_a
    return pair.system_a if picked_first else pair.system_b


JUDGE_PLACEHOLDERS = ("{{context}}", "{{response_a}}", "{{response_b}}")


@dataclass(frozen=True)
class JudgeTemplate:
    """Editable pairwise-judging prompt with context and two response slots."""

    name: str
    body: str

    def __post_init__(self) -> None:
        for placeholder in JUDGE_PLACEHOLDERS:
            count = self.body.count(placeholder)
            if count != 1:
                raise TemplateError(
                    f"judge template {self.name!r} must contain {placeholder} exactly once, found {count}"
                )


def load_judge_template(path: str | Path) -> JudgeTemplate:
    path = Path(path)
    return JudgeTemplate(name=path.stem, body=path.read_text(encoding="utf-8"))


def resolve_judge_template(name_or_path: str | Path = "judge_pairwise") -> JudgeTemplate:
    """Accept a builtin judge template name or a path to a template file."""
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        return load_judge_template(path)
    builtin = TEMPLATE_DIR / f"{name_or_path}.txt"
    if not builtin.exists():
        raise TemplateError(f"no judge template {name_or_path!r}")
    return load_judge_template(builtin)


# uppercase-only A/B so the article "a" in prose never reads as a verdict
_VERDICT_PATTERN = re.compile(r"\b(TIE|Tie|tie|A|B)\b")


def parse_verdict(text: str) -> str | None:
    """First unambiguous A/B/TIE token in the judge output, if any."""
    match = _VERDICT_PATTERN.search(text)
    if match is None:
        return None
    return match.group(1).upper()


def build_judge_prompt(pair: ResponsePair, template: JudgeTemplate) -> str:
    """Render the judge prompt from presented responses only (never system names)."""
    first, second = pair.presented()
    return (
        template.body.replace("{{context}}", render_messages(pair.context))
        .replace("{{response_a}}", first)
        .replace("{{response_b}}", second)
    )


def judge_pair(
    pair: ResponsePair,
    client: LLMClient,
    template: JudgeTemplate,
    params: GenerationParams | None = None,
    judge_id: str | None = None,
) -> Verdict:
    """Ask the judge endpoint for a verdict; one retry on unparseable output."""
    judge_id = judge_id or client.cfg.model_name
    prompt = build_judge_prompt(pair, template)
    last_text = ""
    for _ in range(2):
        try:
            last_text = client.complete(prompt, params).text
        except TransportFailure as exc:
            return Verdict(pair.pair_id, None, judge_id, None, error=f"transport: {exc}")
        choice = parse_verdict(last_text)
        if choice is not None:
            return Verdict(pair.pair_id, choice, judge_id, resolve_winner(pair, choice))
    return Verdict(pair.pair_id, None, judge_id, None, error=f"unparseable: {last_text[:200]!r}")


def judge_pairs(
    pairs: Sequence[ResponsePair],
    client: LLMClient,
    template: JudgeTemplate,
    params: GenerationParams | None = None,
    judge_id: str | None = None,
    max_workers: int | None = None,
) -> list[Verdict]:
    """Judge every pair, preserving input order; parallelism is bounded by the client."""
    workers = max_workers or client.cfg.max_concurrency
    if workers <= 1:
        return [judge_pair(pair, client, template, params, judge_id) for pair in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: judge_pair(p, client, template, params, judge_id), pairs))


@dataclass
class WinRateReport:
    system: str
    wins: dict[str, int]
    ties: int
    errors: int
    n_effective: int
    win_rate: float | None
    binomial_p: float | None
    tie_policy: str

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "wins": self.wins,
            "ties": self.ties,
            "errors": self.errors,
            "n_effective": self.n_effective,
            "win_rate": self.win_rate,
            "binomial_p": self.binomial_p,
            "tie_policy": self.tie_policy,
        }


def win_rate(
    verdicts: Sequence[Verdict],
    tie_policy: str = HALF_CREDIT,
    system: str | None = None,
) -> WinRateReport:
    """Aggregate verdicts into a win rate for one system.

    half_credit counts ties as half a win over all decisive-plus-tie
    verdicts; exclude drops ties from both numerator and denominator. Error
    verdicts never enter n. The significance test is always computed on
    decisive verdicts only, since the exact binomial needs integer counts.
    When system is omitted, the system with the most wins is reported.
    """
    if tie_policy not in (EXCLUDE, HALF_CREDIT):
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    wins: dict[str, int] = {}
    ties = 0
    errors = 0
    for verdict in verdicts:
        if verdict.choice is None:
            errors += 1
        elif verdict.choice == CHOICE_TIE:
            ties += 1
        else:
            wins[verdict.resolved_winner] = wins.get(verdict.resolved_winner, 0) + 1
    if system is None:
        if not wins:
            raise ValueError("no decisive verdicts and no focal system given")
        system = min(wins, key=lambda name: (-wins[name], name))
    focal = wins.get(system, 0)
    decisive = sum(wins.values())
    if tie_policy == EXCLUDE:
        n_effective = decisive
        rate = focal / decisive if decisive else None
    else:
        n_effective = decisive + ties
        rate = (focal + 0.5 * ties) / n_effective if n_effective else None
    p_value = binomial_p(focal, decisive) if decisive else None
    return WinRateReport(
        system=system,
        wins=wins,
        ties=ties,
        errors=errors,
        n_effective=n_effective,
        win_rate=rate,
        binomial_p=p_value,
        tie_policy=tie_policy,
    )


def binomial_p(wins: int, n: int, p0: float = 0.5) -> float:
    """Exact one-sided upper-tail binomial probability P[X >= wins].

    Exact rational arithmetic for n <= 1000 (then one correctly-rounded
    float conversion); log-domain summation beyond that.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= wins <= n:
        raise ValueError("wins must satisfy 0 <= wins <= n")
    if not 0 <= p0 <= 1:
        raise ValueError("p0 must be in [0, 1]")
    if p0 == 0:
        return 1.0 if wins == 0 else 0.0
    if p0 == 1:
        return 1.0
    if n <= 1000:
        p = Fraction(p0)
        q = 1 - p
        total = Fraction(0)
        for k in range(wins, n + 1):
            total += math.comb(n, k) * p**k * q ** (n - k)
        return float(total)
    log_p = math.log(p0)
    log_q = math.log1p(-p0)
    logs = [
        math.lgamma(n + 1)
        - math.lgamma(k + 1)
        - math.lgamma(n - k + 1)
        + k * log_p
        + (n - k) * log_q
        for k in range(wins, n + 1)
    ]
    peak = max(logs)
    return math.exp(peak) * sum(math.exp(v - peak) for v in logs)


def pair_to_dict(pair: ResponsePair) -> dict:
    return {
        "pair_id": pair.pair_id,
        "context": [{"role": m.role, "content": m.content} for m in pair.context],
        "response_a": pair.response_a,
        "response_b": pair.response_b,
        "system_a": pair.system_a,
        "system_b": pair.system_b,
        "presented_order": pair.presented_order,
    }


def pair_from_dict(data: dict) -> ResponsePair:
    return ResponsePair(
        pair_id=str(data["pair_id"]),
        context=tuple(Message(m["role"], m["content"]) for m in data.get("context", [])),
        response_a=data["response_a"],
        response_b=data["response_b"],
        system_a=data["system_a"],
        system_b=data["system_b"],
        presented_order=data.get("presented_order", AS_IS),
    )


def verdict_to_dict(verdict: Verdict) -> dict:
    return {
        "pair_id": verdict.pair_id,
        "choice": verdict.choice,
        "judge_id": verdict.judge_id,
        "resolved_winner": verdict.resolved_winner,
        "error": verdict.error,
    }


def verdict_from_dict(data: dict) -> Verdict:
    return Verdict(
        pair_id=str(data["pair_id"]),
        choice=data.get("choice"),
        judge_id=data.get("judge_id", ""),
        resolved_winner=data.get("resolved_winner"),
        error=data.get("error"),
    )


def load_pairs(path: str | Path) -> list[ResponsePair]:
    with open(path, encoding="utf-8") as fh:
        return [pair_from_dict(json.loads(line)) for line in fh if line.strip()]


def save_pairs(pairs: Iterable[ResponsePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair_to_dict(pair), ensure_ascii=False) + "\n")


def load_verdicts(path: str | Path) -> list[Verdict]:
    with open(path, encoding="utf-8") as fh:
        return [verdict_from_dict(json.loads(line)) for line in fh if line.strip()]


def save_verdicts(verdicts: Iterable[Verdict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for verdict in verdicts:
            fh.write(json.dumps(verdict_to_dict(verdict), ensure_ascii=False) + "\n")
