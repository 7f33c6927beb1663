"""Shared fixtures: a deterministic 20-conversation corpus with scripted
generations, plus a replay cache so everything runs offline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import pytest
from hypothesis import settings

from natfeed.corpus import Conversation, FilterPolicy, Message, to_canonical_dict
from natfeed.llm_client import EndpointConfig, GenerationParams, prompt_hash
from natfeed.prompting import PromptTemplate, builtin_template, render_prompt

settings.register_profile("suite", deadline=None)
settings.load_profile("suite")

FIXTURE_MODEL = "fixture-extractor"


def conv_from_texts(conv_id: str, texts: list[str], language: str = "english", **kwargs) -> Conversation:
    """Build an alternating conversation from plain message texts, user first."""
    messages = tuple(
        Message("user" if i % 2 == 0 else "assistant", text) for i, text in enumerate(texts)
    )
    return Conversation(id=conv_id, messages=messages, language=language, **kwargs)


def feedback_object(pattern: str, span: str, confidence: int | None = None) -> str:
    obj = {"User Response Pattern": pattern, "User Response Text": span}
    if confidence is not None:
        obj["Confidence Level (1-5)"] = confidence
    return json.dumps(obj, ensure_ascii=False)


@dataclass
class Scenario:
    """One fixture conversation with its scripted generation and expectations."""

    conv: Conversation
    generation: Callable[[str], str] | None = None
    # (user_message_index, category value, span text) hand-derived per scenario
    expected: list[tuple[int, str, str]] = field(default_factory=list)
    rejections: dict = field(default_factory=dict)
    filtered: str | None = None


def build_scenarios() -> list[Scenario]:
    scenarios: list[Scenario] = []

    # 1: one positive span, generation echoes the prompt once
    conv = conv_from_texts(
        "conv-01",
        [
            "What year did the first moon landing happen?",
            "The first crewed moon landing was in 1969.",
            "Thanks, that is exactly what I needed!",
            "Happy to help.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: p
            + "\n"
            + feedback_object("Positive Feedback", "Thanks, that is exactly what I needed!"),
            expected=[(2, "positive", "Thanks, that is exactly what I needed!")],
        )
    )

    # 2: correction plus a rephrase, no prompt echo
    conv = conv_from_texts(
        "conv-02",
        [
            "Convert 10 miles to kilometers.",
            "10 miles is about 12 kilometers.",
            "That is wrong, it is 16.09 kilometers. Convert 10 miles to km properly.",
            "You are right: 10 miles is 16.09 kilometers.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: (
                feedback_object("Make Aware with Correction", "That is wrong, it is 16.09 kilometers.")
                + "\n"
                + feedback_object("Repeat or Rephrase", "Convert 10 miles to km properly.")
            ),
            expected=[
                (2, "aware_correct", "That is wrong, it is 16.09 kilometers."),
                (2, "rephrase", "Convert 10 miles to km properly."),
            ],
        )
    )

    # 3: one valid object plus an invented category
    conv = conv_from_texts(
        "conv-03",
        [
            "Write a haiku about rain.",
            "Rain taps on the roof / soft rivers in the gutter / clouds exhale slowly.",
            "Lovely, thank you so much!",
            "Glad you liked it.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: (
                feedback_object("Positive Feedback", "Lovely, thank you so much!")
                + "\n"
                + feedback_object("Asking for Assistance", "Lovely, thank you so much!")
            ),
            expected=[(2, "positive", "Lovely, thank you so much!")],
            rejections={"invalid_category": 1},
        )
    )

    # 4: three objects, one missing the span field
    conv = conv_from_texts(
        "conv-04",
        [
            "Name the largest planet.",
            "Jupiter is the largest planet.",
            "And the smallest one? You forgot to mention it.",
            "The smallest planet is Mercury.",
            "Great, thanks a lot!",
            "You're welcome.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: (
                feedback_object("Make Aware without Correction", "You forgot to mention it.")
                + "\n"
                + '{"User Response Pattern": "Positive Feedback"}'
                + "\n"
                + feedback_object("Positive Feedback", "Great, thanks a lot!")
            ),
            expected=[
                (2, "aware_no_correct", "You forgot to mention it."),
                (4, "positive", "Great, thanks a lot!"),
            ],
            rejections={"missing_field": 1},
        )
    )

    # 5: hallucinated span not present anywhere
    conv = conv_from_texts(
        "conv-05",
        [
            "Suggest a name for a grey kitten.",
            "How about Misty?",
            "Hmm, maybe something more playful?",
            "Then try Pixel.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object("Ask for Clarification", "What do you mean by playful?"),
            expected=[],
            rejections={"span_not_found": 1},
        )
    )

    # 6: the quoted span sits only in the opening user message
    conv = conv_from_texts(
        "conv-06",
        [
            "Please explain what a closure is in programming.",
            "A closure is a function bundled with its lexical environment.",
            "Can you give an example in Python?",
            "Sure: a counter function returning an inner function.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object(
                "Repeat or Rephrase", "Please explain what a closure is in programming."
            ),
            expected=[],
            rejections={"first_user_message": 1},
        )
    )

    # 7: identical object twice in one generation
    conv = conv_from_texts(
        "conv-07",
        [
            "Is tomato a fruit?",
            "Botanically yes, tomatoes are fruit.",
            "Perfect answer, thanks!",
            "Any time.",
        ],
    )
    obj7 = feedback_object("Positive Feedback", "Perfect answer, thanks!")
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: obj7 + "\n" + obj7,
            expected=[(2, "positive", "Perfect answer, thanks!")],
            rejections={"duplicate": 1},
        )
    )

    # 8: prose only, nothing to extract
    conv = conv_from_texts(
        "conv-08",
        [
            "Recommend a sci-fi book.",
            "You might enjoy reading about generation ships.",
            "Which author do you mean exactly?",
            "Several authors wrote about them.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: "The user seems mildly dissatisfied but no JSON here.",
            expected=[],
        )
    )

    # 9: object wrapped in a code fence with prose around it
    conv = conv_from_texts(
        "conv-09",
        [
            "Summarize the plot of Hamlet in one line.",
            "A prince avenges his father's murder at great cost.",
            "Too short, I asked for more detail. Summarize the plot of Hamlet with the main twists.",
            "The prince feigns madness, stages a play, and dies avenged.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: (
                "Here is what I found:\n```json\n"
                + feedback_object("Make Aware without Correction", "Too short, I asked for more detail.")
                + "\n```\nDone."
            ),
            expected=[(2, "aware_no_correct", "Too short, I asked for more detail.")],
        )
    )

    # 10: braces inside the quoted span text
    conv = conv_from_texts(
        "conv-10",
        [
            "Show me an empty JSON object.",
            "Here: []",
            "No, {} is an empty object, [] is an array.",
            "Correct, {} is the empty object.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object(
                "Make Aware with Correction", "No, {} is an empty object, [] is an array."
            ),
            expected=[(2, "aware_correct", "No, {} is an empty object, [] is an array.")],
        )
    )

    # 11: valid object nested inside a syntactically broken outer one
    conv = conv_from_texts(
        "conv-11",
        [
            "What's the boiling point of water at sea level?",
            "Water boils at 100 degrees Celsius at sea level.",
            "Thanks, crystal clear!",
            "Glad it helped.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: (
                "{broken wrapper "
                + feedback_object("Positive Feedback", "Thanks, crystal clear!")
                + " trailing}"
            ),
            expected=[(2, "positive", "Thanks, crystal clear!")],
        )
    )

    # 12: the model echoes the prompt twice before answering
    conv = conv_from_texts(
        "conv-12",
        [
            "Translate 'good morning' to French.",
            "'Good morning' is 'bonjour' in French.",
            "You already said that before, it is not a full translation of the greeting.",
            "More precisely: 'bon matin' is rare; 'bonjour' is standard.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: p
            + "\n"
            + p
            + "\n"
            + feedback_object(
                "Make Aware without Correction",
                "You already said that before, it is not a full translation of the greeting.",
            ),
            expected=[
                (
                    2,
                    "aware_no_correct",
                    "You already said that before, it is not a full translation of the greeting.",
                )
            ],
        )
    )

    # 13: span exists only inside an assistant message
    conv = conv_from_texts(
        "conv-13",
        [
            "Give me a fun fact about octopuses.",
            "Octopuses have three hearts and blue blood.",
            "Now one about squids please.",
            "Squids can edit their own RNA.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object("Positive Feedback", "three hearts and blue blood"),
            expected=[],
            rejections={"span_not_found": 1},
        )
    )

    # 14: span occurs in two eligible user messages; earliest wins
    conv = conv_from_texts(
        "conv-14",
        [
            "Help me draft a short apology email.",
            "Draft: I apologize for the delay and any trouble caused.",
            "Make it warmer, thank you!",
            "Warmer draft: I'm truly sorry for the delay.",
            "That's better, thank you!",
            "Happy to refine further.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object("Positive Feedback", "thank you!"),
            expected=[(2, "positive", "thank you!")],
        )
    )

    # 15: confidence present but the main template does not expect it
    conv = conv_from_texts(
        "conv-15",
        [
            "What's the capital of Australia?",
            "The capital of Australia is Canberra.",
            "Right, thanks for the quick answer!",
            "You're welcome!",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object(
                "Positive Feedback", "Right, thanks for the quick answer!", confidence=5
            ),
            expected=[(2, "positive", "Right, thanks for the quick answer!")],
        )
    )

    # 16: unicode content, offsets beyond ASCII
    conv = conv_from_texts(
        "conv-16",
        [
            "Write a toast for a friend's birthday.",
            "To many adventures ahead!",
            "Perfect 🎉 merci beaucoup, c'est très chaleureux!",
            "Avec plaisir!",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object(
                "Positive Feedback", "merci beaucoup, c'est très chaleureux!"
            ),
            expected=[(2, "positive", "merci beaucoup, c'est très chaleureux!")],
        )
    )

    # 17: empty span string counts as a missing field
    conv = conv_from_texts(
        "conv-17",
        [
            "List three primary colors.",
            "Red, blue, and yellow.",
            "Yellow is debatable, many models use green.",
            "In additive color, green indeed replaces yellow.",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: (
                '{"User Response Pattern": "Make Aware without Correction", "User Response Text": ""}'
                + "\n"
                + feedback_object(
                    "Make Aware without Correction", "Yellow is debatable, many models use green."
                )
            ),
            expected=[(2, "aware_no_correct", "Yellow is debatable, many models use green.")],
            rejections={"missing_field": 1},
        )
    )

    # 18: longer conversation, feedback on the fourth user message
    conv = conv_from_texts(
        "conv-18",
        [
            "Plan a three-day trip to Rome.",
            "Day 1: Colosseum and Forum. Day 2: Vatican. Day 3: Trastevere.",
            "Add restaurant ideas for each day.",
            "Day 1: trattoria near the Forum. Day 2: pizzeria by the Vatican. Day 3: osteria in Trastevere.",
            "Swap day two and day three.",
            "Swapped: Day 2 is Trastevere, Day 3 is the Vatican.",
            "Great itinerary, exactly what I wanted!",
            "Enjoy Rome!",
        ],
    )
    scenarios.append(
        Scenario(
            conv=conv,
            generation=lambda p: feedback_object(
                "Positive Feedback", "Great itinerary, exactly what I wanted!"
            ),
            expected=[(6, "positive", "Great itinerary, exactly what I wanted!")],
        )
    )

    # 19: single-turn conversation is filtered before extraction
    conv = conv_from_texts(
        "conv-19",
        [
            "Define entropy in one sentence.",
            "Entropy measures the number of microscopic configurations of a system.",
        ],
    )
    scenarios.append(Scenario(conv=conv, filtered="too_few_turns"))

    # 20: non-English conversation is filtered by the language policy
    conv = conv_from_texts(
        "conv-20",
        [
            "Qual é a montanha mais alta do mundo?",
            "O Monte Everest é a montanha mais alta.",
            "Obrigado, resposta perfeita!",
            "De nada!",
        ],
        language="portuguese",
    )
    scenarios.append(Scenario(conv=conv, filtered="language"))

    return scenarios


@pytest.fixture(scope="session")
def scenarios() -> list[Scenario]:
    return build_scenarios()


@pytest.fixture(scope="session")
def extraction_template() -> PromptTemplate:
    return builtin_template("extract_main")


@pytest.fixture(scope="session")
def gen_params() -> GenerationParams:
    return GenerationParams()


@pytest.fixture(scope="session")
def fixture_policy() -> FilterPolicy:
    return FilterPolicy(min_turns=2, allowed_languages=frozenset({"english"}))


@pytest.fixture(scope="session")
def fixture_endpoint() -> EndpointConfig:
    return EndpointConfig(
        base_url="http://replay.invalid",
        model_name=FIXTURE_MODEL,
        timeout=5.0,
        max_retries=1,
        max_concurrency=4,
        backoff_base=0.01,
    )


def write_corpus(scenarios: list[Scenario], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scenario in scenarios:
            fh.write(json.dumps(to_canonical_dict(scenario.conv), ensure_ascii=False) + "\n")


def write_cache(
    scenarios: list[Scenario],
    path: Path,
    template: PromptTemplate,
    params: GenerationParams,
    model: str = FIXTURE_MODEL,
) -> None:
    """Replay cache with one scripted completion per unfiltered conversation."""
    with open(path, "w", encoding="utf-8") as fh:
        for scenario in scenarios:
            if scenario.generation is None:
                continue
            prompt = render_prompt(template, scenario.conv)
            entry = {
                "prompt_hash": prompt_hash(prompt, params, model),
                "model": model,
                "params": params.to_dict(),
                "text": scenario.generation(prompt),
            }
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory, scenarios) -> Path:
    path = tmp_path_factory.mktemp("fixture") / "corpus.jsonl"
    write_corpus(scenarios, path)
    return path


@pytest.fixture(scope="session")
def cache_file(tmp_path_factory, scenarios, extraction_template, gen_params) -> Path:
    path = tmp_path_factory.mktemp("fixture_cache") / "cache.jsonl"
    write_cache(scenarios, path, extraction_template, gen_params)
    return path


def expected_record_rows(scenarios: list[Scenario], run_id: str) -> list[dict]:
    """Hand-derived expected record file contents, in corpus order."""
    rows = []
    for scenario in scenarios:
        if scenario.filtered:
            continue
        for index, category, span in scenario.expected:
            content = scenario.conv.messages[index].content
            start = content.find(span)
            assert start != -1, f"bad expectation for {scenario.conv.id}"
            rows.append(
                {
                    "conversation_id": scenario.conv.id,
                    "user_message_index": index,
                    "category": category,
                    "span_text": span,
                    "char_start": start,
                    "char_end": start + len(span),
                    "confidence": None,
                    "run_id": run_id,
                }
            )
    return rows
