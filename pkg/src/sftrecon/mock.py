"""Deterministic in-process backend for offline runs and tests.

The mock impersonates every model role the pipeline calls: an instruction
source continuing a pre-query prompt, a responder answering instructions,
a judge scoring instruction/response pairs, and a category classifier. The
role is inferred from the prompt itself, so callers use the mock exactly
like a remote endpoint.

Output is a pure function of (backend seed, prompt, params.seed), never of
call order or wall clock. Scripted deviations (hard failures, initially
unparsable judge replies) are selected by address options, and the
"unparsable first" script keys off the retry nudge in the prompt rather
than call history, so purity is preserved.

Address syntax: ``mock:<seed>?option=value&...``. Options are parsed from
the query string:

- ``fixed=<text>``: always return exactly this text.
- ``fail=always``: every request fails with an error result.
- ``judge=unparsable-first``: judge replies omit the score line unless the
  prompt carries the retry nudge.
"""

from __future__ import annotations

import time
from typing import Sequence
from urllib.parse import parse_qs, unquote

from .backends import (
    Backend,
    BackendError,
    ERR_EXHAUSTED_RETRIES,
    FINISH_LENGTH,
    FINISH_STOP,
    GenerationResult,
    ModelSpec,
    Prompt,
    RetryPolicy,
    SamplingParams,
    _error_result,
)
from .chat_templates import ChatTemplate, builtin_templates
from .judging import (
    INSTRUCTION_CLOSE,
    INSTRUCTION_OPEN,
    OUTPUT_CLOSE,
    OUTPUT_OPEN,
    RETRY_NUDGE,
    RUBRIC_SENTINEL,
)
from .report import CATEGORIES, CLASSIFY_SENTINEL
from .seeding import SplitMix64, derive_seed

ROLE_INSTRUCTION_SOURCE = "instruction-source"
ROLE_RESPONDER = "responder"
ROLE_JUDGE = "judge"
ROLE_CLASSIFIER = "classifier"

# Target instruction mix, in percent. Keys match the report categories.
MOCK_CATEGORY_WEIGHTS = {
    "coding": 30,
    "math": 20,
    "reasoning": 15,
    "information-seeking": 20,
    "creative-writing": 10,
    "other": 5,
}
assert set(MOCK_CATEGORY_WEIGHTS) == set(CATEGORIES)
assert sum(MOCK_CATEGORY_WEIGHTS.values()) == 100

JUNK_PERMILLE = 30  # ~3% of instruction draws are degenerate

# One entry per template: (category, prefix, filler pool). The prefix is
# literal text unique across templates, which is what instruction_category
# keys on.
_TEMPLATES: list[tuple[str, str, list[str]]] = [
    (
        "coding",
        "Write a Python function that ",
        [
            "reverses a singly linked list.",
            "parses a CSV file into a list of dictionaries.",
            "computes the edit distance between two strings.",
            "merges overlapping intervals.",
            "validates an email address with a regular expression.",
            "flattens an arbitrarily nested list.",
            "finds the longest palindromic substring.",
            "implements a least-recently-used cache.",
        ],
    ),
    (
        "coding",
        "Write a program in ",
        [
            "JavaScript that debounces a callback.",
            "Go that counts word frequencies in a file.",
            "Rust that reads JSON from stdin and pretty-prints it.",
            "C that reverses the lines of a text file.",
            "Python that renames files to lowercase in bulk.",
        ],
    ),
    (
        "coding",
        "Explain this error and how to fix it: ",
        [
            "IndexError: list index out of range.",
            "TypeError: unhashable type: 'list'.",
            "segmentation fault (core dumped).",
            "cannot borrow `names` as mutable more than once.",
            "undefined is not a function.",
        ],
    ),
    (
        "math",
        "Solve for x: ",
        [
            "3x + 7 = 31.",
            "x^2 - 5x + 6 = 0.",
            "2^x = 1024.",
            "5x - 4 = 2x + 11.",
            "7(x - 2) = 3x + 10.",
        ],
    ),
    (
        "math",
        "What is the derivative of ",
        [
            "x^3 * ln(x)?",
            "sin(x)/x?",
            "e^(2x) + x^2?",
            "sqrt(1 + x^2)?",
        ],
    ),
    (
        "math",
        "Compute the probability of ",
        [
            "rolling two sixes in a row with a fair die.",
            "drawing two aces from a standard deck without replacement.",
            "getting at least one head in four coin flips.",
            "two people sharing a birthday in a group of 23.",
        ],
    ),
    (
        "reasoning",
        "Solve this riddle: ",
        [
            "what has keys but cannot open locks?",
            "what gets wetter the more it dries?",
            "what has a neck but no head?",
            "the more you take, the more you leave behind. What am I?",
        ],
    ),
    (
        "reasoning",
        "Plan the steps needed to ",
        [
            "move a piano up three flights of stairs.",
            "cross a river with a wolf, a goat, and a cabbage.",
            "measure exactly four liters using a 3-liter and a 5-liter jug.",
            "schedule four meetings for tomorrow with no overlaps.",
        ],
    ),
    (
        "reasoning",
        "If all bloops are razzies and ",
        [
            "some razzies are lazzies, can we conclude some bloops are lazzies?",
            "no razzies are lazzies, can a bloop be a lazzie?",
            "all razzies are lazzies, what follows about bloops?",
        ],
    ),
    (
        "information-seeking",
        "What is the capital of ",
        [
            "Australia?",
            "Canada?",
            "Kenya?",
            "Peru?",
            "Norway?",
            "Thailand?",
        ],
    ),
    (
        "information-seeking",
        "Explain how ",
        [
            "a refrigerator keeps food cold.",
            "photosynthesis converts light into energy.",
            "the immune system fights infections.",
            "HTTPS keeps a connection private.",
            "an internal combustion engine works.",
        ],
    ),
    (
        "information-seeking",
        "What are the main differences between ",
        [
            "alligators and crocodiles?",
            "weather and climate?",
            "RAM and disk storage?",
            "bacteria and viruses?",
        ],
    ),
    (
        "creative-writing",
        "Write a short story about ",
        [
            "a lighthouse keeper who finds a message in a bottle.",
            "a robot learning to paint.",
            "the last tree in a city.",
            "two rival street musicians.",
        ],
    ),
    (
        "creative-writing",
        "Compose a poem about ",
        [
            "the first snowfall.",
            "a busy train station.",
            "an old photograph.",
        ],
    ),
    (
        "other",
        "Translate into French: ",
        [
            "good morning, my friend.",
            "where is the nearest library?",
            "the weather is lovely today.",
        ],
    ),
    (
        "other",
        "Give me practical tips for ",
        [
            "staying focused while studying.",
            "packing light for a two-week trip.",
            "keeping houseplants alive.",
        ],
    ),
]

# Optional instruction suffixes; they widen the draw space so large runs do
# not collapse into duplicates, without disturbing the category prefix.
_SUFFIXES = [
    " Keep it brief.",
    " Explain your reasoning.",
    " Include one concrete example.",
    " Use simple language.",
    " Assume I am a beginner.",
    " Answer in at most three sentences.",
    " Add a short summary at the end.",
]

_JUNK = [
    "",
    "???",
    "ok",
    "hi",
    "thanks!!",
    "Sure, here is the answer you asked for.",
    "please " * 700,
]

_OPENERS = [
    "Here is the requested result.",
    "To address the request directly:",
    "The short answer follows.",
    "Consider the following approach.",
    "This breaks down into clear steps.",
]

_TOPICS = [
    "definition",
    "main idea",
    "key steps",
    "edge cases",
    "common mistakes",
    "worked example",
    "final check",
    "practical takeaway",
]


def parse_mock_address(address: str) -> tuple[int, dict[str, str]]:
    """Split ``mock:<seed>?opts`` into (seed, options)."""
    if address != "mock" and not address.startswith("mock:"):
        raise BackendError(f"mock address must start with 'mock:', got {address!r}")
    rest = address[5:] if address.startswith("mock:") else ""
    seed_part, _, query = rest.partition("?")
    try:
        seed = int(seed_part) if seed_part else 0
    except ValueError:
        raise BackendError(f"mock address seed {seed_part!r} is not an integer") from None
    options = {key: unquote(values[-1]) for key, values in parse_qs(query).items()}
    return seed, options


def canonical_prompt(prompt: Prompt) -> str:
    """Flatten chat messages into one deterministic string."""
    if isinstance(prompt, str):
        return prompt
    return "\n".join(f"{m.get('role', 'user')}: {m.get('content', '')}" for m in prompt)


def _matching_template(prompt: Prompt) -> ChatTemplate | None:
    if not isinstance(prompt, str):
        return None
    for template in builtin_templates().values():
        if prompt.endswith(template.pre_query_text):
            return template
    return None


def infer_role(prompt: Prompt) -> str:
    text = canonical_prompt(prompt)
    if RUBRIC_SENTINEL in text:
        return ROLE_JUDGE
    if CLASSIFY_SENTINEL in text:
        return ROLE_CLASSIFIER
    if _matching_template(prompt) is not None:
        return ROLE_INSTRUCTION_SOURCE
    return ROLE_RESPONDER


def instruction_category(text: str) -> str | None:
    """Oracle for which category an instruction was drawn from.

    Returns None for junk draws and foreign text. Prefixes are matched
    longest-first so overlapping openings cannot shadow each other.
    """
    stripped = text.strip()
    for _, prefix, _ in sorted(_TEMPLATES, key=lambda t: -len(t[1])):
        if stripped.startswith(prefix):
            for category, candidate, _ in _TEMPLATES:
                if candidate == prefix:
                    return category
    return None


def _draw_category(rng: SplitMix64) -> str:
    point = rng.below(100)
    running = 0
    for category in CATEGORIES:
        running += MOCK_CATEGORY_WEIGHTS[category]
        if point < running:
            return category
    return CATEGORIES[-1]


def _draw_instruction(rng: SplitMix64) -> str:
    if rng.below(1000) < JUNK_PERMILLE:
        return _JUNK[rng.below(len(_JUNK))]
    category = _draw_category(rng)
    pool = [entry for entry in _TEMPLATES if entry[0] == category]
    _, prefix, fillers = pool[rng.below(len(pool))]
    text = prefix + fillers[rng.below(len(fillers))]
    if rng.below(2) == 1:
        text += _SUFFIXES[rng.below(len(_SUFFIXES))]
    return text


def _instruction_continuation(rng: SplitMix64, template: ChatTemplate) -> str:
    """Raw continuation text: the instruction, then turn-end debris."""
    instruction = _draw_instruction(rng)
    marker = template.turn_end_markers[0]
    debris = instruction
    if template.special_tokens and rng.below(10) == 0:
        debris += template.special_tokens[0]
    debris += marker
    debris += template.assistant_open_text
    debris += "Sure, moving on to an unrelated follow-up turn."
    debris += marker
    return debris


def _response_text(rng: SplitMix64) -> str:
    level = 1 + rng.below(5)
    paragraphs = []
    for index in range(level):
        opener = _OPENERS[rng.below(len(_OPENERS))]
        topic = _TOPICS[rng.below(len(_TOPICS))]
        other = _TOPICS[rng.below(len(_TOPICS))]
        tag = rng.below(997)
        paragraphs.append(
            f"{opener} Part {index + 1} covers the {topic} and touches on the "
            f"{other}, keeping the explanation concrete (ref {tag})."
        )
    return "\n\n".join(paragraphs)


def _between(text: str, opener: str, closer: str) -> str | None:
    start = text.find(opener)
    if start < 0:
        return None
    start += len(opener)
    end = text.find(closer, start)
    if end < 0:
        return None
    return text[start:end].strip()


def paragraph_count(text: str) -> int:
    return len([part for part in text.split("\n\n") if part.strip()])


def judge_score_for(seed: int, response: str) -> int:
    """Score the mock judge with this seed assigns to a response body."""
    base = min(5, max(1, paragraph_count(response)))
    jitter = derive_seed(seed, "judge-jitter", response) % 3 - 1
    return min(5, max(1, base + jitter))


def _judge_text(seed: int, prompt_text: str, options: dict[str, str]) -> str:
    response = _between(prompt_text, OUTPUT_OPEN, OUTPUT_CLOSE) or ""
    score = judge_score_for(seed, response)
    count = paragraph_count(response)
    body = (
        f"The answer develops {count} distinct point(s) and stays on the "
        "topic of the instruction. Structure and relevance were weighed "
        "against the scale above."
    )
    if options.get("judge") == "unparsable-first" and RETRY_NUDGE not in prompt_text:
        return f"{body}\nOverall the quality lands at {score} out of 5."
    return f"{body}\nScore: {score}"


def _classifier_text(prompt_text: str) -> str:
    instruction = _between(prompt_text, INSTRUCTION_OPEN, INSTRUCTION_CLOSE) or ""
    return instruction_category(instruction) or "other"


def mock_generate(
    seed: int,
    prompt: Prompt,
    params: SamplingParams,
    options: dict[str, str] | None = None,
) -> str:
    """Pure text generation: same inputs always yield the same output."""
    options = options or {}
    if "fixed" in options:
        return options["fixed"]
    text = canonical_prompt(prompt)
    role = infer_role(prompt)
    rng = SplitMix64(derive_seed(seed, role, text, str(params.seed)))
    if role == ROLE_JUDGE:
        return _judge_text(seed, text, options)
    if role == ROLE_CLASSIFIER:
        return _classifier_text(text)
    if role == ROLE_INSTRUCTION_SOURCE:
        template = _matching_template(prompt)
        assert template is not None
        return _instruction_continuation(rng, template)
    return _response_text(rng)


class MockBackend(Backend):
    """Backend wrapper around mock_generate with scripted failure support."""

    def __init__(self, spec: ModelSpec, retry: RetryPolicy | None = None):
        super().__init__(spec, retry)
        self.seed, self.options = parse_mock_address(spec.endpoint_address)

    def _generate(self, prompt: Prompt, params: SamplingParams) -> GenerationResult:
        started = time.monotonic()
        if self.options.get("fail") == "always":
            return _error_result(
                ERR_EXHAUSTED_RETRIES,
                "scripted failure: this mock endpoint always fails",
                self.retry.max_attempts,
                int((time.monotonic() - started) * 1000),
            )
        text = mock_generate(self.seed, prompt, params, self.options)
        finish = FINISH_STOP
        for stop in params.stop_sequences:
            cut = text.find(stop)
            if cut >= 0:
                text = text[:cut]
        words = text.split(" ")
        if len(words) > params.max_new_tokens:
            text = " ".join(words[: params.max_new_tokens])
            finish = FINISH_LENGTH
        return GenerationResult(
            text=text,
            finish_reason=finish,
            latency_ms=int((time.monotonic() - started) * 1000),
            attempt_count=1,
        )


def mock_spec(
    model_id: str,
    seed: int,
    template_family: str = "llama-3",
    options: str = "",
    max_concurrent: int = 8,
) -> ModelSpec:
    """Convenience constructor for mock ModelSpecs."""
    address = f"mock:{seed}"
    if options:
        address += f"?{options}"
    return ModelSpec(
        model_id=model_id,
        endpoint_kind="mock",
        endpoint_address=address,
        template_family=template_family,
        max_concurrent=max_concurrent,
    )


def draw_instructions(seed: int, count: int) -> list[str]:
    """Sample raw instruction draws the way the mock would, for tests."""
    texts = []
    for index in range(count):
        rng = SplitMix64(derive_seed(seed, "sample", str(index)))
        texts.append(_draw_instruction(rng))
    return texts


def committee_specs(seeds: Sequence[int] = (11, 22, 33)) -> list[ModelSpec]:
    """A ready-made three-model mock committee."""
    return [mock_spec(f"mock-model-{i}", seed) for i, seed in enumerate(seeds)]
