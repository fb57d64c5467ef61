"""Instruction elicitation, validation, and deduplication.

Instructions are recovered by handing a base-model endpoint only the text
that precedes a user turn in its chat template and treating the raw
continuation as a sampled instruction. Continuations are cleaned through
the template extractor, screened by cheap validity rules, and deduplicated
both exactly and by near-duplicate similarity before they enter the corpus.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

from .backends import Backend, ELICIT_SAMPLING, SamplingParams, with_seed
from .chat_templates import ChatTemplate, EmptyExtractionError, extract_instruction
from .errors import ConfigError, SftReconError
from .seeding import derive_seed

log = logging.getLogger(__name__)

MIN_LENGTH = 8
MAX_LENGTH = 4096
NEAR_DUP_THRESHOLD = 0.9  # strictly-greater Jaccard marks a near duplicate
GRAM_SIZE = 3

REJECT_TOO_SHORT = "too-short"
REJECT_TOO_LONG = "too-long"
REJECT_NO_LETTERS = "no-letters"
REJECT_SPECIAL_TOKEN = "special-token"
REJECT_ASSISTANT_PREAMBLE = "assistant-preamble"

DROP_EXACT = "exact-duplicate"
DROP_NEAR = "near-duplicate"

# Continuations that open like an assistant reply are template bleed-through,
# not user instructions.
_PREAMBLE_OPENINGS = (
    "sure, here",
    "sure! here",
    "sure thing",
    "certainly",
    "of course, here",
    "here is the answer",
    "here's the answer",
    "as an ai",
    "i'm sorry",
    "i am sorry",
)


class ShortfallError(SftReconError):
    """Elicitation could not reach the requested corpus size."""

    def __init__(self, target: int, obtained: int, draws: int):
        self.target = target
        self.obtained = obtained
        self.draws = draws
        super().__init__(
            f"elicited {obtained} valid unique instructions from {draws} draws, "
            f"needed {target}; raise the oversample factor or the draw budget"
        )


def normalize_for_hash(text: str) -> str:
    """Casefold and strip ALL whitespace, so spacing variants collide."""
    return "".join(text.casefold().split())


def content_hash(text: str) -> str:
    return hashlib.sha256(normalize_for_hash(text).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Instruction:
    id: str
    text: str
    content_hash: str
    source_model: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "content_hash": self.content_hash,
            "source_model": self.source_model,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Instruction":
        return cls(
            id=data["id"],
            text=data["text"],
            content_hash=data["content_hash"],
            source_model=data["source_model"],
        )


def make_instruction(index: int, text: str, source_model: str) -> Instruction:
    digest = content_hash(text)
    return Instruction(
        id=f"i{index:06d}-{digest[:12]}",
        text=text,
        content_hash=digest,
        source_model=source_model,
    )


def rejection_reason(text: str, template: ChatTemplate | None = None) -> str | None:
    """Why this text cannot be an instruction, or None if it is acceptable."""
    stripped = text.strip()
    if len(stripped) < MIN_LENGTH:
        return REJECT_TOO_SHORT
    if len(stripped) > MAX_LENGTH:
        return REJECT_TOO_LONG
    if not any(ch.isalpha() for ch in stripped):
        return REJECT_NO_LETTERS
    if template is not None:
        leftovers = set(template.special_tokens) | set(template.turn_end_markers)
        if any(token in stripped for token in leftovers):
            return REJECT_SPECIAL_TOKEN
    lowered = stripped.casefold()
    if any(lowered.startswith(opening) for opening in _PREAMBLE_OPENINGS):
        return REJECT_ASSISTANT_PREAMBLE
    return None


def char_ngrams(text: str, size: int = GRAM_SIZE) -> frozenset:
    """Character n-grams of the normalized text; short texts yield themselves."""
    norm = normalize_for_hash(text)
    if not norm:
        return frozenset()
    if len(norm) < size:
        return frozenset({norm})
    return frozenset(norm[i : i + size] for i in range(len(norm) - size + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


class NearDuplicateIndex:
    """Incremental near-duplicate lookup via prefix filtering.

    Gram sets are kept in one global lexicographic order. Two sets whose
    Jaccard exceeds the threshold t must overlap by at least ceil(t*|A|)
    grams, so they must share a gram within the first |A| - ceil(t*|A|) + 1
    grams of either set. Probing posting lists for the prefix grams of the
    query therefore yields a superset of the true matches, which are then
    confirmed with an exact Jaccard computation. Results are identical to
    comparing the query against every indexed document.
    """

    def __init__(self, threshold: float = NEAR_DUP_THRESHOLD):
        self.threshold = threshold
        self._grams: list[frozenset] = []
        self._keys: list = []
        self._postings: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self._keys)

    def _prefix(self, grams: frozenset) -> list[str]:
        ordered = sorted(grams)
        keep = len(ordered) - math.ceil(self.threshold * len(ordered)) + 1
        return ordered[:keep]

    def find(self, text: str):
        """Key of some indexed near duplicate of `text`, or None."""
        grams = char_ngrams(text)
        if not grams:
            return None
        seen: set[int] = set()
        for gram in self._prefix(grams):
            for position in self._postings.get(gram, ()):
                if position in seen:
                    continue
                seen.add(position)
                candidate = self._grams[position]
                # Size filter: wildly different sizes cannot clear the bar.
                small, large = sorted((len(grams), len(candidate)))
                if small / large <= self.threshold:
                    continue
                if jaccard(grams, candidate) > self.threshold:
                    return self._keys[position]
        return None

    def add(self, text: str, key) -> None:
        grams = char_ngrams(text)
        position = len(self._keys)
        self._grams.append(grams)
        self._keys.append(key)
        for gram in self._prefix(grams):
            self._postings.setdefault(gram, []).append(position)


def dedup_verbose(texts: list[str]) -> tuple[list[int], list[tuple[int, str, int]]]:
    """First-wins dedup. Returns (kept indices, drops).

    Each drop is (dropped index, reason, index of the kept text it matched).
    Dropped texts do not shadow later ones; only kept texts are compared
    against.
    """
    kept: list[int] = []
    drops: list[tuple[int, str, int]] = []
    by_hash: dict[str, int] = {}
    near = NearDuplicateIndex()
    for index, text in enumerate(texts):
        digest = content_hash(text)
        if digest in by_hash:
            drops.append((index, DROP_EXACT, by_hash[digest]))
            continue
        match = near.find(text)
        if match is not None:
            drops.append((index, DROP_NEAR, match))
            continue
        by_hash[digest] = index
        near.add(text, index)
        kept.append(index)
    return kept, drops


def dedup(texts: list[str]) -> list[str]:
    kept, _ = dedup_verbose(texts)
    return [texts[i] for i in kept]


@dataclass
class ElicitStats:
    target: int = 0
    draws: int = 0
    accepted: int = 0
    errors: int = 0
    empty_extractions: int = 0
    rejected: Counter = field(default_factory=Counter)
    exact_duplicates: int = 0
    near_duplicates: int = 0

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "draws": self.draws,
            "accepted": self.accepted,
            "errors": self.errors,
            "empty_extractions": self.empty_extractions,
            "rejected": dict(self.rejected),
            "exact_duplicates": self.exact_duplicates,
            "near_duplicates": self.near_duplicates,
        }


@dataclass
class ElicitResult:
    instructions: list[Instruction]
    stats: ElicitStats


def elicit(
    backend: Backend,
    template: ChatTemplate,
    target_count: int,
    seed: int,
    oversample: float = 1.5,
    params: SamplingParams = ELICIT_SAMPLING,
) -> ElicitResult:
    """Build a deduplicated instruction corpus of exactly `target_count`.

    ceil(target * oversample) continuations are requested up front, each
    with its own derived seed, and processed in draw order until the target
    is met. Acceptance depends only on a draw's position, never on request
    batching or completion order, so reruns are reproducible.
    """
    if target_count < 0:
        raise ConfigError("target_count must be >= 0")
    if oversample < 1.0:
        raise ConfigError("oversample must be >= 1.0")
    if backend.spec.endpoint_kind == "chat-completions":
        raise ConfigError(
            "pre-query elicitation needs raw continuation access; endpoint "
            f"{backend.spec.model_id!r} is chat-completions, use a "
            "raw-completions or mock endpoint"
        )
    stats = ElicitStats(target=target_count)
    if target_count == 0:
        return ElicitResult([], stats)

    budget = math.ceil(target_count * oversample)
    stats.draws = budget
    prompt = template.pre_query_text
    per_draw = [
        with_seed(params, derive_seed(seed, "elicit", str(i))) for i in range(budget)
    ]
    results = backend.generate_many([prompt] * budget, per_draw)

    accepted: list[Instruction] = []
    by_hash: dict[str, int] = {}
    near = NearDuplicateIndex()
    for result in results:
        if len(accepted) >= target_count:
            break
        if not result.ok:
            stats.errors += 1
            continue
        try:
            text = extract_instruction(template, result.text)
        except EmptyExtractionError:
            stats.empty_extractions += 1
            continue
        reason = rejection_reason(text, template)
        if reason is not None:
            stats.rejected[reason] += 1
            continue
        digest = content_hash(text)
        if digest in by_hash:
            stats.exact_duplicates += 1
            continue
        if near.find(text) is not None:
            stats.near_duplicates += 1
            continue
        by_hash[digest] = len(accepted)
        near.add(text, len(accepted))
        accepted.append(make_instruction(len(accepted), text, backend.spec.model_id))

    stats.accepted = len(accepted)
    if len(accepted) < target_count:
        raise ShortfallError(target_count, len(accepted), budget)
    log.info(
        "elicited %d instructions from %d draws (%d errors, %d dups)",
        stats.accepted,
        stats.draws,
        stats.errors,
        stats.exact_duplicates + stats.near_duplicates,
    )
    return ElicitResult(accepted, stats)
