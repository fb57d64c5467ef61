"""Rubric-based judging and best-response selection.

Each committee model also acts as a judge: it receives the scoring rubric
with one instruction/response pair and must end its reply with a
"Score: <rating>" line. Per-candidate scores from all judges are averaged,
and the candidate with the highest mean wins; ties break on the smallest
(model_index, sample_index). A reply whose score cannot be parsed is
retried once with an explicit reminder appended, then counted as
unparsable.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .backends import Backend, JUDGE_SAMPLING, SamplingParams, with_seed
from .instructions import Instruction
from .responses import Candidate, group_by_instruction
from .seeding import derive_seed

log = logging.getLogger(__name__)

RUBRIC_ASSET = "assets/response_quality_rubric_v1.txt"

# Stable phrase from the rubric; the mock backend keys its judge role on it.
RUBRIC_SENTINEL = "Provide a brief justification for your score"

INSTRUCTION_OPEN = "<generated instruction>"
INSTRUCTION_CLOSE = "</generated instruction>"
OUTPUT_OPEN = "<output>"
OUTPUT_CLOSE = "</output>"

RETRY_NUDGE = 'Remember to end your reply with "Score: <rating>" on its own final line.'

PARSE_OK = "ok"
PARSE_RETRY_OK = "retry-ok"
PARSE_UNPARSABLE = "unparsable"

DROP_ALL_FAILED = "all-candidates-failed"
DROP_NO_VALID_VOTES = "no-valid-votes"

SCORE_MIN = 1.0
SCORE_MAX = 5.0

# A score line: optional decoration, the word "score", a separator, a number.
_SCORE_LINE = re.compile(
    r"^\W*(?:final\s+|overall\s+)?score\b\W*?[:=\-]?\s*(-?\d+(?:\.\d+)?)",
    re.IGNORECASE,
)


@lru_cache(maxsize=1)
def rubric_text() -> str:
    path = resources.files("sftrecon").joinpath(RUBRIC_ASSET)
    text = path.read_text(encoding="utf-8").rstrip("\n")
    assert RUBRIC_SENTINEL in text
    return text


def build_rubric_prompt(instruction_text: str, response_text: str) -> str:
    return (
        f"{rubric_text()}\n\n"
        f"{INSTRUCTION_OPEN}\n{instruction_text}\n{INSTRUCTION_CLOSE}\n\n"
        f"{OUTPUT_OPEN}\n{response_text}\n{OUTPUT_CLOSE}"
    )


@dataclass(frozen=True)
class ParsedScore:
    value: float
    clamped: bool = False


def parse_score(text: str) -> ParsedScore | None:
    """Extract the rating from a judge reply, scanning lines last to first.

    The last line that opens with a score declaration wins, so earlier
    mentions inside the justification are ignored. Out-of-range values are
    clamped into [1, 5] and flagged. Returns None when no line parses.
    """
    for line in reversed(text.splitlines()):
        match = _SCORE_LINE.match(line)
        if match is None:
            continue
        value = float(match.group(1))
        if value < SCORE_MIN:
            return ParsedScore(SCORE_MIN, clamped=True)
        if value > SCORE_MAX:
            return ParsedScore(SCORE_MAX, clamped=True)
        return ParsedScore(value)
    return None


@dataclass(frozen=True)
class JudgeVote:
    instruction_id: str
    model_index: int  # candidate coordinates
    sample_index: int
    judge_index: int
    judge_model_id: str
    score: float | None
    parse_status: str
    clamped: bool = False

    @property
    def candidate_key(self) -> tuple[int, int]:
        return (self.model_index, self.sample_index)

    def to_dict(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "model_index": self.model_index,
            "sample_index": self.sample_index,
            "judge_index": self.judge_index,
            "judge_model_id": self.judge_model_id,
            "score": self.score,
            "parse_status": self.parse_status,
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JudgeVote":
        return cls(
            instruction_id=data["instruction_id"],
            model_index=data["model_index"],
            sample_index=data["sample_index"],
            judge_index=data["judge_index"],
            judge_model_id=data["judge_model_id"],
            score=data["score"],
            parse_status=data["parse_status"],
            clamped=data.get("clamped", False),
        )


def judge_corpus(
    judges: list[Backend],
    instructions: list[Instruction],
    candidates: list[Candidate],
    seed: int,
    params: SamplingParams = JUDGE_SAMPLING,
) -> list[JudgeVote]:
    """Every judge scores every generated candidate.

    Failed candidates receive no votes. Votes come back grouped the way the
    candidates were given, with judges in committee order within each
    candidate. One reminder retry is attempted for unparsable replies.
    """
    text_by_id = {instruction.id: instruction.text for instruction in instructions}
    scorable = [c for c in candidates if c.ok]
    prompts = [build_rubric_prompt(text_by_id[c.instruction_id], c.text) for c in scorable]

    def run_judge(judge_index: int) -> list[JudgeVote]:
        backend = judges[judge_index]
        per_request = [
            with_seed(
                params,
                derive_seed(
                    seed,
                    "judge",
                    c.instruction_id,
                    str(c.model_index),
                    str(c.sample_index),
                    str(judge_index),
                ),
            )
            for c in scorable
        ]
        results = backend.generate_many(prompts, per_request)

        retry_rows = [
            row
            for row, result in enumerate(results)
            if result.ok and parse_score(result.text) is None
        ]
        retried = {}
        if retry_rows:
            retry_prompts = [f"{prompts[row]}\n\n{RETRY_NUDGE}" for row in retry_rows]
            retry_params = [per_request[row] for row in retry_rows]
            for row, result in zip(retry_rows, backend.generate_many(retry_prompts, retry_params)):
                retried[row] = result

        votes = []
        for row, candidate in enumerate(scorable):
            result = results[row]
            score = None
            status = PARSE_UNPARSABLE
            clamped = False
            if result.ok:
                parsed = parse_score(result.text)
                if parsed is not None:
                    score, status, clamped = parsed.value, PARSE_OK, parsed.clamped
                elif row in retried and retried[row].ok:
                    parsed = parse_score(retried[row].text)
                    if parsed is not None:
                        score, status, clamped = parsed.value, PARSE_RETRY_OK, parsed.clamped
            votes.append(
                JudgeVote(
                    instruction_id=candidate.instruction_id,
                    model_index=candidate.model_index,
                    sample_index=candidate.sample_index,
                    judge_index=judge_index,
                    judge_model_id=backend.spec.model_id,
                    score=score,
                    parse_status=status,
                    clamped=clamped,
                )
            )
        return votes

    with ThreadPoolExecutor(max_workers=max(len(judges), 1)) as pool:
        per_judge = list(pool.map(run_judge, range(len(judges))))

    votes: list[JudgeVote] = []
    for row in range(len(scorable)):
        for judge_index in range(len(judges)):
            votes.append(per_judge[judge_index][row])
    unparsable = sum(1 for vote in votes if vote.parse_status == PARSE_UNPARSABLE)
    if unparsable:
        log.warning("%d of %d judge votes were unparsable", unparsable, len(votes))
    return votes


@dataclass(frozen=True)
class AggregateScore:
    instruction_id: str
    model_index: int
    sample_index: int
    mean_score: float | None
    valid_votes: int
    total_votes: int

    @property
    def candidate_key(self) -> tuple[int, int]:
        return (self.model_index, self.sample_index)


def mean_score(scores: list[float]) -> float | None:
    """Plain arithmetic mean; None when no valid scores exist."""
    if not scores:
        return None
    return sum(scores) / len(scores)


def aggregate_votes(votes: list[JudgeVote]) -> dict[tuple[str, tuple[int, int]], AggregateScore]:
    """Mean score per candidate across judges."""
    grouped: dict[tuple[str, tuple[int, int]], list[JudgeVote]] = {}
    for vote in votes:
        grouped.setdefault((vote.instruction_id, vote.candidate_key), []).append(vote)
    aggregates = {}
    for (instruction_id, key), group in grouped.items():
        valid = [vote.score for vote in group if vote.score is not None]
        aggregates[(instruction_id, key)] = AggregateScore(
            instruction_id=instruction_id,
            model_index=key[0],
            sample_index=key[1],
            mean_score=mean_score(valid),
            valid_votes=len(valid),
            total_votes=len(group),
        )
    return aggregates


def argmax_key(scores: dict[tuple[int, int], float]) -> tuple[int, int]:
    """Key of the highest score; ties go to the smallest key tuple."""
    if not scores:
        raise ValueError("argmax over empty scores")
    return min(scores.items(), key=lambda item: (-item[1], item[0]))[0]


@dataclass(frozen=True)
class CuratedPair:
    instruction_id: str
    instruction: str
    response: str
    model_index: int
    sample_index: int
    model_id: str
    mean_score: float | None  # None when judging was bypassed
    tie: bool = False

    def to_dict(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "instruction": self.instruction,
            "response": self.response,
            "model_index": self.model_index,
            "sample_index": self.sample_index,
            "model_id": self.model_id,
            "mean_score": self.mean_score,
            "tie": self.tie,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CuratedPair":
        return cls(
            instruction_id=data["instruction_id"],
            instruction=data["instruction"],
            response=data["response"],
            model_index=data["model_index"],
            sample_index=data["sample_index"],
            model_id=data["model_id"],
            mean_score=data["mean_score"],
            tie=data.get("tie", False),
        )


@dataclass
class SelectionResult:
    pairs: list[CuratedPair]
    dropped: list[tuple[str, str]]  # (instruction_id, reason)
    tie_count: int


def select_pairs(
    instructions: list[Instruction],
    candidates: list[Candidate],
    votes: list[JudgeVote] | None = None,
    judging_enabled: bool = True,
) -> SelectionResult:
    """Pick one response per instruction.

    With judging enabled the winner is the argmax of mean judge scores;
    candidates with no valid votes are ineligible, and an instruction whose
    candidates are all ineligible is dropped. With judging bypassed the
    first successful candidate in (model_index, sample_index) order wins
    and mean_score stays None.
    """
    groups = group_by_instruction(candidates)
    aggregates = aggregate_votes(votes or [])
    pairs: list[CuratedPair] = []
    dropped: list[tuple[str, str]] = []
    tie_count = 0

    for instruction in instructions:
        group = [c for c in groups.get(instruction.id, []) if c.ok]
        if not group:
            dropped.append((instruction.id, DROP_ALL_FAILED))
            continue

        if not judging_enabled:
            winner = group[0]
            winner_mean = None
            tie = False
        else:
            means = {}
            for candidate in group:
                aggregate = aggregates.get((instruction.id, candidate.key))
                if aggregate is not None and aggregate.mean_score is not None:
                    means[candidate.key] = aggregate.mean_score
            if not means:
                dropped.append((instruction.id, DROP_NO_VALID_VOTES))
                continue
            best_key = argmax_key(means)
            winner = next(c for c in group if c.key == best_key)
            winner_mean = means[best_key]
            tie = sum(1 for value in means.values() if value == winner_mean) > 1
            if tie:
                tie_count += 1

        pairs.append(
            CuratedPair(
                instruction_id=instruction.id,
                instruction=instruction.text,
                response=winner.text,
                model_index=winner.model_index,
                sample_index=winner.sample_index,
                model_id=winner.model_id,
                mean_score=winner_mean,
                tie=tie,
            )
        )
    if dropped:
        log.warning("%d instructions dropped during selection", len(dropped))
    return SelectionResult(pairs=pairs, dropped=dropped, tie_count=tie_count)
