"""Dataset characterization report.

Summarizes a finished run: category distribution of the curated
instructions, judge score statistics (per judge, self versus cross
grading, tie rate), committee win rates, and record-count conservation
from elicited instructions through curated pairs. Categories come from a
keyword classifier by default; a model-backed classifier can be swapped in
and falls back to the keywords when a reply is unusable.
"""

from __future__ import annotations

import csv
import io
import logging
import re
import statistics
from dataclasses import dataclass

from .backends import Backend, SamplingParams
from .judging import (
    INSTRUCTION_CLOSE,
    INSTRUCTION_OPEN,
    PARSE_RETRY_OK,
    PARSE_UNPARSABLE,
    JudgeVote,
    SelectionResult,
)
from .responses import Candidate

log = logging.getLogger(__name__)

CATEGORIES = (
    "coding",
    "math",
    "reasoning",
    "information-seeking",
    "creative-writing",
    "other",
)

CLASSIFY_SENTINEL = "Classify the following instruction into exactly one category."

CLASSIFY_SAMPLING = SamplingParams(temperature=0.0, top_p=1.0, max_new_tokens=16)

# First matching rule wins; "other" is the fallback. Rules are ordered so
# technical vocabularies take precedence over generic question openers.
_RULES: tuple[tuple[str, re.Pattern], ...] = (
    (
        "coding",
        re.compile(
            r"\b(code|coding|program|programming|python|javascript|typescript|java|"
            r"c\+\+|rust|golang|sql|html|css|regex|regular expression|function|"
            r"script|compile|compiler|debug|bug|api|library|framework|algorithm|"
            r"data structure|linked list|stack trace|segmentation fault|"
            r"typeerror|indexerror|keyerror|exception|unit test|refactor|git)\b",
            re.IGNORECASE,
        ),
    ),
    (
        "math",
        re.compile(
            r"\b(solve for|equation|derivative|integral|probability|theorem|"
            r"algebra|geometry|calculus|trigonometry|polynomial|prime number|"
            r"fraction|percentage|arithmetic|math|average speed|"
            r"standard deviation|matrix|vector space|how many .* (are|do|can))\b",
            re.IGNORECASE,
        ),
    ),
    (
        "reasoning",
        re.compile(
            r"\b(riddle|puzzle|logic|logical|deduce|deduction|syllogism|"
            r"if all|brain teaser|plan the steps|step-by-step plan|"
            r"what comes next|sequence of moves|strategy to win|"
            r"who is lying|truth-?teller)\b",
            re.IGNORECASE,
        ),
    ),
    (
        "creative-writing",
        re.compile(
            r"\b(story|poem|haiku|sonnet|fiction|dialogue|screenplay|lyrics|"
            r"novel|limerick|fairy tale|write a scene|creative|imagine you are|"
            r"from the perspective of)\b",
            re.IGNORECASE,
        ),
    ),
    (
        "information-seeking",
        re.compile(
            r"\b(what is|what are|what was|what were|who is|who was|when did|"
            r"when was|where is|where are|why do|why does|why is|explain|"
            r"describe|summarize|summarise|define|history of|capital of|"
            r"difference(s)? between|how does|how do|how did|tell me about)\b",
            re.IGNORECASE,
        ),
    ),
)


def classify_heuristic(text: str) -> str:
    for category, pattern in _RULES:
        if pattern.search(text):
            return category
    return "other"


def _parse_category_reply(reply: str) -> str | None:
    lowered = reply.strip().casefold()
    first_line = lowered.splitlines()[0].strip(" .:\"'") if lowered else ""
    if first_line in CATEGORIES:
        return first_line
    for category in CATEGORIES:
        if category in lowered:
            return category
    return None


def build_classify_prompt(text: str) -> str:
    return (
        f"{CLASSIFY_SENTINEL}\n"
        f"Categories: {', '.join(CATEGORIES)}.\n"
        f"Reply with the category name only.\n\n"
        f"{INSTRUCTION_OPEN}\n{text}\n{INSTRUCTION_CLOSE}"
    )


def classify_with_model(backend: Backend, texts: list[str]) -> list[str]:
    """Model-backed classification; keyword fallback on any bad reply."""
    prompts = [build_classify_prompt(text) for text in texts]
    results = backend.generate_many(prompts, CLASSIFY_SAMPLING)
    labels = []
    fallbacks = 0
    for text, result in zip(texts, results):
        label = _parse_category_reply(result.text) if result.ok else None
        if label is None:
            label = classify_heuristic(text)
            fallbacks += 1
        labels.append(label)
    if fallbacks:
        log.warning("classifier fell back to keywords for %d of %d texts", fallbacks, len(texts))
    return labels


def classify(texts: list[str], method: str = "heuristic", backend: Backend | None = None) -> list[str]:
    if method == "heuristic":
        return [classify_heuristic(text) for text in texts]
    if method == "model":
        if backend is None:
            raise ValueError("model classification needs a backend")
        return classify_with_model(backend, texts)
    raise ValueError(f"unknown classify method {method!r}")


@dataclass
class CategoryHistogram:
    counts: dict
    total: int

    @classmethod
    def from_labels(cls, labels: list[str]) -> "CategoryHistogram":
        counts = {category: 0 for category in CATEGORIES}
        for label in labels:
            counts[label if label in counts else "other"] += 1
        return cls(counts=counts, total=len(labels))

    def percent(self, category: str) -> float:
        return 100.0 * self.counts[category] / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "counts": dict(self.counts),
            "percent": {category: self.percent(category) for category in CATEGORIES},
        }

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["category", "count", "percent"])
        for category in CATEGORIES:
            writer.writerow([category, self.counts[category], f"{self.percent(category):.2f}"])
        return buffer.getvalue()


def _percentile(sorted_values: list[float], p: int) -> float:
    if len(sorted_values) == 1:
        return sorted_values[0]
    # method="inclusive" matches linear interpolation over the observed range
    return statistics.quantiles(sorted_values, n=100, method="inclusive")[p - 1]


def _score_summary(values: list[float]) -> dict | None:
    if not values:
        return None
    ordered = sorted(values)
    return {
        "count": len(ordered),
        "mean": sum(ordered) / len(ordered),
        "min": ordered[0],
        "max": ordered[-1],
        "p25": _percentile(ordered, 25),
        "p50": _percentile(ordered, 50),
        "p75": _percentile(ordered, 75),
        "p90": _percentile(ordered, 90),
    }


def _judge_breakdown(votes: list[JudgeVote]) -> list[dict]:
    by_judge: dict[int, list[JudgeVote]] = {}
    for vote in votes:
        by_judge.setdefault(vote.judge_index, []).append(vote)
    breakdown = []
    for judge_index in sorted(by_judge):
        group = by_judge[judge_index]
        valid = [vote.score for vote in group if vote.score is not None]
        histogram: dict[str, int] = {}
        for score in valid:
            histogram[f"{score:g}"] = histogram.get(f"{score:g}", 0) + 1
        breakdown.append(
            {
                "judge_index": judge_index,
                "judge_model_id": group[0].judge_model_id,
                "votes": len(group),
                "valid": len(valid),
                "unparsable": sum(1 for v in group if v.parse_status == PARSE_UNPARSABLE),
                "retry_ok": sum(1 for v in group if v.parse_status == PARSE_RETRY_OK),
                "mean": sum(valid) / len(valid) if valid else None,
                "histogram": dict(sorted(histogram.items())),
            }
        )
    return breakdown


def _self_cross_means(votes: list[JudgeVote]) -> tuple[float | None, float | None]:
    self_scores = [v.score for v in votes if v.score is not None and v.judge_index == v.model_index]
    cross_scores = [v.score for v in votes if v.score is not None and v.judge_index != v.model_index]
    self_mean = sum(self_scores) / len(self_scores) if self_scores else None
    cross_mean = sum(cross_scores) / len(cross_scores) if cross_scores else None
    return self_mean, cross_mean


def build_report(
    instruction_count: int,
    candidates: list[Candidate],
    votes: list[JudgeVote],
    selection: SelectionResult,
    committee_ids: list[str],
    classify_method: str = "heuristic",
    classify_backend: Backend | None = None,
    mixed_total: int | None = None,
    mixed_domain: int | None = None,
) -> dict:
    """Aggregate one run into a JSON-ready report dictionary."""
    pairs = selection.pairs
    labels = classify([pair.instruction for pair in pairs], classify_method, classify_backend)
    histogram = CategoryHistogram.from_labels(labels)

    drop_reasons: dict[str, int] = {}
    for _, reason in selection.dropped:
        drop_reasons[reason] = drop_reasons.get(reason, 0) + 1

    win_counts = {index: 0 for index in range(len(committee_ids))}
    for pair in pairs:
        win_counts.setdefault(pair.model_index, 0)
        win_counts[pair.model_index] += 1
    win_rates = {
        str(index): (count / len(pairs) if pairs else 0.0)
        for index, count in sorted(win_counts.items())
    }

    winning_means = [pair.mean_score for pair in pairs if pair.mean_score is not None]
    self_mean, cross_mean = _self_cross_means(votes)

    report = {
        "counts": {
            "instructions": instruction_count,
            "candidates": len(candidates),
            "candidates_ok": sum(1 for c in candidates if c.ok),
            "candidates_failed": sum(1 for c in candidates if not c.ok),
            "votes": len(votes),
            "votes_valid": sum(1 for v in votes if v.score is not None),
            "votes_unparsable": sum(1 for v in votes if v.parse_status == PARSE_UNPARSABLE),
            "pairs": len(pairs),
            "dropped": len(selection.dropped),
        },
        "drop_reasons": dict(sorted(drop_reasons.items())),
        "category_histogram": histogram.to_dict(),
        "classify_method": classify_method,
        "scores": {
            "winning_mean": _score_summary(winning_means),
            "per_judge": _judge_breakdown(votes),
            "self_mean": self_mean,
            "cross_mean": cross_mean,
            "tie_count": selection.tie_count,
            "tie_frequency": selection.tie_count / len(pairs) if pairs else 0.0,
        },
        "committee": {
            "model_ids": list(committee_ids),
            "win_rates": win_rates,
        },
    }
    if mixed_total is not None:
        report["mix"] = {"total": mixed_total, "domain": mixed_domain}
    return report


def conservation_holds(report: dict) -> bool:
    """Every instruction must end up as a curated pair or a recorded drop."""
    counts = report["counts"]
    return counts["instructions"] == counts["pairs"] + counts["dropped"]


def render_report_text(report: dict) -> str:
    counts = report["counts"]
    lines = ["Dataset report", "=" * 14, ""]
    lines.append("Counts")
    for key in (
        "instructions",
        "candidates",
        "candidates_ok",
        "candidates_failed",
        "votes",
        "votes_valid",
        "votes_unparsable",
        "pairs",
        "dropped",
    ):
        lines.append(f"  {key:<20} {counts[key]}")
    if report["drop_reasons"]:
        lines.append("  drop reasons:")
        for reason, count in report["drop_reasons"].items():
            lines.append(f"    {reason:<22} {count}")
    lines.append("")

    lines.append(f"Categories ({report['classify_method']}, n={report['category_histogram']['total']})")
    histogram = report["category_histogram"]
    for category in CATEGORIES:
        lines.append(
            f"  {category:<22} {histogram['counts'][category]:>6}  "
            f"{histogram['percent'][category]:6.2f}%"
        )
    lines.append("")

    scores = report["scores"]
    lines.append("Scores")
    summary = scores["winning_mean"]
    if summary is None:
        lines.append("  winning mean: n/a (judging bypassed)")
    else:
        lines.append(
            f"  winning mean: avg {summary['mean']:.3f}  "
            f"p25 {summary['p25']:.2f}  p50 {summary['p50']:.2f}  "
            f"p75 {summary['p75']:.2f}  p90 {summary['p90']:.2f}"
        )
    for judge in scores["per_judge"]:
        mean = f"{judge['mean']:.3f}" if judge["mean"] is not None else "n/a"
        lines.append(
            f"  judge {judge['judge_index']} ({judge['judge_model_id']}): "
            f"mean {mean}, valid {judge['valid']}/{judge['votes']}, "
            f"unparsable {judge['unparsable']}, retried-ok {judge['retry_ok']}"
        )
    self_mean = f"{scores['self_mean']:.3f}" if scores["self_mean"] is not None else "n/a"
    cross_mean = f"{scores['cross_mean']:.3f}" if scores["cross_mean"] is not None else "n/a"
    lines.append(f"  self-grading mean {self_mean}, cross-grading mean {cross_mean}")
    lines.append(f"  ties: {scores['tie_count']} ({100 * scores['tie_frequency']:.2f}% of pairs)")
    lines.append("")

    lines.append("Committee win rates")
    for index, rate in report["committee"]["win_rates"].items():
        model_id = report["committee"]["model_ids"][int(index)]
        lines.append(f"  [{index}] {model_id:<28} {100 * rate:6.2f}%")
    if "mix" in report:
        lines.append("")
        lines.append(
            f"Mixed dataset: {report['mix']['total']} records "
            f"({report['mix']['domain']} domain)"
        )
    return "\n".join(lines) + "\n"
