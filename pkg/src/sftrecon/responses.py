"""Committee response generation.

Every instruction is answered by each committee model several times, giving
K models x L samples candidate responses per instruction. Candidates keep
their (model_index, sample_index) coordinates; that pair is the stable
identity used later for judging, tie-breaking, and reporting.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import (
    Backend,
    CHAT_COMPLETIONS,
    FINISH_ERROR,
    RAW_COMPLETIONS,
    RESPONSE_SAMPLING,
    Prompt,
    SamplingParams,
    with_seed,
)
from .chat_templates import ChatTemplate, get_template
from .errors import ConfigError
from .instructions import Instruction
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Candidate:
    instruction_id: str
    model_index: int
    sample_index: int
    model_id: str
    text: str
    finish_reason: str
    error_kind: str | None = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.model_index, self.sample_index)

    @property
    def ok(self) -> bool:
        return self.finish_reason != FINISH_ERROR

    def to_dict(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "model_index": self.model_index,
            "sample_index": self.sample_index,
            "model_id": self.model_id,
            "text": self.text,
            "finish_reason": self.finish_reason,
            "error_kind": self.error_kind,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Candidate":
        return cls(
            instruction_id=data["instruction_id"],
            model_index=data["model_index"],
            sample_index=data["sample_index"],
            model_id=data["model_id"],
            text=data["text"],
            finish_reason=data["finish_reason"],
            error_kind=data.get("error_kind"),
        )


def build_response_prompt(
    backend: Backend, instruction_text: str, registry: dict[str, ChatTemplate] | None = None
) -> Prompt:
    """Prompt for answering an instruction, shaped for the endpoint kind."""
    kind = backend.spec.endpoint_kind
    if kind == RAW_COMPLETIONS:
        template = get_template(backend.spec.template_family, registry)
        return template.render_generation_prompt(instruction_text)
    if kind == CHAT_COMPLETIONS:
        return [{"role": "user", "content": instruction_text}]
    # Mock endpoints take chat messages; role inference handles the rest.
    return [{"role": "user", "content": instruction_text}]


def respond_corpus(
    committee: list[Backend],
    instructions: list[Instruction],
    samples_per_model: int,
    seed: int,
    params: SamplingParams = RESPONSE_SAMPLING,
    registry: dict[str, ChatTemplate] | None = None,
) -> list[Candidate]:
    """All candidates for a corpus, grouped by instruction.

    The returned list holds, for each instruction in input order, its
    K x L candidates ordered by (model_index, sample_index). Failed
    generations become empty-text candidates with finish_reason "error";
    they stay in the list so downstream stages can account for them.

    Committee members run concurrently, and requests within one member are
    bounded by that member's own concurrency limit.
    """
    if not committee:
        raise ConfigError("committee must contain at least one model")
    if samples_per_model < 1:
        raise ConfigError("samples_per_model must be >= 1")

    def run_model(model_index: int) -> list[list[str | None]]:
        backend = committee[model_index]
        prompts = []
        per_request = []
        for instruction in instructions:
            prompt = build_response_prompt(backend, instruction.text, registry)
            for sample_index in range(samples_per_model):
                prompts.append(prompt)
                per_request.append(
                    with_seed(
                        params,
                        derive_seed(
                            seed,
                            "respond",
                            instruction.id,
                            str(model_index),
                            str(sample_index),
                        ),
                    )
                )
        return backend.generate_many(prompts, per_request)

    with ThreadPoolExecutor(max_workers=max(len(committee), 1)) as pool:
        per_model = list(pool.map(run_model, range(len(committee))))

    candidates: list[Candidate] = []
    failures = 0
    for row, instruction in enumerate(instructions):
        for model_index, backend in enumerate(committee):
            for sample_index in range(samples_per_model):
                result = per_model[model_index][row * samples_per_model + sample_index]
                if not result.ok:
                    failures += 1
                candidates.append(
                    Candidate(
                        instruction_id=instruction.id,
                        model_index=model_index,
                        sample_index=sample_index,
                        model_id=backend.spec.model_id,
                        text=result.text if result.ok else "",
                        finish_reason=result.finish_reason,
                        error_kind=result.error_kind,
                    )
                )
    if failures:
        log.warning("%d of %d candidate generations failed", failures, len(candidates))
    return candidates


def group_by_instruction(candidates: list[Candidate]) -> dict[str, list[Candidate]]:
    """Candidates keyed by instruction id, each group in candidate-key order."""
    groups: dict[str, list[Candidate]] = {}
    for candidate in candidates:
        groups.setdefault(candidate.instruction_id, []).append(candidate)
    for group in groups.values():
        group.sort(key=lambda c: c.key)
    return groups
