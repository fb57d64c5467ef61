"""Per-model-family chat templates and instruction extraction.

Each supported family gets a small declarative template: the exact text
that opens a user turn, the markers that terminate a turn, and the full
set of special control strings. Feeding an aligned model nothing but the
user-turn opener makes it complete a plausible user message; cleaning
that continuation yields one elicited instruction.

Templates are data: built-ins cover the common families, and a JSON
definition file can add or override families with no code change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import SftReconError


class TemplateError(SftReconError):
    """A template definition violates an invariant."""


class TemplateNotFoundError(SftReconError):
    """The requested family id is not in the registry."""


class EmptyExtractionError(SftReconError):
    """Cleaning a raw continuation left no instruction text."""


@dataclass(frozen=True)
class ChatTemplate:
    family_id: str
    pre_query_text: str
    turn_end_markers: tuple[str, ...]
    special_tokens: tuple[str, ...]
    assistant_open_text: str

    def __post_init__(self):
        if not self.family_id:
            raise TemplateError("family_id must be non-empty")
        if not self.pre_query_text:
            raise TemplateError(f"{self.family_id}: pre_query_text must be non-empty")
        if not self.turn_end_markers or any(not m for m in self.turn_end_markers):
            raise TemplateError(f"{self.family_id}: turn_end_markers must be non-empty strings")
        for i, a in enumerate(self.turn_end_markers):
            for j, b in enumerate(self.turn_end_markers):
                if i != j and a in b:
                    raise TemplateError(
                        f"{self.family_id}: end marker {a!r} is a substring of {b!r}; "
                        "earliest-match scanning would be ambiguous"
                    )
        if len(set(self.special_tokens)) != len(self.special_tokens):
            raise TemplateError(f"{self.family_id}: special_tokens contains duplicates")

    def render_user_turn(self, content: str) -> str:
        """A full user turn; always contains pre_query_text by construction."""
        return f"{self.pre_query_text}{content}{self.turn_end_markers[0]}"

    def render_generation_prompt(self, user_content: str) -> str:
        """User turn plus the assistant opener, for raw-completion endpoints."""
        return f"{self.render_user_turn(user_content)}{self.assistant_open_text}"


def builtin_templates() -> dict[str, ChatTemplate]:
    """Registry of built-in families, keyed by family_id."""
    templates = [
        ChatTemplate(
            family_id="llama-3",
            pre_query_text="<|start_header_id|>user<|end_header_id|>\n\n",
            turn_end_markers=("<|eot_id|>", "<|end_of_text|>"),
            special_tokens=(
                "<|begin_of_text|>",
                "<|start_header_id|>",
                "<|end_header_id|>",
                "<|eot_id|>",
                "<|end_of_text|>",
            ),
            assistant_open_text="<|start_header_id|>assistant<|end_header_id|>\n\n",
        ),
        ChatTemplate(
            family_id="chatml",
            pre_query_text="<|im_start|>user\n",
            turn_end_markers=("<|im_end|>",),
            special_tokens=("<|im_start|>", "<|im_end|>"),
            assistant_open_text="<|im_start|>assistant\n",
        ),
        # Fallback for endpoints without a published control-token scheme.
        ChatTemplate(
            family_id="generic",
            pre_query_text="<|user|>\n",
            turn_end_markers=("<|end|>",),
            special_tokens=("<|system|>", "<|user|>", "<|assistant|>", "<|end|>"),
            assistant_open_text="<|assistant|>\n",
        ),
    ]
    return {t.family_id: t for t in templates}


def get_template(family_id: str, registry: dict[str, ChatTemplate] | None = None) -> ChatTemplate:
    registry = registry if registry is not None else builtin_templates()
    try:
        return registry[family_id]
    except KeyError:
        raise TemplateNotFoundError(
            f"no chat template for family {family_id!r}; known: {sorted(registry)}"
        ) from None


def load_template_file(path: str) -> dict[str, ChatTemplate]:
    """Parse a JSON template-definition file.

    Accepts either a list of family records or a {"families": [...]}
    wrapper. Each record carries the five ChatTemplate fields.
    """
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("families", [])
    if not isinstance(data, list):
        raise TemplateError(f"{path}: expected a list of family records")
    registry = {}
    for record in data:
        try:
            template = ChatTemplate(
                family_id=record["family_id"],
                pre_query_text=record["pre_query_text"],
                turn_end_markers=tuple(record["turn_end_markers"]),
                special_tokens=tuple(record.get("special_tokens", ())),
                assistant_open_text=record.get("assistant_open_text", ""),
            )
        except KeyError as exc:
            raise TemplateError(f"{path}: family record missing key {exc}") from None
        registry[template.family_id] = template
    return registry


def template_registry(extra_path: str | None = None) -> dict[str, ChatTemplate]:
    """Built-ins, with the optional definition file merged over them."""
    registry = builtin_templates()
    if extra_path:
        registry.update(load_template_file(extra_path))
    return registry


def _truncate_at_first_marker(text: str, markers: tuple[str, ...]) -> str:
    cut = len(text)
    for marker in markers:
        pos = text.find(marker)
        if pos != -1 and pos < cut:
            cut = pos
    return text[:cut]


def extract_instruction(template: ChatTemplate, raw_continuation: str) -> str:
    """Clean a raw model continuation into one instruction.

    Truncates at the earliest turn-end marker, strips every special token,
    and trims surrounding whitespace. Turn-end markers only ever truncate;
    they are never removed even when also listed as special tokens.
    Truncation and token removal repeat to a fixpoint so that removing one
    token can never splice together a marker that then survives into the
    output.
    """
    removable = tuple(
        token for token in template.special_tokens
        if token not in template.turn_end_markers
    )
    text = raw_continuation
    while True:
        cleaned = _truncate_at_first_marker(text, template.turn_end_markers)
        for token in removable:
            cleaned = cleaned.replace(token, "")
        if cleaned == text:
            break
        text = cleaned
    text = text.strip()
    if not text:
        raise EmptyExtractionError("continuation is empty after cleaning")
    return text
