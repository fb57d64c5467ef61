"""Dataset assembly: domain loading, mixing, and export.

Curated instruction/response pairs are combined with a domain-specific
dataset into one training file. Ratio mode sizes the domain share by a
fixed fraction of the final record count; concat mode takes both pools
whole. Mixing is deterministic for a given seed: domain picks, any recon
subsampling, and the final shuffle each draw from their own named seed
stream, so record counts and file digests reproduce exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, SftReconError
from .judging import CuratedPair
from .runio import ArtifactError, iter_jsonl, write_jsonl
from .seeding import SplitMix64, derive_seed, sample_without_replacement, shuffle_in_place

log = logging.getLogger(__name__)

ORIGIN_RECON = "recon"
ORIGIN_DOMAIN = "domain"

FORMAT_PAIR = "pair"
FORMAT_CHAT = "chat"
RECORD_FORMATS = (FORMAT_PAIR, FORMAT_CHAT)

MODE_RATIO = "ratio"
MODE_CONCAT = "concat"
MIX_MODES = (MODE_RATIO, MODE_CONCAT)

DEFAULT_DOMAIN_FRACTION = 0.17


class InsufficientRecordsError(SftReconError):
    """A pool is too small to satisfy the requested mix."""


@dataclass(frozen=True)
class SftRecord:
    instruction: str
    output: str
    origin: str
    id: str | None = None


@dataclass(frozen=True)
class MixPlan:
    domain_fraction: float = DEFAULT_DOMAIN_FRACTION
    mode: str = MODE_RATIO
    total_size: int | None = None

    def validate(self) -> None:
        if self.mode not in MIX_MODES:
            raise ConfigError(f"mix mode {self.mode!r} must be one of {MIX_MODES}")
        if not 0 <= self.domain_fraction < 1:
            raise ConfigError("domain_fraction must be in [0, 1)")
        if self.total_size is not None and self.total_size < 1:
            raise ConfigError("total_size must be >= 1 when given")


def round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def assemble_recon(pairs: list[CuratedPair]) -> list[SftRecord]:
    return [
        SftRecord(
            instruction=pair.instruction,
            output=pair.response,
            origin=ORIGIN_RECON,
            id=pair.instruction_id,
        )
        for pair in pairs
    ]


def _record_from_pair_line(data: dict, where: str) -> SftRecord:
    instruction = data.get("instruction")
    output = data.get("output")
    if not isinstance(instruction, str) or not instruction.strip():
        raise ArtifactError(f"{where}: missing or empty 'instruction'")
    if not isinstance(output, str) or not output.strip():
        raise ArtifactError(f"{where}: missing or empty 'output'")
    raw_id = data.get("id")
    return SftRecord(
        instruction=instruction,
        output=output,
        origin=str(data.get("origin", ORIGIN_DOMAIN)),
        id=str(raw_id) if raw_id is not None else None,
    )


def _record_from_chat_line(data: dict, where: str) -> SftRecord:
    messages = data.get("messages")
    if not isinstance(messages, list) or not messages:
        raise ArtifactError(f"{where}: missing or empty 'messages'")
    user = None
    assistant = None
    for message in messages:
        if not isinstance(message, dict):
            raise ArtifactError(f"{where}: message entries must be objects")
        role = message.get("role")
        content = message.get("content")
        if not isinstance(content, str):
            raise ArtifactError(f"{where}: message content must be a string")
        if role == "user" and user is None:
            user = content
        elif role == "assistant" and user is not None and assistant is None:
            assistant = content
    if user is None or assistant is None:
        raise ArtifactError(f"{where}: need a user turn followed by an assistant turn")
    if len(messages) > 2:
        log.warning("%s: flattening %d-turn conversation to its first exchange", where, len(messages))
    if not user.strip() or not assistant.strip():
        raise ArtifactError(f"{where}: empty user or assistant turn")
    raw_id = data.get("id")
    return SftRecord(
        instruction=user,
        output=assistant,
        origin=str(data.get("origin", ORIGIN_DOMAIN)),
        id=str(raw_id) if raw_id is not None else None,
    )


def load_records(
    path: Path, record_format: str = FORMAT_PAIR, on_error: str = "raise"
) -> tuple[list[SftRecord], list[tuple[int, str]]]:
    """Load SFT records from JSONL.

    on_error="raise" aborts at the first bad line; "skip" collects
    (line number, problem) entries and keeps going.
    """
    if record_format not in RECORD_FORMATS:
        raise ConfigError(f"record format {record_format!r} must be one of {RECORD_FORMATS}")
    if on_error not in ("raise", "skip"):
        raise ConfigError("on_error must be 'raise' or 'skip'")
    parse = _record_from_pair_line if record_format == FORMAT_PAIR else _record_from_chat_line
    records: list[SftRecord] = []
    skipped: list[tuple[int, str]] = []
    for number, data in iter_jsonl(path):
        try:
            records.append(parse(data, f"{path}:{number}"))
        except ArtifactError as exc:
            if on_error == "raise":
                raise
            skipped.append((number, str(exc)))
    if skipped:
        log.warning("%s: skipped %d malformed records", path, len(skipped))
    return records, skipped


def load_domain(path: Path, record_format: str = FORMAT_PAIR) -> list[SftRecord]:
    records, _ = load_records(path, record_format, on_error="raise")
    return [
        SftRecord(instruction=r.instruction, output=r.output, origin=ORIGIN_DOMAIN, id=r.id)
        for r in records
    ]


def mix(
    recon: list[SftRecord],
    domain: list[SftRecord],
    plan: MixPlan,
    seed: int,
) -> list[SftRecord]:
    """Combine the two pools per the plan and shuffle deterministically.

    Ratio mode: the final set has round(total * domain_fraction) domain
    records, the rest recon. total comes from plan.total_size, or defaults
    to the size at which the full recon pool fills its (1 - fraction)
    share. Pool subsets are sampled without replacement from their own
    seed streams. Concat mode uses both pools whole.
    """
    plan.validate()
    if plan.mode == MODE_CONCAT:
        combined = list(recon) + list(domain)
    else:
        if plan.total_size is not None:
            total = plan.total_size
        elif plan.domain_fraction == 0:
            total = len(recon)
        else:
            total = round_half_up(len(recon) / (1 - plan.domain_fraction))
        domain_count = round_half_up(total * plan.domain_fraction)
        recon_count = total - domain_count
        if recon_count > len(recon):
            raise InsufficientRecordsError(
                f"mix needs {recon_count} recon records, pool has {len(recon)}"
            )
        if domain_count > len(domain):
            raise InsufficientRecordsError(
                f"mix needs {domain_count} domain records, pool has {len(domain)}"
            )
        picked_recon = (
            list(recon)
            if recon_count == len(recon)
            else sample_without_replacement(
                recon, recon_count, SplitMix64(derive_seed(seed, "mix.recon"))
            )
        )
        picked_domain = sample_without_replacement(
            domain, domain_count, SplitMix64(derive_seed(seed, "mix.domain"))
        )
        combined = picked_recon + picked_domain
    shuffle_in_place(combined, SplitMix64(derive_seed(seed, "mix.shuffle")))
    return combined


def record_to_dict(record: SftRecord, record_format: str) -> dict:
    if record_format == FORMAT_CHAT:
        data: dict = {
            "messages": [
                {"role": "user", "content": record.instruction},
                {"role": "assistant", "content": record.output},
            ]
        }
    else:
        data = {"instruction": record.instruction, "output": record.output}
    data["origin"] = record.origin
    if record.id is not None:
        data["id"] = record.id
    return data


@dataclass(frozen=True)
class ExportResult:
    path: Path
    count: int
    sha256: str


def export_records(
    records: list[SftRecord], path: Path, record_format: str = FORMAT_PAIR
) -> ExportResult:
    if record_format not in RECORD_FORMATS:
        raise ConfigError(f"record format {record_format!r} must be one of {RECORD_FORMATS}")
    digest = write_jsonl(path, (record_to_dict(r, record_format) for r in records))
    log.info("wrote %d records to %s", len(records), path)
    return ExportResult(path=Path(path), count=len(records), sha256=digest)
