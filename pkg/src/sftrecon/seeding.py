"""Deterministic seeding, hashing and shuffling primitives.

All randomness in a run flows from a single integer seed. Sub-streams are
derived by hashing the root seed together with string labels (stage name,
record id, attempt number, ...) so that independent stages never consume
from each other's streams and partial re-runs stay reproducible.

Shuffling and sampling are driven by splitmix64 (Steele, Lea & Flood's
64-bit mixer, as published on the xoshiro/xoroshiro generator pages)
rather than the stdlib Mersenne Twister, so exported files can be
reproduced byte-for-byte by an implementation in any language.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

MASK64 = (1 << 64) - 1

_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX_MUL_1 = 0xBF58476D1CE4E5B9
_MIX_MUL_2 = 0x94D049BB133111EB


def mix64(value: int) -> int:
    """splitmix64 finalizer: avalanche a 64-bit value."""
    z = value & MASK64
    z = ((z ^ (z >> 30)) * _MIX_MUL_1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX_MUL_2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """splitmix64 sequence generator.

    next_u64() matches the reference C implementation output for the same
    seed, which gives downstream consumers a published sequence to verify
    against.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def below(self, bound: int) -> int:
        """Integer in [0, bound) via plain modulo.

        The modulo bias is negligible for bound << 2**64 and keeping the
        mapping trivial makes the sequence easy to port.
        """
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound


def derive_seed(seed: int, *labels: object) -> int:
    """Derive an independent 64-bit sub-seed from a root seed and labels.

    sha256-based, so the derivation is stable across platforms and Python
    versions and does not interact with the splitmix64 stream itself.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode("ascii"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def stable_text_hash(text: str) -> int:
    """64-bit content hash of a string (sha256 prefix, process-independent)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def shuffle_in_place(items: list, rng: SplitMix64) -> None:
    """Fisher-Yates shuffle, descending index, j = next_u64() % (i + 1)."""
    for i in range(len(items) - 1, 0, -1):
        j = rng.below(i + 1)
        items[i], items[j] = items[j], items[i]


def sample_without_replacement(items: Sequence, count: int, rng: SplitMix64) -> list:
    """Draw `count` distinct items via a partial Fisher-Yates pass.

    Selection order is part of the contract: callers that need a stable
    layout shuffle afterwards with a separate stream.
    """
    if count < 0 or count > len(items):
        raise ValueError(f"cannot sample {count} of {len(items)} items")
    indices = list(range(len(items)))
    for i in range(count):
        j = i + rng.below(len(indices) - i)
        indices[i], indices[j] = indices[j], indices[i]
    return [items[i] for i in indices[:count]]
