"""XOR-based secret sharing over the 32-bit ring.

Ring values are plain Python ints in [0, 2**32). Values outside the ring are
rejected rather than truncated, so counter words stay bit-exact.
"""

from __future__ import annotations

from typing import NamedTuple

RING_BITS = 32
RING_MASK = (1 << RING_BITS) - 1
RING_SIZE = 1 << RING_BITS


class RandomnessReuse(RuntimeError):
    """A (z0, z1) contribution pair was consumed twice within one protocol run."""


class InsufficientRandomness(ValueError):
    """A party supplied fewer random words than the sharing requires."""


def check_word(x: int, name: str = "value") -> int:
    if not isinstance(x, int) or isinstance(x, bool):
        raise TypeError(f"{name} must be an int, got {type(x).__name__}")
    if not 0 <= x < RING_SIZE:
        raise ValueError(f"{name} out of ring range [0, 2**{RING_BITS}): {x!r}")
    return x


class SharePair(NamedTuple):
    """A 32-bit word split into two XOR shares, one per simulated server."""

    s0: int
    s1: int


def share(x: int, randomness: int) -> SharePair:
    """Split x into (randomness, x XOR randomness)."""
    check_word(x, "x")
    check_word(randomness, "randomness")
    return SharePair(randomness, x ^ randomness)


def recover(p: SharePair) -> int:
    """XOR the two shares back together."""
    return check_word(p.s0, "s0") ^ check_word(p.s1, "s1")


def share_in_protocol(x: int, z0: int, z1: int, seen: set | None = None) -> SharePair:
    """Share x using server-contributed random words z0, z1.

    s0 = z0 XOR z1 and s1 = s0 XOR x, so neither server alone controls or
    predicts the sharing randomness. Each (z0, z1) pair is one-shot: when the
    caller passes the run-scoped `seen` set, a repeated pair raises
    RandomnessReuse.
    """
    check_word(x, "x")
    check_word(z0, "z0")
    check_word(z1, "z1")
    if seen is not None:
        pair = (z0, z1)
        if pair in seen:
            raise RandomnessReuse(f"contribution pair reused within run: {pair}")
        seen.add(pair)
    s0 = z0 ^ z1
    return SharePair(s0, s0 ^ x)


def share_k(x: int, contributions: list[list[int]]) -> list[int]:
    """k-out-of-k sharing from per-party random word lists.

    Each of the k parties contributes k-1 random words. Share j (j < k) is the
    XOR of every party's j-th word; the last share folds in x so that the XOR
    of all k shares recovers it.
    """
    check_word(x, "x")
    k = len(contributions)
    if k < 2:
        raise ValueError(f"need at least 2 parties, got {k}")
    for i, words in enumerate(contributions):
        if len(words) < k - 1:
            raise InsufficientRandomness(
                f"party {i} contributed {len(words)} words, need {k - 1}"
            )
        for w in words[: k - 1]:
            check_word(w, f"party {i} word")

    z = [0] * (k - 1)
    for j in range(k - 1):
        for words in contributions:
            z[j] ^= words[j]
    last = x
    for zj in z:
        last ^= zj
    return z + [last]


def recover_k(shares: list[int]) -> int:
    """XOR all k shares back together."""
    out = 0
    for s in shares:
        out ^= check_word(s)
    return out
