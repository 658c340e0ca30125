"""Exhaustively padded secure cache and its oblivious operations.

The cache is an append-only array of real view tuples and dummies. Sorting is
a bitonic compare-exchange network, so the sequence of touched index pairs is
a function of the array length alone and leaks nothing about the contents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

_SENTINEL = np.iinfo(np.int64).max


@dataclass(frozen=True, slots=True)
class SecureTuple:
    """One cache/view slot: payload plus flags.

    is_view marks a real view entry; dummies carry is_view=False. seq is the
    per-run creation stamp, unique across real rows and minted dummies.
    sources lists the seq ids of the input records a real row was derived
    from; simulator bookkeeping only, empty for dummies.
    """

    key: int
    attrs: tuple[int, ...]
    is_view: bool
    seq: int
    timestamp: int = 0
    sources: tuple[int, ...] = ()


class SeqCounter:
    """Monotone stamp source for all tuples minted during one simulated run."""

    def __init__(self, start: int = 0):
        self._next = start

    def take(self) -> int:
        n = self._next
        self._next += 1
        return n


def make_dummy(seq: int, timestamp: int = 0, width: int = 0) -> SecureTuple:
    return SecureTuple(key=0, attrs=(0,) * width, is_view=False, seq=seq,
                       timestamp=timestamp)


@dataclass
class SecureCache:
    """Append-only padded array of SecureTuples awaiting synchronization."""

    entries: list[SecureTuple] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def real_count(self) -> int:
        return sum(1 for e in self.entries if e.is_view)


# ---------------------------------------------------------------------------
# Bitonic sorting network. Stage plans depend only on the (padded) length and
# are cached; execution applies each stage as a vectorized compare-exchange.

_plan_cache: dict[int, list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}


def padded_length(n: int) -> int:
    m = 1
    while m < n:
        m <<= 1
    return m


def compare_exchange_pairs(n: int) -> Iterator[tuple[int, int, bool]]:
    """Yield the (i, j, ascending) compare-exchange sequence for length n.

    n must be a power of two. The sequence is a pure function of n; tests log
    it to assert data-independence.
    """
    if n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")
    k = 2
    while k <= n:
        j = k >> 1
        while j:
            for i in range(n):
                partner = i ^ j
                if partner > i:
                    yield i, partner, (i & k) == 0
            j >>= 1
        k <<= 1


def network_comparison_count(n: int) -> int:
    """Compare-exchange count of the network for n items (padded internally)."""
    m = padded_length(n)
    if m < 2:
        return 0
    stages = m.bit_length() - 1
    return (m // 2) * stages * (stages + 1) // 2


def _stage_plan(n: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    plan = _plan_cache.get(n)
    if plan is None:
        plan = []
        k = 2
        while k <= n:
            j = k >> 1
            while j:
                i = np.arange(n)
                mask = (i & j) == 0
                lo = i[mask]
                hi = lo ^ j
                asc = (lo & k) == 0
                plan.append((lo, hi, asc))
                j >>= 1
            k <<= 1
        _plan_cache[n] = plan
    return plan


def network_sort_keys(keys: np.ndarray) -> tuple[np.ndarray, int]:
    """Run the network on int64 keys; return the permutation and compare count.

    Input is padded with max-int sentinels to a power of two; the permutation
    returned covers only the original positions.
    """
    n = len(keys)
    m = padded_length(n)
    buf = np.full(m, _SENTINEL, dtype=np.int64)
    buf[:n] = keys
    perm = np.arange(m)
    comparisons = 0
    if m >= 2:
        for lo, hi, asc in _stage_plan(m):
            a = buf[lo]
            b = buf[hi]
            swap = np.where(asc, a > b, a < b)
            comparisons += len(lo)
            if swap.any():
                sl = lo[swap]
                sh = hi[swap]
                buf[sl], buf[sh] = buf[sh].copy(), buf[sl].copy()
                perm[sl], perm[sh] = perm[sh].copy(), perm[sl].copy()
    return perm[perm < n][: n], comparisons


def network_sort(items: list, key_of: Callable, counter: list | None = None) -> list:
    """Data-independent sort of items by an int64 composite key.

    key_of maps an item to a non-negative int below 2**62 and must be
    injective over the input (include a seq component). When `counter` is
    given, its single element accumulates the compare-exchange count.
    """
    n = len(items)
    if n == 0:
        return []
    keys = np.fromiter((key_of(it) for it in items), dtype=np.int64, count=n)
    perm, comparisons = network_sort_keys(keys)
    if counter is not None:
        counter[0] += comparisons
    return [items[i] for i in perm]


# ---------------------------------------------------------------------------
# Cache operations.

def _cache_key(t: SecureTuple) -> int:
    # Real entries first, FIFO within each class.
    return ((0 if t.is_view else 1) << 48) | (t.seq & ((1 << 48) - 1))


def cache_append(cache: SecureCache, batch: list[SecureTuple]) -> SecureCache:
    """Append a padded batch, preserving order of prior entries."""
    return SecureCache(cache.entries + list(batch))


def obli_sort(cache: SecureCache, counter: list | None = None) -> SecureCache:
    """Sort real entries ahead of dummies with the compare-exchange network."""
    return SecureCache(network_sort(cache.entries, _cache_key, counter))


def cache_read(cache: SecureCache, sz: int,
               seqs: SeqCounter | None = None,
               timestamp: int = 0,
               width: int = 0) -> tuple[list[SecureTuple], SecureCache]:
    """Pop the first sz entries; mint fresh dummies when sz exceeds the cache.

    Callers sort first so real data is fetched ahead of dummies. Minted
    dummies take seq stamps from `seqs`, or past the cache's own maximum when
    no run counter is supplied.
    """
    if sz < 0:
        raise ValueError(f"read size must be non-negative, got {sz}")
    entries = cache.entries
    if sz <= len(entries):
        return list(entries[:sz]), SecureCache(list(entries[sz:]))
    fetched = list(entries)
    if seqs is None:
        start = max((e.seq for e in entries), default=-1) + 1
        seqs = SeqCounter(start)
    for _ in range(sz - len(entries)):
        fetched.append(make_dummy(seqs.take(), timestamp, width))
    return fetched, SecureCache([])


def cache_flush(cache: SecureCache, s: int,
                seqs: SeqCounter | None = None,
                timestamp: int = 0,
                width: int = 0,
                counter: list | None = None) -> tuple[list[SecureTuple], SecureCache]:
    """Sort, fetch s entries for the view, and recycle the remainder."""
    sorted_cache = obli_sort(cache, counter)
    fetched, _ = cache_read(sorted_cache, s, seqs, timestamp, width)
    return fetched, SecureCache([])
