"""Truncated view transformation: filter, sort-merge join, nested-loop join.

Each step converts newly outsourced batches into padded view entries, keeps
the secret-shared cardinality counter in sync, and charges every input record
against its lifetime contribution budget. Output sizes are functions of the
input sizes and the truncation parameters only, never of data values.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .obliv import SecureCache, SecureTuple, SeqCounter, cache_append, make_dummy, network_sort
from .randomness import ServerRandomness
from .sharing import RING_MASK, SharePair, recover, share_in_protocol

# Counter shares are a plain word SharePair; recover() gives the cached-real count.
CounterShares = SharePair


class ChargePolicy(enum.Enum):
    # Flat omega per invocation a record is used in (main-protocol accounting).
    PER_INVOCATION_OMEGA = "PerInvocationOmega"
    # One unit per emitted real row the record contributes to.
    PER_OUTPUT_ROW = "PerOutputRow"


@dataclass(frozen=True)
class TruncationConfig:
    omega: int
    b: int
    charge_policy: ChargePolicy = ChargePolicy.PER_INVOCATION_OMEGA

    def __post_init__(self):
        if self.omega < 1:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.b < self.omega:
            raise ValueError(f"omega ({self.omega}) must not exceed budget b ({self.b})")

    @property
    def retention_steps(self) -> int:
        """Invocations a record stays usable under flat-omega charging."""
        return -(-self.b // self.omega)


class BudgetLedger:
    """Remaining lifetime contribution budget per record id (seq)."""

    def __init__(self):
        self._remaining: dict[int, int] = {}

    def register(self, rid: int, b: int) -> None:
        self._remaining.setdefault(rid, b)

    def remaining(self, rid: int) -> int:
        return self._remaining.get(rid, 0)

    def charge(self, rid: int, amount: int) -> int:
        """Consume up to `amount`; returns what was actually consumed."""
        if amount < 0:
            raise ValueError("charge amount must be non-negative")
        have = self._remaining.get(rid)
        assert have is not None, f"charging unregistered record {rid}"
        used = min(have, amount)
        self._remaining[rid] = have - used
        return used

    def retired(self, rid: int) -> bool:
        return self.remaining(rid) == 0

    def items(self):
        return self._remaining.items()


class InvocationCaps:
    """Per-invocation contribution slots: min(omega, remaining budget)."""

    def __init__(self, ledger: BudgetLedger, omega: int):
        self._ledger = ledger
        self._omega = omega
        self._rem: dict[int, int] = {}

    def remaining(self, rid: int) -> int:
        r = self._rem.get(rid)
        if r is None:
            r = min(self._omega, self._ledger.remaining(rid))
            self._rem[rid] = r
        return r

    def consume(self, rid: int) -> None:
        self._rem[rid] = self.remaining(rid) - 1


def _join_tuple(a: SecureTuple, b: SecureTuple, seqs: SeqCounter, timestamp: int) -> SecureTuple:
    return SecureTuple(key=a.key, attrs=a.attrs + b.attrs, is_view=True,
                       seq=seqs.take(), timestamp=timestamp,
                       sources=(a.seq, b.seq))


def _join_width(t1: list[SecureTuple], t2: list[SecureTuple]) -> int:
    w1 = len(t1[0].attrs) if t1 else 0
    w2 = len(t2[0].attrs) if t2 else 0
    return w1 + w2


def trans_truncate_filter(batch: list[SecureTuple],
                          predicate: Callable[[SecureTuple], bool],
                          seqs: SeqCounter | None = None,
                          timestamp: int = 0) -> list[SecureTuple]:
    """Oblivious selection: same length out, isView set iff the predicate holds.

    Input dummies stay dummies; payloads pass through unchanged.
    """
    seqs = seqs or SeqCounter(max((t.seq for t in batch), default=-1) + 1)
    out = []
    for tup in batch:
        keep = tup.is_view and bool(predicate(tup))
        out.append(SecureTuple(key=tup.key, attrs=tup.attrs, is_view=keep,
                               seq=seqs.take(), timestamp=timestamp,
                               sources=(tup.seq,) if keep else ()))
    return out


_SEQ_BITS = 28
_SEQ_MASK = (1 << _SEQ_BITS) - 1


def _merge_key(origin: int, t: SecureTuple) -> int:
    # (dummy-last, join key, t1-before-t2, seq) packed into one int64.
    return (((0 if t.is_view else 1) << 61) | (t.key << 29) |
            (origin << 28) | (t.seq & _SEQ_MASK))


def trans_truncate_smj(t1: list[SecureTuple], t2: list[SecureTuple],
                       config: TruncationConfig, ledger: BudgetLedger,
                       caps: InvocationCaps | None = None,
                       seqs: SeqCounter | None = None,
                       timestamp: int = 0,
                       compare_counter: list | None = None,
                       drop_counter: list | None = None) -> list[SecureTuple]:
    """Truncated oblivious sort-merge join.

    The tables are merged and network-sorted on (join key, origin, seq); ties
    put t1 records first. The linear scan emits, for every accessed tuple,
    exactly omega output slots: real joins with previously scanned partners
    while both sides hold contribution slots, dummies for the rest. A record's
    slots this invocation are min(omega, remaining ledger budget), so joins of
    an exhausted record are discarded automatically.
    """
    for tup in t1 + t2:
        if tup.is_view:
            ledger.register(tup.seq, config.b)
    caps = caps or InvocationCaps(ledger, config.omega)
    seqs = seqs or SeqCounter(max((t.seq for t in t1 + t2), default=-1) + 1)
    width = _join_width(t1, t2)

    tagged = [(0, t) for t in t1] + [(1, t) for t in t2]
    merged = network_sort(tagged, lambda it: _merge_key(*it), compare_counter)

    out: list[SecureTuple] = []
    group_key = None
    seen: tuple[list, list] = ([], [])
    for origin, tup in merged:
        emitted: list[SecureTuple] = []
        if tup.is_view:
            if tup.key != group_key:
                group_key = tup.key
                seen = ([], [])
            partners = seen[1 - origin]
            matched = len(partners)
            for p in partners:
                if len(emitted) == config.omega or caps.remaining(tup.seq) <= 0:
                    break
                if caps.remaining(p.seq) <= 0:
                    continue
                caps.consume(tup.seq)
                caps.consume(p.seq)
                a, b = (tup, p) if origin == 0 else (p, tup)
                emitted.append(_join_tuple(a, b, seqs, timestamp))
            if drop_counter is not None:
                drop_counter[0] += matched - len(emitted)
            seen[origin].append(tup)
        out.extend(emitted)
        for _ in range(config.omega - len(emitted)):
            out.append(make_dummy(seqs.take(), timestamp, width))
    return out


def trans_truncate_nlj(t1: list[SecureTuple], t2: list[SecureTuple], b: int,
                       caps: InvocationCaps | None = None,
                       seqs: SeqCounter | None = None,
                       timestamp: int = 0,
                       compare_counter: list | None = None,
                       drop_counter: list | None = None) -> list[SecureTuple]:
    """Truncated oblivious nested-loop join: b output slots per outer tuple.

    Every (outer, inner) probe either emits a real join (keys match and both
    records hold budget, one unit consumed from each) or a dummy. Each
    per-outer intermediate is network-sorted real-first and cut to b slots.
    """
    if b < 1:
        raise ValueError(f"per-outer bound must be positive, got {b}")
    if caps is None:
        standalone = BudgetLedger()
        for tup in t1 + t2:
            if tup.is_view:
                standalone.register(tup.seq, b)
        caps = InvocationCaps(standalone, b)
    seqs = seqs or SeqCounter(max((t.seq for t in t1 + t2), default=-1) + 1)
    width = _join_width(t1, t2)

    out: list[SecureTuple] = []
    for u in t1:
        row: list[SecureTuple] = []
        matched = 0
        for v in t2:
            real = (u.is_view and v.is_view and u.key == v.key)
            if real:
                matched += 1
            if real and caps.remaining(u.seq) > 0 and caps.remaining(v.seq) > 0:
                caps.consume(u.seq)
                caps.consume(v.seq)
                row.append(_join_tuple(u, v, seqs, timestamp))
            else:
                row.append(make_dummy(seqs.take(), timestamp, width))
        row = network_sort(
            row, lambda r: ((0 if r.is_view else 1) << 61) | (r.seq & _SEQ_MASK),
            compare_counter)
        kept = row[:b]
        if drop_counter is not None:
            drop_counter[0] += matched - sum(1 for r in kept if r.is_view)
        out.extend(kept)
        for _ in range(b - len(kept)):
            out.append(make_dummy(seqs.take(), timestamp, width))
    return out


class OperatorKind(enum.Enum):
    FILTER = "Filter"
    SMJ = "SMJ"
    NLJ = "NLJ"


@dataclass
class TransformState:
    """Everything the transformation carries across invocations."""

    config: TruncationConfig
    operator: OperatorKind
    seqs: SeqCounter
    predicate: Callable[[SecureTuple], bool] | None = None
    ledger: BudgetLedger = field(default_factory=BudgetLedger)
    retained: tuple[deque, deque] = None  # past padded batches per owner
    produced_rows: list[SecureTuple] = field(default_factory=list)
    cap_dropped: int = 0

    def __post_init__(self):
        if self.retained is None:
            keep = max(0, self.config.retention_steps - 1)
            self.retained = (deque(maxlen=keep), deque(maxlen=keep))

    def produced_real(self) -> int:
        return len(self.produced_rows)


def transform_init(rand: ServerRandomness) -> CounterShares:
    """Zero counter, secret-shared with server-contributed randomness."""
    return share_in_protocol(0, *rand.share_pair(), seen=rand.seen_pairs)


def expected_output_size(operator: OperatorKind, t: int, c_r: int, n_owners: int,
                         config: TruncationConfig) -> int:
    """Padded |delta-view| at step t: a function of public parameters only."""
    if operator is OperatorKind.FILTER:
        return c_r
    r = config.retention_steps
    old1 = c_r * min(t - 1, r - 1)
    old2 = c_r * min(t - 1, r - 1)
    per_tuple = config.omega
    if operator is OperatorKind.SMJ:
        # new1 vs (old2 + new2), then old1 vs new2; slots per scanned tuple.
        return (c_r + old2 + c_r) * per_tuple + (old1 + c_r) * per_tuple
    # NLJ: slots per outer tuple.
    return c_r * per_tuple + old1 * per_tuple


def transform_step(t: int, new_batches: list[list[SecureTuple]],
                   cache: SecureCache, counter: CounterShares,
                   state: TransformState, rand: ServerRandomness,
                   transcript=None,
                   compare_counter: list | None = None) -> tuple[SecureCache, CounterShares]:
    """One invocation: truncate-transform new data, cache it, update the counter.

    Join operators also scan the retained padded batches of the partner owner;
    batches are retained for ceil(b / omega) invocations, after which their
    records are budget-retired, so the input sizes stay data-independent.
    """
    cfg = state.config
    for batch in new_batches:
        for tup in batch:
            if tup.is_view:
                state.ledger.register(tup.seq, cfg.b)

    caps = InvocationCaps(state.ledger, cfg.omega)
    drops = [0]
    if state.operator is OperatorKind.FILTER:
        if state.predicate is None:
            raise ValueError("filter operator requires a predicate")
        delta = trans_truncate_filter(new_batches[0], state.predicate, state.seqs, t)
        used = [tup for tup in new_batches[0] if tup.is_view]
    else:
        new1, new2 = new_batches[0], new_batches[1]
        old1 = [tup for batch in state.retained[0] for tup in batch]
        old2 = [tup for batch in state.retained[1] for tup in batch]
        if state.operator is OperatorKind.SMJ:
            d1 = trans_truncate_smj(new1, old2 + new2, cfg, state.ledger, caps,
                                    state.seqs, t, compare_counter, drops)
            d2 = trans_truncate_smj(old1, new2, cfg, state.ledger, caps,
                                    state.seqs, t, compare_counter, drops)
        else:
            d1 = trans_truncate_nlj(new1, old2 + new2, cfg.omega, caps,
                                    state.seqs, t, compare_counter, drops)
            d2 = trans_truncate_nlj(old1, new2, cfg.omega, caps,
                                    state.seqs, t, compare_counter, drops)
        delta = d1 + d2
        used = [tup for tup in new1 + new2 + old1 + old2 if tup.is_view]
    state.cap_dropped += drops[0]

    real_rows = [row for row in delta if row.is_view]
    state.produced_rows.extend(real_rows)

    c = recover(counter)
    c = (c + len(real_rows)) & RING_MASK
    counter = share_in_protocol(c, *rand.share_pair(), seen=rand.seen_pairs)
    cache = cache_append(cache, delta)

    if cfg.charge_policy is ChargePolicy.PER_INVOCATION_OMEGA:
        for rid in dict.fromkeys(tup.seq for tup in used):
            state.ledger.charge(rid, cfg.omega)
    else:
        for row in real_rows:
            for rid in row.sources:
                state.ledger.charge(rid, 1)

    if state.operator is not OperatorKind.FILTER:
        state.retained[0].append(new_batches[0])
        state.retained[1].append(new_batches[1])

    if transcript is not None:
        from .leakage import TranscriptKind
        for server in (0, 1):
            transcript.add(t, server, TranscriptKind.TRANSFORM_OUTPUT, len(delta))
            transcript.add(t, server, TranscriptKind.SHARE_RECEIVED, 0,
                           share_value=counter[server])
    return cache, counter
