import numpy as np
import pytest

from dpviewsim.obliv import SecureCache, SecureTuple, SeqCounter
from dpviewsim.randomness import ServerRandomness
from dpviewsim.sharing import recover
from dpviewsim.transform import (BudgetLedger, ChargePolicy, OperatorKind,
                                 TransformState, TruncationConfig,
                                 expected_output_size, trans_truncate_filter,
                                 trans_truncate_nlj, trans_truncate_smj,
                                 transform_init, transform_step)


def rec(seq, key, flag=1):
    return SecureTuple(key=key, attrs=(flag,), is_view=True, seq=seq)


def pad(seq):
    return SecureTuple(key=0, attrs=(0,), is_view=False, seq=seq)


# ---------------------------------------------------------------------------
# Independent oracles: plain-python, no networks, no padding, no slots.

def brute_force_pairs(t1, t2):
    """Every key-matching (t1.seq, t2.seq) pair, no truncation."""
    return [(a.seq, b.seq) for a in t1 if a.is_view
            for b in t2 if b.is_view and a.key == b.key]


def greedy_cap_pairs(t1, t2, omega):
    """Brute-force cross product in merged scan order, greedy both-side cap.

    Scan the key-sorted union (t1 before t2 on ties); each accessed record
    joins earlier records of the other table while both sides still hold
    contribution slots, at most omega per access.
    """
    items = sorted([(t.key, 0, t.seq, t) for t in t1 if t.is_view] +
                   [(t.key, 1, t.seq, t) for t in t2 if t.is_view])
    caps: dict[int, int] = {}
    pairs = []
    group = None
    seen = {0: [], 1: []}
    for key, origin, _, t in items:
        if key != group:
            group = key
            seen = {0: [], 1: []}
        emitted = 0
        for p in seen[1 - origin]:
            if emitted == omega or caps.get(t.seq, omega) == 0:
                break
            if caps.get(p.seq, omega) == 0:
                continue
            caps[t.seq] = caps.get(t.seq, omega) - 1
            caps[p.seq] = caps.get(p.seq, omega) - 1
            pairs.append((t.seq, p.seq) if origin == 0 else (p.seq, t.seq))
            emitted += 1
        seen[origin].append(t)
    return pairs


def real_pairs(output):
    return [row.sources for row in output if row.is_view]


# ---------------------------------------------------------------------------
# Filter.

def test_filter_all_true():
    batch = [rec(i, key=i) for i in range(5)]
    out = trans_truncate_filter(batch, lambda t: True)
    assert len(out) == 5
    assert all(r.is_view for r in out)


def test_filter_all_false():
    batch = [rec(i, key=i) for i in range(5)]
    out = trans_truncate_filter(batch, lambda t: False)
    assert len(out) == 5
    assert not any(r.is_view for r in out)


def test_filter_matches_plaintext_selectivity():
    rng = np.random.default_rng(5)
    batch = [SecureTuple(key=i, attrs=(int(rng.integers(2)),), is_view=True, seq=i)
             for i in range(40)]
    batch += [pad(100 + i) for i in range(10)]
    pred = lambda t: t.attrs[0] == 1
    expected = sum(1 for t in batch if t.is_view and pred(t))  # oracle
    out = trans_truncate_filter(batch, pred)
    assert len(out) == len(batch)
    assert sum(r.is_view for r in out) == expected
    # input dummies never become view rows
    dummy_out = out[40:]
    assert not any(r.is_view for r in dummy_out)


def test_filter_keeps_payload():
    batch = [rec(3, key=9, flag=7)]
    out = trans_truncate_filter(batch, lambda t: True)
    assert out[0].key == 9 and out[0].attrs == (7,)
    assert out[0].sources == (3,)


# ---------------------------------------------------------------------------
# Sort-merge join.

def smj(t1, t2, omega, b=None):
    cfg = TruncationConfig(omega, b if b is not None else omega * 8)
    return trans_truncate_smj(t1, t2, cfg, BudgetLedger())


def test_smj_worked_example():
    # 2 x 3 rows sharing one key with per-tuple bound 2: brute force gives 6,
    # the cap removes 2, survivors in scan order.
    t1 = [rec(0, key=1), rec(1, key=1)]
    t2 = [rec(2, key=1), rec(3, key=1), rec(4, key=1)]
    out = smj(t1, t2, omega=2)
    got = real_pairs(out)
    assert len(brute_force_pairs(t1, t2)) == 6
    assert got == [(0, 2), (1, 2), (0, 3), (1, 3)]
    assert got == greedy_cap_pairs(t1, t2, 2)
    assert len(out) == (2 + 3) * 2  # omega slots per scanned tuple


def test_smj_disjoint_keys_all_dummy():
    t1 = [rec(0, key=1), rec(1, key=2)]
    t2 = [rec(2, key=3), rec(3, key=4)]
    out = smj(t1, t2, omega=2)
    assert real_pairs(out) == []
    assert len(out) == 8


def test_smj_one_to_one_equals_brute_force():
    rng = np.random.default_rng(13)
    keys = rng.permutation(50)[:20]
    t1 = [rec(i, key=int(keys[i])) for i in range(10)]
    t2 = [rec(100 + i, key=int(keys[i])) for i in range(10)]
    out = smj(t1, t2, omega=1)
    assert sorted(real_pairs(out)) == sorted(brute_force_pairs(t1, t2))


def test_smj_matches_greedy_oracle_random():
    rng = np.random.default_rng(17)
    for trial in range(50):
        n1, n2 = int(rng.integers(0, 9)), int(rng.integers(0, 9))
        t1 = [rec(i, key=int(rng.integers(1, 5))) for i in range(n1)]
        t2 = [rec(100 + i, key=int(rng.integers(1, 5))) for i in range(n2)]
        omega = int(rng.integers(1, 4))
        out = smj(t1, t2, omega)
        assert real_pairs(out) == greedy_cap_pairs(t1, t2, omega)
        assert len(out) == (n1 + n2) * omega


def test_smj_respects_ledger_budget():
    # A record with one unit of lifetime budget left joins at most once even
    # when omega allows more.
    t1 = [rec(0, key=1)]
    t2 = [rec(1, key=1), rec(2, key=1)]
    cfg = TruncationConfig(2, 4)
    ledger = BudgetLedger()
    ledger.register(0, 4)
    ledger.charge(0, 3)  # one unit left
    out = trans_truncate_smj(t1, t2, cfg, ledger)
    assert real_pairs(out) == [(0, 1)]


def test_smj_output_size_data_independent():
    caps = [0]
    t1a = [rec(i, key=1) for i in range(4)]
    t2a = [rec(10 + i, key=1) for i in range(4)]
    t1b = [rec(i, key=i) for i in range(4)]
    t2b = [rec(10 + i, key=50 + i) for i in range(4)]
    ca, cb = [0], [0]
    outa = trans_truncate_smj(t1a, t2a, TruncationConfig(2, 8), BudgetLedger(),
                              compare_counter=ca)
    outb = trans_truncate_smj(t1b, t2b, TruncationConfig(2, 8), BudgetLedger(),
                              compare_counter=cb)
    assert len(outa) == len(outb) == 16
    assert ca[0] == cb[0]


# ---------------------------------------------------------------------------
# Nested-loop join.

def test_nlj_hand_trace():
    # One outer row, four matching inner rows, bound 2: the inner scan joins
    # until the outer's budget is gone; the per-outer cut keeps 2 slots.
    t1 = [rec(0, key=7)]
    t2 = [rec(i + 1, key=7) for i in range(4)]
    out = trans_truncate_nlj(t1, t2, b=2)
    assert len(out) == 1 * 2
    assert real_pairs(out) == [(0, 1), (0, 2)]


def test_nlj_large_bound_equals_brute_force():
    rng = np.random.default_rng(19)
    t1 = [rec(i, key=int(rng.integers(1, 4))) for i in range(6)]
    t2 = [rec(100 + i, key=int(rng.integers(1, 4))) for i in range(6)]
    out = trans_truncate_nlj(t1, t2, b=50)
    assert sorted(real_pairs(out)) == sorted(brute_force_pairs(t1, t2))
    assert len(out) == 6 * 50


def test_nlj_empty_inner_all_dummy():
    t1 = [rec(i, key=1) for i in range(3)]
    out = trans_truncate_nlj(t1, [], b=2)
    assert len(out) == 6
    assert not any(r.is_view for r in out)


def test_nlj_consumes_both_sides():
    # Two outers sharing one inner with bound 1: the inner's budget is spent
    # by the first outer.
    t1 = [rec(0, key=1), rec(1, key=1)]
    t2 = [rec(2, key=1)]
    out = trans_truncate_nlj(t1, t2, b=1)
    assert real_pairs(out) == [(0, 2)]
    assert len(out) == 2


# ---------------------------------------------------------------------------
# Truncation stability (single-row deletions).

def _instance(rng, omega):
    """Random join instance whose per-record multiplicity stays within omega.

    Group dimensions are capped at omega on both sides; an over-cap group
    forces any bounded operator to switch surviving pairs under deletion, so
    the per-row guarantee is only attainable in this regime.
    """
    t1, t2 = [], []
    seq = 0
    for key in range(1, int(rng.integers(2, 6))):
        d1 = int(rng.integers(0, omega + 1))
        d2 = int(rng.integers(0, omega + 1))
        for _ in range(d1):
            t1.append(rec(seq, key))
            seq += 1
        for _ in range(d2):
            t2.append(rec(1000 + seq, key))
            seq += 1
        if len(t1) >= 10 or len(t2) >= 10:
            break
    return t1[:10], t2[:10]


@pytest.mark.parametrize("omega", [1, 2, 3])
def test_smj_single_deletion_stability(omega):
    rng = np.random.default_rng(100 + omega)
    for _ in range(70):
        t1, t2 = _instance(rng, omega)
        base = set(real_pairs(smj(t1, t2, omega)))
        for side, table in ((0, t1), (1, t2)):
            for i in range(len(table)):
                d1 = t1[:i] + t1[i + 1:] if side == 0 else t1
                d2 = t2[:i] + t2[i + 1:] if side == 1 else t2
                dropped = set(real_pairs(smj(d1, d2, omega)))
                assert len(base ^ dropped) <= omega


@pytest.mark.parametrize("omega", [1, 2, 3])
def test_nlj_single_deletion_stability(omega):
    rng = np.random.default_rng(200 + omega)
    for _ in range(40):
        t1, t2 = _instance(rng, omega)
        base = set(real_pairs(trans_truncate_nlj(t1, t2, omega)))
        for side, table in ((0, t1), (1, t2)):
            for i in range(len(table)):
                d1 = t1[:i] + t1[i + 1:] if side == 0 else t1
                d2 = t2[:i] + t2[i + 1:] if side == 1 else t2
                dropped = set(real_pairs(trans_truncate_nlj(d1, d2, omega)))
                assert len(base ^ dropped) <= omega


@pytest.mark.parametrize("omega", [1, 2, 3])
def test_smj_count_stability_unrestricted(omega):
    # When caps bind, the surviving pair set may switch, but the real-output
    # cardinality still moves by at most omega per deleted row.
    rng = np.random.default_rng(300 + omega)
    for _ in range(40):
        n1, n2 = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        t1 = [rec(i, key=int(rng.integers(1, 3))) for i in range(n1)]
        t2 = [rec(100 + i, key=int(rng.integers(1, 3))) for i in range(n2)]
        base = len(real_pairs(smj(t1, t2, omega)))
        for i in range(n1):
            n = len(real_pairs(smj(t1[:i] + t1[i + 1:], t2, omega)))
            assert abs(base - n) <= omega
        for i in range(n2):
            n = len(real_pairs(smj(t1, t2[:i] + t2[i + 1:], omega)))
            assert abs(base - n) <= omega


# ---------------------------------------------------------------------------
# transform_step.

def make_state(operator, omega=1, b=2, policy=ChargePolicy.PER_INVOCATION_OMEGA,
               predicate=None):
    return TransformState(config=TruncationConfig(omega, b, policy),
                          operator=operator, seqs=SeqCounter(10_000),
                          predicate=predicate)


def batchify(recs, c_r, seq0):
    out = list(recs)
    i = 0
    while len(out) < c_r:
        out.append(pad(seq0 + i))
        i += 1
    return out


def test_initial_counter_recovers_zero():
    rand = ServerRandomness(1)
    counter = transform_init(rand)
    assert recover(counter) == 0


def test_counter_increases_by_real_count():
    rand = ServerRandomness(2)
    state = make_state(OperatorKind.FILTER, predicate=lambda t: t.attrs[0] == 1)
    counter = transform_init(rand)
    cache = SecureCache()
    batch = [rec(0, 1, flag=1), rec(1, 2, flag=1), rec(2, 3, flag=1),
             rec(3, 4, flag=0), pad(4)]
    cache, counter = transform_step(1, [batch], cache, counter, state, rand)
    assert recover(counter) == 3
    assert cache.real_count() == 3  # plaintext recount agrees


def test_counter_fidelity_across_steps():
    rand = ServerRandomness(3)
    state = make_state(OperatorKind.FILTER, predicate=lambda t: True)
    counter = transform_init(rand)
    cache = SecureCache()
    rng = np.random.default_rng(0)
    total = 0
    for t in range(1, 12):
        n_real = int(rng.integers(0, 4))
        batch = batchify([rec(100 * t + i, key=i) for i in range(n_real)], 5,
                         100 * t + 50)
        cache, counter = transform_step(t, [batch], cache, counter, state, rand)
        total += n_real
        assert recover(counter) == total == cache.real_count()


def test_retirement_after_budget_exhaustion():
    # b=4, omega=2: a record is usable for exactly two invocations.
    rand = ServerRandomness(4)
    state = make_state(OperatorKind.SMJ, omega=2, b=4)
    counter = transform_init(rand)
    cache = SecureCache()
    lead = rec(0, key=9)  # arrives in step 1 on side A
    batches = [
        ([lead] + [pad(1)], [pad(2), pad(3)]),
        ([pad(10), pad(11)], [rec(12, key=9), pad(13)]),   # joins: budget 4->2->0
        ([pad(20), pad(21)], [rec(22, key=9), pad(23)]),   # lead retired+evicted
    ]
    for t, (ba, bb) in enumerate(batches, start=1):
        cache, counter = transform_step(t, [ba, bb], cache, counter, state, rand)
    assert state.ledger.retired(0)
    joined_with_lead = [row for row in state.produced_rows if 0 in row.sources]
    assert len(joined_with_lead) == 1  # only the step-2 partner
    assert state.ledger.retired(0)
    # Step-3 partner found no surviving counterpart.
    assert not any(22 in row.sources for row in state.produced_rows)


def test_invocation_count_matches_retention():
    cfg = TruncationConfig(3, 10)
    assert cfg.retention_steps == 4  # ceil(10/3)
    rand = ServerRandomness(5)
    state = make_state(OperatorKind.SMJ, omega=3, b=10)
    counter = transform_init(rand)
    cache = SecureCache()
    target = rec(0, key=1)
    cache, counter = transform_step(1, [[target, pad(1)], [pad(2), pad(3)]],
                                    cache, counter, state, rand)
    remaining = [state.ledger.remaining(0)]
    for t in range(2, 7):
        cache, counter = transform_step(
            t, [[pad(t * 10), pad(t * 10 + 1)], [pad(t * 10 + 2), pad(t * 10 + 3)]],
            cache, counter, state, rand)
        remaining.append(state.ledger.remaining(0))
    # charged omega per invocation while retained: 10 -> 7 -> 4 -> 1 -> 0 -> 0
    assert remaining == [7, 4, 1, 0, 0, 0]


def test_per_output_row_policy_charges_per_join():
    rand = ServerRandomness(6)
    state = make_state(OperatorKind.NLJ, omega=2, b=4,
                       policy=ChargePolicy.PER_OUTPUT_ROW)
    counter = transform_init(rand)
    cache = SecureCache()
    ba = [rec(0, key=5), pad(1)]
    bb = [rec(2, key=5), pad(3)]
    cache, counter = transform_step(1, [ba, bb], cache, counter, state, rand)
    # one join emitted; each side pays one unit, not omega
    assert state.ledger.remaining(0) == 3
    assert state.ledger.remaining(2) == 3


def test_output_sizes_match_public_formula():
    for op in (OperatorKind.SMJ, OperatorKind.NLJ):
        rand = ServerRandomness(7)
        state = make_state(op, omega=2, b=4)
        counter = transform_init(rand)
        cache = SecureCache()
        rng = np.random.default_rng(9)
        prev_len = 0
        for t in range(1, 6):
            ba = batchify([rec(1000 * t + i, key=int(rng.integers(1, 4)))
                           for i in range(int(rng.integers(0, 3)))], 3, 1000 * t + 500)
            bb = batchify([rec(2000 * t + i, key=int(rng.integers(1, 4)))
                           for i in range(int(rng.integers(0, 3)))], 3, 2000 * t + 500)
            cache, counter = transform_step(t, [ba, bb], cache, counter, state, rand)
            delta_len = len(cache) - prev_len
            prev_len = len(cache)
            assert delta_len == expected_output_size(op, t, 3, 2, state.config)


def test_lifetime_budget_never_exceeded_small_run():
    rand = ServerRandomness(8)
    state = make_state(OperatorKind.SMJ, omega=2, b=4)
    counter = transform_init(rand)
    cache = SecureCache()
    rng = np.random.default_rng(21)
    seq = 0
    for t in range(1, 30):
        ba, bb = [], []
        for _ in range(2):
            ba.append(rec(seq, key=int(rng.integers(1, 3)))); seq += 1
            bb.append(rec(seq, key=int(rng.integers(1, 3)))); seq += 1
        cache, counter = transform_step(t, [ba, bb], cache, counter, state, rand)
    contributions: dict[int, int] = {}
    for row in state.produced_rows:
        for rid in row.sources:
            contributions[rid] = contributions.get(rid, 0) + 1
    assert contributions, "run produced no joins"
    assert max(contributions.values()) <= 4
