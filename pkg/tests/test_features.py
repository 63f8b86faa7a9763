import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learnedcc import features
from learnedcc.engine import (READ, STORED_PROCEDURE, Operation, Transaction,
                              Version, VersionChain, WRITE)
from learnedcc.features import (AGE_NO_CONFLICT, AGE_OLDER, AGE_YOUNGER,
                                FeatureSelector, FeatureSpec, collect, select)
from tests.conftest import key


def fresh_txn(txn_type=1, timestamp=10):
    return Transaction(1, txn_type, timestamp, STORED_PROCEDURE)


def fresh_chain():
    return VersionChain(key("A"), Version(0, b"init", True))


def test_collect_fresh_transaction():
    txn = fresh_txn()
    op = Operation(txn.id, key("A"), READ, 1)
    x = collect(txn, op, fresh_chain())
    assert x[1] == 1      # first operation
    assert x[4] == 0      # no dependencies
    assert x[7] == 0      # empty write set


def test_collect_counts_progress_and_deps():
    txn = fresh_txn()
    txn.executed_count = 3
    other1, other2 = fresh_txn(), fresh_txn()
    other1.id, other2.id = 2, 3
    txn.add_dep(other1, dirty=True)
    txn.add_dep(other2, dirty=False)
    op = Operation(txn.id, key("A"), WRITE, 4)
    x = collect(txn, op, fresh_chain())
    assert x[1] == 4 and x[4] == 2
    assert other1.dependents == 1


def test_hotness_decay_matches_sequential_recurrence(monkeypatch):
    """Drive the clock manually: 100 conflicts, then idle intervals; the
    counter must track count -> count/2 per elapsed half-life, computed
    here by replaying the recurrence."""
    now = [1000.0]
    monkeypatch.setattr(time, "monotonic", lambda: now[0])
    chain = fresh_chain()
    chain._hot_stamp = now[0]
    for _ in range(100):
        chain.note_conflict()
    assert chain.hotness() == 100

    expected = 100.0
    for _ in range(3):
        now[0] += features.__dict__.get("HOTNESS_HALFLIFE_S", 0.1) or 0.1
        expected = expected / 2.0
        assert chain.hotness() == int(expected)


def test_relative_age_against_oldest_conflicter():
    chain = fresh_chain()
    me = fresh_txn(timestamp=50)
    op = Operation(me.id, key("A"), WRITE, 1)
    assert features.relative_age(me, op, chain) == AGE_NO_CONFLICT

    owner_old = Transaction(2, 1, 10, STORED_PROCEDURE)
    owner_young = Transaction(3, 1, 90, STORED_PROCEDURE)
    chain.register_access(owner_old, Operation(2, key("A"), WRITE, 1))
    chain.register_access(owner_young, Operation(3, key("A"), WRITE, 1))
    assert features.relative_age(me, op, chain) == AGE_YOUNGER   # 50 > 10

    me_oldest = Transaction(4, 1, 5, STORED_PROCEDURE)
    op2 = Operation(4, key("A"), WRITE, 1)
    assert features.relative_age(me_oldest, op2, chain) == AGE_OLDER

    # reads do not conflict with reads
    chain2 = fresh_chain()
    reader = Transaction(5, 1, 1, STORED_PROCEDURE)
    chain2.register_access(reader, Operation(5, key("A"), READ, 1))
    read_op = Operation(me.id, key("A"), READ, 1)
    assert features.relative_age(me, read_op, chain2) == AGE_NO_CONFLICT


def test_select_single_feature_is_txn_type():
    sel = features.selector_type(5)
    for t in range(1, 6):
        x = (t, 1, 0, 0, 0, 0, 0, 0, 0)
        assert select(sel, x) == (t - 1,)


def test_log_transform_at_zero():
    spec = FeatureSpec(True, features.LOG, 8, 0, 1024)
    assert spec.bucket_of(0) == 0


def test_typeop_selector_spans_full_grid():
    sel = features.selector_type_op(5, 16)
    assert sel.cardinality() == 5 * 16
    seen = {select(sel, (t, i, 0, 0, 0, 0, 0, 0, 0))
            for t in range(1, 6) for i in range(1, 17)}
    assert len(seen) == 80


def test_selector_requires_a_feature():
    with pytest.raises(features.SelectorError):
        FeatureSelector(id="none", specs=features._specs({}))


def test_selector_cardinality_cap():
    big = {i: FeatureSpec(True, features.LINEAR, 8, 0, 8) for i in range(1, 8)}
    with pytest.raises(features.SelectorError):
        FeatureSelector(id="big", specs=features._specs(big))


@settings(max_examples=200, deadline=None)
@given(
    a=st.integers(0, 1000), b=st.integers(0, 1000),
    transform=st.sampled_from(features.TRANSFORMS),
    buckets=st.integers(1, 16), hi=st.integers(1, 512),
)
def test_bucketization_is_monotone(a, b, transform, buckets, hi):
    spec = FeatureSpec(True, transform, buckets, 0, hi)
    lo_v, hi_v = min(a, b), max(a, b)
    assert spec.bucket_of(lo_v) <= spec.bucket_of(hi_v)
    assert 0 <= spec.bucket_of(a) < buckets


def test_select_is_deterministic_and_total():
    sel = features.selector_type_op(3, 8)
    x = (2, 5, 1, 17, 3, 2, 4, 1, AGE_OLDER)
    assert select(sel, x) == select(sel, x)
    huge = (3, 800, 1, 10**6, 99, 99, 99, 99, AGE_YOUNGER)
    state = select(sel, huge)
    assert all(0 <= b for b in state)


def test_fused_state_fn_matches_select_of_collect():
    for sel in (features.selector_type_op(4, 12), features.selector_age(),
                features.selector_hotness(), features.selector_type(4)):
        fn = features.make_state_fn(sel)
        txn = fresh_txn(txn_type=3, timestamp=5)
        txn.executed_count = 6
        chain = fresh_chain()
        other = Transaction(2, 1, 1, STORED_PROCEDURE)
        chain.register_access(other, Operation(2, key("A"), WRITE, 1))
        for op_type in (READ, WRITE):
            op = Operation(txn.id, key("A"), op_type, 7)
            assert fn(txn, op, chain) == select(sel, collect(txn, op, chain))


def test_collect_takes_no_latches():
    chain = fresh_chain()
    chain.latch.acquire()    # collection must not end up here
    chain.latch_owner = 42
    txn = fresh_txn()
    op = Operation(txn.id, key("A"), READ, 1)
    collect(txn, op, chain)  # would deadlock if it touched the latch
    chain.latch_owner = None
    chain.latch.release()


def test_selector_serialization_round_trip():
    for sel in (features.selector_type_op(5, 16), features.selector_age(),
                features.selector_hotness(4)):
        text = features.serialize_selector(sel)
        back = features.deserialize_selector(text)
        assert back == sel
        assert features.serialize_selector(back) == text


def test_selector_deserialize_errors():
    with pytest.raises(features.SelectorError):
        features.deserialize_selector("not a selector\n")
    good = features.serialize_selector(features.selector_age())
    truncated = "\n".join(good.splitlines()[:-1])
    with pytest.raises(features.SelectorError):
        features.deserialize_selector(truncated)


def test_calibrate_ranges_caps_at_p99():
    sel = features.selector_hotness(8)
    samples = [(1, 1, 0, v, 0, 0, 0, 0, 0) for v in range(200)]
    cal = features.calibrate_ranges(sel, samples)
    assert cal.specs[3].hi == 198    # p99 of 0..199
    assert cal.specs[3].include
