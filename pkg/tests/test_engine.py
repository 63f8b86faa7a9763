import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learnedcc.engine import (GC_CHAIN_LIMIT, Key, KeyNotFound, LatchNotHeld,
                              Store, Version, VersionChain)


def k(name: str) -> Key:
    return Key("t", name.encode())


def make_chain(flags: list[bool]) -> VersionChain:
    """flags[i] says whether version i is committed; writers are 1-based."""
    chain = VersionChain(k("x"), Version(0, b"init", True))
    chain.versions = tuple(
        [Version(0, b"init", True)] +
        [Version(i + 1, b"p%d" % i, committed) for i, committed in enumerate(flags)]
    )
    return chain


def scan_latest_committed(chain):
    found = None
    for v in chain.versions:
        if v.committed:
            found = v
    return found


def test_latest_committed_skips_dirty():
    chain = make_chain([True, False])
    assert chain.latest_committed().writer == 1


def test_latest_committed_newest_wins():
    chain = make_chain([True, True])
    assert chain.latest_committed().writer == 2


def test_latest_any_is_tail():
    chain = make_chain([True, False])
    assert chain.latest_any().writer == 2
    chain2 = make_chain([True])
    assert chain2.latest_any().writer == 1


def test_random_chains_match_scan_oracle():
    rng = random.Random(7)
    for _ in range(1000):
        flags = [rng.random() < 0.6 for _ in range(rng.randint(0, 6))]
        chain = make_chain(flags)
        assert chain.latest_committed() is scan_latest_committed(chain)
        assert chain.latest_any() is chain.versions[-1]


def test_missing_key_raises():
    store = Store()
    store.load({k("a"): b"v"})
    with pytest.raises(KeyNotFound):
        store.read_latest_committed(k("zzz"))
    with pytest.raises(KeyNotFound):
        store.read_latest_any(k("zzz"))


def test_append_then_remove_is_identity():
    store = Store()
    store.load({k("a"): b"v"})
    before = store.chain(k("a")).versions
    store.lock_tuple(k("a"), 5)
    store.append_dirty(k("a"), 5, Version(5, b"d", False))
    store.remove_dirty(k("a"), 5)
    store.unlock_tuple(k("a"), 5)
    assert store.chain(k("a")).versions == before


def test_append_then_promote_leaves_one_committed_tail():
    store = Store()
    store.load({k("a"): b"v"})
    store.lock_tuple(k("a"), 5)
    store.append_dirty(k("a"), 5, Version(5, b"d", False))
    store.promote_commit(k("a"), 5, b"final")
    store.unlock_tuple(k("a"), 5)
    chain = store.chain(k("a"))
    tail = chain.versions[-1]
    assert tail.committed and tail.writer == 5 and tail.payload == b"final"
    assert all(v.committed or v.writer != 5 for v in chain.versions)


def test_second_dirty_write_replaces_first():
    store = Store()
    store.load({k("a"): b"v"})
    store.lock_tuple(k("a"), 5)
    store.append_dirty(k("a"), 5, Version(5, b"one", False))
    store.append_dirty(k("a"), 5, Version(5, b"two", False))
    store.unlock_tuple(k("a"), 5)
    dirty = [v for v in store.chain(k("a")).versions if not v.committed]
    assert len(dirty) == 1 and dirty[0].payload == b"two"


def test_mutation_requires_latch():
    store = Store()
    store.load({k("a"): b"v"})
    with pytest.raises(LatchNotHeld):
        store.append_dirty(k("a"), 5, Version(5, b"d", False))
    store.lock_tuple(k("a"), 5)
    with pytest.raises(LatchNotHeld):
        store.append_dirty(k("a"), 6, Version(6, b"d", False))
    store.unlock_tuple(k("a"), 5)


def test_remove_dirty_of_absent_version_is_noop():
    store = Store()
    store.load({k("a"): b"v"})
    before = store.chain(k("a")).versions
    store.lock_tuple(k("a"), 9)
    store.remove_dirty(k("a"), 9)
    store.unlock_tuple(k("a"), 9)
    assert store.chain(k("a")).versions == before


def test_reentrant_latch_is_a_programming_error():
    store = Store()
    store.load({k("a"): b"v"})
    store.lock_tuple(k("a"), 5)
    with pytest.raises(LatchNotHeld):
        store.lock_tuple(k("a"), 5)
    store.unlock_tuple(k("a"), 5)


def test_interleaved_mutations_match_serialized_replay():
    """Four writers mutate one chain under the latch in a recorded
    acquisition order; replaying the same ops single-threaded must give an
    identical chain."""
    store = Store()
    store.load({k("a"): b"v"})
    rng = random.Random(3)
    log = []
    log_lock = threading.Lock()

    def worker(txn_id):
        r = random.Random(txn_id)
        for i in range(50):
            op = r.choice(("append", "remove", "promote"))
            store.lock_tuple(k("a"), txn_id)
            with log_lock:
                log.append((txn_id, op, i))
            if op == "append":
                store.append_dirty(k("a"), txn_id, Version(txn_id, b"%d:%d" % (txn_id, i), False))
            elif op == "remove":
                store.remove_dirty(k("a"), txn_id)
            else:
                store.promote_commit(k("a"), txn_id, b"%d:%d" % (txn_id, i))
            store.unlock_tuple(k("a"), txn_id)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    concurrent_chain = [(v.writer, v.payload, v.committed)
                        for v in store.chain(k("a")).versions]

    replay = Store()
    replay.load({k("a"): b"v"})
    for txn_id, op, i in log:
        replay.lock_tuple(k("a"), txn_id)
        if op == "append":
            replay.append_dirty(k("a"), txn_id, Version(txn_id, b"%d:%d" % (txn_id, i), False))
        elif op == "remove":
            replay.remove_dirty(k("a"), txn_id)
        else:
            replay.promote_commit(k("a"), txn_id, b"%d:%d" % (txn_id, i))
        replay.unlock_tuple(k("a"), txn_id)
    replayed_chain = [(v.writer, v.payload, v.committed)
                      for v in replay.chain(k("a")).versions]
    assert concurrent_chain == replayed_chain


def test_lock_then_unlock_leaves_chain_free():
    store = Store()
    store.load({k("a"): b"v"})
    store.lock_tuple(k("a"), 1)
    store.unlock_tuple(k("a"), 1)
    assert not store.chain(k("a")).latch.locked()


def test_disjoint_lock_sets_do_not_block():
    store = Store()
    store.load({k("a"): b"v", k("b"): b"v"})
    store.lock_tuple(k("a"), 1)
    store.lock_tuple(k("b"), 2)   # must not block
    store.unlock_tuple(k("a"), 1)
    store.unlock_tuple(k("b"), 2)


def test_ordered_acquisition_never_deadlocks():
    """Two threads repeatedly lock overlapping key sets in global key
    order; a watchdog fails the test if they stop making progress."""
    keys = [k(c) for c in "abcdef"]
    store = Store()
    store.load({key: b"v" for key in keys})
    done = threading.Event()
    progress = [0, 0]

    def worker(idx, txn_id):
        rng = random.Random(txn_id)
        for i in range(10_000):
            subset = sorted(rng.sample(keys, rng.randint(2, 4)))
            for key in subset:
                store.lock_tuple(key, txn_id)
            for key in reversed(subset):
                store.unlock_tuple(key, txn_id)
            progress[idx] = i

    threads = [threading.Thread(target=worker, args=(i, i + 1), daemon=True)
               for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
        assert not t.is_alive(), f"deadlock watchdog fired, progress={progress}"


def test_gc_prunes_committed_history_beyond_limit():
    store = Store()
    store.load({k("a"): b"v"})
    for txn_id in range(1, GC_CHAIN_LIMIT + 5):
        store.lock_tuple(k("a"), txn_id)
        store.promote_commit(k("a"), txn_id, b"p%d" % txn_id)
        store.unlock_tuple(k("a"), txn_id)
    chain = store.chain(k("a"))
    assert len(chain.versions) <= GC_CHAIN_LIMIT + 1
    assert chain.latest_committed().writer == GC_CHAIN_LIMIT + 4


def test_waiter_queue_stays_ordered():
    chain = VersionChain(k("a"), Version(0, b"v", True))
    tokens = [chain.add_waiter(p, i) for i, p in enumerate([0.2, 0.9, 0.5, 0.9])]
    assert chain.waiters == sorted(chain.waiters)
    assert chain.waiter_count == 4
    # highest priority first, FIFO within equal priority
    assert [(-w[0], w[1]) for w in chain.waiters] == [
        (0.9, 1), (0.9, 3), (0.5, 2), (0.2, 0)]
    for tok in tokens:
        chain.remove_waiter(tok)
    assert chain.waiter_count == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.booleans()), max_size=12))
def test_no_duplicate_dirty_writers(ops):
    """Whatever the append/remove interleaving, a chain never holds two
    uncommitted versions from one writer."""
    chain = VersionChain(k("a"), Version(0, b"v", True))
    chain.latch.acquire()
    chain.latch_owner = 99
    for txn_id, do_append in ops:
        chain.latch_owner = txn_id
        if do_append:
            chain.append_dirty(txn_id, Version(txn_id, b"d", False))
        else:
            chain.remove_dirty(txn_id)
    writers = [v.writer for v in chain.versions if not v.committed]
    assert len(writers) == len(set(writers))
    chain.latch_owner = None
    chain.latch.release()
