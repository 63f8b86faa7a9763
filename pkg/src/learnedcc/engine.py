"""Multi-version in-memory tuple store.

Each key owns a version chain (oldest to newest).  Committed versions are
appended at commit time under the per-tuple latch; uncommitted ("dirty")
versions may be exposed mid-transaction so that concurrent transactions can
read them.  Chain snapshots are copy-on-write tuples, so tail reads never
need the latch and can never observe a torn version.
"""

from __future__ import annotations

import bisect
import itertools
import threading
import time
from typing import Iterable, NamedTuple, Optional

READ = 0
WRITE = 1

RUNNING = 0
COMMITTED = 1
ABORTED = 2

STORED_PROCEDURE = 0
INTERACTIVE = 1

INIT_WRITER = 0  # writer id of bootstrap versions loaded before any run

# committed versions older than the newest committed one are pruned once a
# chain grows past this many entries
GC_CHAIN_LIMIT = 8

HOTNESS_HALFLIFE_S = 0.100  # decaying conflict counter halves every 100 ms


class KeyNotFound(KeyError):
    """Read of a key that was never populated."""


class LatchNotHeld(RuntimeError):
    """Chain mutation attempted without holding the tuple latch."""


class Key(NamedTuple):
    table: str
    pk: bytes


class Version:
    # writer_ref carries the writer's runtime on dirty versions so readers
    # can register the dependency without an id lookup
    __slots__ = ("writer", "payload", "committed", "writer_ref")

    def __init__(self, writer: int, payload: bytes, committed: bool):
        self.writer = writer
        self.payload = payload
        self.committed = committed
        self.writer_ref = None

    def __repr__(self):
        state = "c" if self.committed else "d"
        return f"Version({self.writer},{state})"


class Operation:
    """One data access of a transaction.  priority is assigned per-access
    from the active agent function and may be raised afterwards."""

    __slots__ = ("tx", "key", "op_type", "op_index", "clean", "priority")

    def __init__(self, tx: int, key: Key, op_type: int, op_index: int):
        self.tx = tx
        self.key = key
        self.op_type = op_type
        self.op_index = op_index
        self.clean = False
        self.priority = 0.5

    @property
    def is_write(self) -> bool:
        return self.op_type == WRITE


class PendingWrite:
    __slots__ = ("op", "payload", "exposed")

    def __init__(self, op: Operation, payload: bytes):
        self.op = op
        self.payload = payload
        self.exposed = False


class AccessEntry:
    """Registry record: one running transaction's accesses to one chain."""

    __slots__ = ("owner", "ops")

    def __init__(self, owner: "Transaction"):
        self.owner = owner
        self.ops: list[Operation] = []


class Transaction:
    """Runtime transaction state.

    rs holds (key, writer_id, payload) triples for every read taken from
    the store; validate is the not-yet-revalidated subset of rs.  dep maps
    the ids of transactions this one depends on to their runtimes;
    dirty_dep marks the subset reached through dirty reads (only those
    cascade aborts).
    """

    __slots__ = (
        "id", "txn_type", "timestamp", "mode", "status",
        "rs", "ws", "ws_keys", "dep", "dirty_dep", "validate",
        "executed_count", "dependents", "finished", "waiting_for",
        "must_abort", "func", "cc_fn", "plan", "touched", "dirty_readers",
        "op_priorities", "events_log", "seq",
    )

    def __init__(self, txn_id: int, txn_type: int, timestamp: int, mode: int):
        self.id = txn_id
        self.txn_type = txn_type
        self.timestamp = timestamp
        self.mode = mode
        self.status = RUNNING
        self.rs: list[tuple[Key, int, bytes]] = []
        self.ws: list[PendingWrite] = []
        self.ws_keys: dict[Key, PendingWrite] = {}
        self.dep: dict[int, Transaction] = {}
        self.dirty_dep: set[int] = set()
        self.validate: list[tuple[Key, int, bytes]] = []
        self.executed_count = 0
        self.dependents = 0
        self.finished = threading.Event()
        self.waiting_for: tuple = ()
        self.must_abort = False
        self.func = None
        self.cc_fn = None
        self.plan: list[Operation] = []
        self.touched: set = set()
        self.dirty_readers: set[Transaction] = set()
        self.op_priorities: list[float] = []
        # ordered access events for history recording; see oracle module
        self.events_log: list[tuple] = []
        self.seq = -1

    @property
    def is_running(self) -> bool:
        return self.status == RUNNING

    def add_dep(self, other: "Transaction", dirty: bool) -> None:
        if other.id == self.id:
            return
        if other.id not in self.dep:
            self.dep[other.id] = other
            other.dependents += 1
        if dirty:
            self.dirty_dep.add(other.id)
            other.dirty_readers.add(self)


class VersionChain:
    """Per-key chain plus the latch, the conflict registry, the waiter
    bookkeeping and the decaying hotness counter.

    versions is an immutable tuple replaced wholesale under the latch;
    unlatched readers grab the reference once and scan it safely.
    """

    __slots__ = (
        "key", "versions", "latch", "latch_owner",
        "accessors", "waiters", "_hot", "_hot_stamp",
    )

    def __init__(self, key: Key, first: Version):
        self.key = key
        self.versions: tuple[Version, ...] = (first,)
        self.latch = threading.Lock()
        self.latch_owner: Optional[int] = None
        self.accessors: dict[int, AccessEntry] = {}
        # (neg priority, arrival seq) kept sorted; contents only, wake-ups
        # go through transaction events
        self.waiters: list[tuple[float, int]] = []
        self._hot = 0.0
        self._hot_stamp = time.monotonic()

    # -- snapshot reads (no latch) --------------------------------------

    def latest_committed(self) -> Version:
        versions = self.versions
        for i in range(len(versions) - 1, -1, -1):
            v = versions[i]
            if v.committed:
                return v
        raise KeyNotFound(self.key)  # pragma: no cover - chains start committed

    def latest_any(self) -> Version:
        return self.versions[-1]

    def dirty_version_of(self, txn_id: int) -> Optional[Version]:
        for v in self.versions:
            if not v.committed and v.writer == txn_id:
                return v
        return None

    # -- mutations (latch required) --------------------------------------

    def _check_latch(self, txn_id: int) -> None:
        if self.latch_owner != txn_id:
            raise LatchNotHeld(f"txn {txn_id} does not hold latch on {self.key}")

    def append_dirty(self, txn_id: int, version: Version) -> None:
        self._check_latch(txn_id)
        versions = self.versions
        old = self.dirty_version_of(version.writer)
        if old is not None:
            versions = tuple(v for v in versions if v is not old)
        self.versions = versions + (version,)

    def promote_commit(self, txn_id: int, payload: bytes) -> None:
        self._check_latch(txn_id)
        kept = [v for v in self.versions if v.committed or v.writer != txn_id]
        kept.append(Version(txn_id, payload, True))
        if len(kept) > GC_CHAIN_LIMIT:
            newest_committed = None
            for v in reversed(kept):
                if v.committed:
                    newest_committed = v
                    break
            kept = [v for v in kept if not v.committed or v is newest_committed]
        self.versions = tuple(kept)

    def remove_dirty(self, txn_id: int) -> None:
        self._check_latch(txn_id)
        old = self.dirty_version_of(txn_id)
        if old is not None:
            self.versions = tuple(v for v in self.versions if v is not old)

    # -- conflict registry (GIL-atomic dict ops; readers snapshot) -------

    def register_access(self, txn: Transaction, op: Operation) -> None:
        entry = self.accessors.get(txn.id)
        if entry is None:
            entry = AccessEntry(txn)
            self.accessors[txn.id] = entry
        entry.ops.append(op)
        txn.touched.add(self)

    def deregister(self, txn_id: int) -> None:
        self.accessors.pop(txn_id, None)

    def conflicting_accessors(self, txn: Transaction, op: Operation):
        """Executed accesses by other running transactions that conflict
        with op (same key, at least one side a write)."""
        out = []
        want_all = op.op_type == WRITE
        for tid, entry in list(self.accessors.items()):
            if tid == txn.id or not entry.owner.is_running:
                continue
            for other in entry.ops:
                if want_all or other.op_type == WRITE:
                    out.append((entry.owner, other))
        return out

    def dirty_reader_txns(self, exclude_id: int):
        """Running transactions that dirty-read this chain's tail."""
        out = []
        for tid, entry in list(self.accessors.items()):
            if tid == exclude_id or not entry.owner.is_running:
                continue
            for other in entry.ops:
                if other.op_type == READ and not other.clean:
                    out.append(entry.owner)
                    break
        return out

    # -- waiter bookkeeping ----------------------------------------------

    def add_waiter(self, priority: float, arrival: int) -> tuple[float, int]:
        token = (-priority, arrival)
        bisect.insort(self.waiters, token)
        return token

    def remove_waiter(self, token: tuple[float, int]) -> None:
        i = bisect.bisect_left(self.waiters, token)
        if i < len(self.waiters) and self.waiters[i] == token:
            del self.waiters[i]

    @property
    def waiter_count(self) -> int:
        return len(self.waiters)

    # -- hotness -----------------------------------------------------------

    def note_conflict(self) -> None:
        self._hot = self.hotness() + 1.0
        self._hot_stamp = time.monotonic()

    def hotness(self) -> int:
        elapsed = time.monotonic() - self._hot_stamp
        if elapsed <= 0:
            return int(self._hot)
        halvings = elapsed / HOTNESS_HALFLIFE_S
        if halvings >= 64:
            return 0
        return int(self._hot * (0.5 ** halvings))


class Store:
    """Keyed collection of version chains.  Keys must be populated via
    load() before use; reads of unknown keys raise KeyNotFound."""

    def __init__(self):
        self._chains: dict[Key, VersionChain] = {}
        self.txn_ids = itertools.count(1)
        self.timestamps = itertools.count(1)
        self.seq = itertools.count(1)
        self.waiter_arrivals = itertools.count(1)

    def load(self, items: dict[Key, bytes]) -> None:
        for key, payload in items.items():
            self._chains[key] = VersionChain(key, Version(INIT_WRITER, payload, True))

    def keys(self) -> Iterable[Key]:
        return self._chains.keys()

    def chain(self, key: Key) -> VersionChain:
        try:
            return self._chains[key]
        except KeyError:
            raise KeyNotFound(key) from None

    # -- reads ------------------------------------------------------------

    def read_latest_committed(self, key: Key) -> Version:
        return self.chain(key).latest_committed()

    def read_latest_any(self, key: Key) -> Version:
        return self.chain(key).latest_any()

    # -- latched mutations -------------------------------------------------

    def append_dirty(self, key: Key, txn_id: int, version: Version) -> None:
        self.chain(key).append_dirty(txn_id, version)

    def promote_commit(self, key: Key, txn_id: int, payload: bytes) -> None:
        self.chain(key).promote_commit(txn_id, payload)

    def remove_dirty(self, key: Key, txn_id: int) -> None:
        self.chain(key).remove_dirty(txn_id)

    def lock_tuple(self, key: Key, txn_id: int) -> None:
        chain = self.chain(key)
        if chain.latch_owner == txn_id:
            raise LatchNotHeld(f"re-entrant latch acquisition by txn {txn_id}")
        chain.latch.acquire()
        chain.latch_owner = txn_id

    def unlock_tuple(self, key: Key, txn_id: int) -> None:
        chain = self.chain(key)
        chain._check_latch(txn_id)
        chain.latch_owner = None
        chain.latch.release()

    def dump(self) -> dict[Key, tuple[int, bytes]]:
        """Latest committed (writer, payload) per key; used by the replay
        checker for initial snapshots and final-state comparison."""
        out = {}
        for key, chain in self._chains.items():
            v = chain.latest_committed()
            out[key] = (v.writer, v.payload)
        return out
