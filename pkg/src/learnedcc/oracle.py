"""Serializability checking by serial replay.

A recorded run passes when replaying its committed transactions one at a
time, in serialization-point order, reproduces every read (same writer and
payload, own-writes included) and ends in the same final store.  Read
identity is compared by (writer, key, payload) rather than payload alone,
so a blind write landing the same bytes cannot mask an anomaly, and a
writer overwriting its own exposed value cannot hide one either.

Also provides the committed-transaction dependency-graph acyclicity check
used to validate pipelined executions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from graphlib import CycleError, TopologicalSorter

from .engine import Key

EV_READ = "r"
EV_WRITE = "w"
EV_FUNC = "f"


class IncompleteHistory(RuntimeError):
    pass


class TxnRecord(NamedTuple):
    txn_id: int
    txn_type: int
    mode: int
    committed: bool
    seq: int
    # ordered events: ("r", key, writer, own, payload) / ("w", key, payload)
    # / ("f", func_version)
    events: tuple
    deps: tuple            # ((dep_txn_id, dirty_read), ...)
    func_version: int


@dataclass
class History:
    initial: dict[Key, tuple[int, bytes]]
    final: dict[Key, tuple[int, bytes]]
    txns: list[TxnRecord]
    complete: bool = True
    aborted_attempts: int = 0

    def committed(self) -> list[TxnRecord]:
        return [t for t in self.txns if t.committed]


class Recorder:
    """Per-thread buffers appended at transaction finish and merged when
    the run ends."""

    def __init__(self):
        self.enabled = False
        self._local = threading.local()
        self._lock = threading.Lock()
        self._buffers: list[list[TxnRecord]] = []
        self.aborted_attempts = 0

    def _buffer(self) -> list:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = []
            self._local.buf = buf
            with self._lock:
                self._buffers.append(buf)
        return buf

    def record(self, txn) -> None:
        from .engine import COMMITTED

        if txn.status != COMMITTED:
            self.aborted_attempts += 1
            return
        deps = tuple((dep_id, dep_id in txn.dirty_dep) for dep_id in txn.dep)
        self._buffer().append(TxnRecord(
            txn_id=txn.id,
            txn_type=txn.txn_type,
            mode=txn.mode,
            committed=True,
            seq=txn.seq,
            events=tuple(txn.events_log),
            deps=deps,
            func_version=txn.func.version if txn.func is not None else 0,
        ))

    def build(self, initial: dict, final: dict) -> History:
        with self._lock:
            txns = [rec for buf in self._buffers for rec in buf]
        return History(initial=dict(initial), final=dict(final), txns=txns,
                       complete=True, aborted_attempts=self.aborted_attempts)


class ReplayResult(NamedTuple):
    ok: bool
    divergence: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def check_serializable(history: History) -> ReplayResult:
    if not history.complete:
        raise IncompleteHistory("history does not cover a complete quiescent run")

    committed = history.committed()
    seqs = [t.seq for t in committed]
    if len(set(seqs)) != len(seqs):
        return ReplayResult(False, "duplicate serialization sequence numbers")
    committed.sort(key=lambda t: t.seq)

    store: dict[Key, tuple[int, bytes]] = dict(history.initial)
    for rec in committed:
        pending: dict[Key, bytes] = {}
        for ev in rec.events:
            kind = ev[0]
            if kind == EV_WRITE:
                _, key, payload = ev
                pending[key] = payload
            elif kind == EV_READ:
                _, key, writer, own, payload = ev
                if key in pending:
                    got = (rec.txn_id, pending[key])
                else:
                    entry = store.get(key)
                    if entry is None:
                        return ReplayResult(
                            False, f"txn {rec.txn_id} read unknown key {key}")
                    got = entry
                if got != (writer, payload):
                    return ReplayResult(
                        False,
                        f"txn {rec.txn_id} (seq {rec.seq}) read {key.table}/"
                        f"{key.pk.hex()} from writer {writer}, serial replay "
                        f"gives writer {got[0]}")
        for key, payload in pending.items():
            store[key] = (rec.txn_id, payload)

    for key, entry in history.final.items():
        if store.get(key, history.initial.get(key)) != entry:
            replayed = store.get(key, history.initial.get(key))
            return ReplayResult(
                False,
                f"final state mismatch on {key.table}/{key.pk.hex()}: engine "
                f"has writer {entry[0]}, replay gives {replayed[0]}")
    return ReplayResult(True)


def check_commit_dag_acyclic(history: History) -> bool:
    committed_ids = {t.txn_id for t in history.committed()}
    sorter: TopologicalSorter = TopologicalSorter()
    for rec in history.committed():
        preds = [dep_id for dep_id, _ in rec.deps if dep_id in committed_ids]
        sorter.add(rec.txn_id, *preds)
    try:
        sorter.prepare()
    except CycleError:
        return False
    return True


def dump_history(history: History) -> str:
    """Line-oriented dump for failure triage."""
    lines = ["history v1"]
    for key, (writer, payload) in sorted(history.initial.items()):
        lines.append(f"init {key.table} {key.pk.hex()} {writer} {payload.hex()}")
    for rec in sorted(history.txns, key=lambda t: (t.seq, t.txn_id)):
        lines.append(
            f"txn {rec.txn_id} type={rec.txn_type} mode={rec.mode} "
            f"committed={1 if rec.committed else 0} seq={rec.seq} "
            f"func={rec.func_version}")
        for ev in rec.events:
            if ev[0] == EV_READ:
                _, key, writer, own, payload = ev
                lines.append(f"  r {key.table} {key.pk.hex()} {writer} "
                             f"{1 if own else 0} {payload.hex()}")
            elif ev[0] == EV_WRITE:
                _, key, payload = ev
                lines.append(f"  w {key.table} {key.pk.hex()} {payload.hex()}")
            else:
                lines.append(f"  f {ev[1]}")
        for dep_id, dirty in rec.deps:
            lines.append(f"  dep {dep_id} {1 if dirty else 0}")
    for key, (writer, payload) in sorted(history.final.items()):
        lines.append(f"final {key.table} {key.pk.hex()} {writer} {payload.hex()}")
    return "\n".join(lines) + "\n"
