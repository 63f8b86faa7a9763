"""Transaction execution over the tuple store, driven by the active agent
function.

Per operation: look up the action for the current state, detect conflicts
according to the action's posture, resolve them by priority-filtered
waiting with the action's timeout, then perform the access.  Stored
procedures may dirty-read and expose uncommitted writes; commit runs an
OCC-style validation so any transaction that commits here would also have
committed under plain OCC with the same interleaving.

Waits carry a deadline and a wait-for-graph cycle check, so arbitrary
(including randomly generated) action tables cannot deadlock the engine:
a cycle participant aborts and retries instead.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from . import agent, features, oracle
from .agent import (Action, AgentFunction, ActiveFunction, DETECT_ALL,
                    DETECT_CRITICAL, NO_DETECTION, make_cc_fn)
from .engine import (ABORTED, COMMITTED, INTERACTIVE, KeyNotFound, Operation,
                     PendingWrite, READ, RUNNING, STORED_PROCEDURE, Store,
                     Transaction, Version, WRITE)
from .workloads import TxnInput

INF = float("inf")

# wait kinds
_FINISH = 0      # target transaction must leave Running
_PROGRESS = 1    # target must have executed at least `bar` operations

_SPIN_ROUNDS = 3
_PARK_STEP_S = 0.0005
_PARK_STEP_MAX_S = 0.002
_CYCLE_CHECK_EVERY = 4


class ExecOutcome(NamedTuple):
    ok: bool
    version: Optional[Version] = None
    reason: str = ""

    @property
    def aborted(self) -> bool:
        return not self.ok


@dataclass
class ScoreReport:
    throughput: float                  # committed transactions per second
    abort_rate: float                  # aborts / (aborts + commits)
    duration: float
    per_type: dict[int, int] = field(default_factory=dict)

    def csv_row(self, ts: float, version: int) -> str:
        per_type = ",".join(str(self.per_type.get(t, 0))
                            for t in sorted(self.per_type))
        head = f"{ts:.3f},{version},{self.throughput:.2f},{self.abort_rate:.4f}"
        return head + ("," + per_type if per_type else "")


class ExecContext:
    """Shared run state: the store, the active function holder, selector
    registry, instrumentation counters and the (optional) history
    recorder."""

    def __init__(self, store: Store, active: ActiveFunction,
                 workload, selectors: dict[str, features.FeatureSelector]):
        self.store = store
        self.active = active
        self.workload = workload
        self.static = workload.static
        self.selectors = dict(selectors)
        self.recorder: Optional[oracle.Recorder] = None
        self.eval_lock = threading.Lock()
        self.dirty_read_count = 0
        self.expose_count = 0
        self._cc_cache: dict[int, Callable] = {}

    def selector_for(self, func: AgentFunction) -> features.FeatureSelector:
        try:
            return self.selectors[func.selector_id]
        except KeyError:
            raise KeyError(f"unknown selector id {func.selector_id!r}; "
                           f"registered: {sorted(self.selectors)}") from None

    def register_selector(self, selector: features.FeatureSelector) -> None:
        self.selectors[selector.id] = selector

    def cc_fn_for(self, func: AgentFunction) -> Callable:
        fn = self._cc_cache.get(func.version)
        if fn is None:
            fn = make_cc_fn(func, self.selector_for(func))
            if len(self._cc_cache) > 64:
                self._cc_cache.clear()
            self._cc_cache[func.version] = fn
        return fn


def make_context(workload, initial: AgentFunction,
                 extra_selectors=()) -> ExecContext:
    store = Store()
    store.load(workload.population())
    selectors = {workload.selector().id: workload.selector()}
    for sel in extra_selectors:
        selectors[sel.id] = sel
    for sel in (features.selector_age(), features.selector_type(workload.static.n_types),
                features.selector_hotness()):
        selectors.setdefault(sel.id, sel)
    active = ActiveFunction(initial)
    return ExecContext(store, active, workload, selectors)


class Executor:
    def __init__(self, ctx: ExecContext):
        self.ctx = ctx
        self.store = ctx.store
        self.recording = ctx.recorder is not None and ctx.recorder.enabled

    # -- lifecycle ---------------------------------------------------------

    def begin(self, txn_input: TxnInput, mode: int,
              timestamp: Optional[int] = None) -> Transaction:
        store = self.store
        txn = Transaction(
            txn_id=next(store.txn_ids),
            txn_type=txn_input.txn_type,
            timestamp=timestamp if timestamp is not None else next(store.timestamps),
            mode=mode,
        )
        func = self.ctx.active.pin()
        txn.func = func
        txn.cc_fn = self.ctx.cc_fn_for(func)
        txn.plan = [
            Operation(txn.id, spec.key, WRITE if spec.is_write else READ, i + 1)
            for i, spec in enumerate(txn_input.ops)
        ]
        return txn

    # -- Algorithm: execute one operation -----------------------------------

    def execute_operation(self, txn: Transaction, op: Operation) -> ExecOutcome:
        if txn.must_abort:
            return ExecOutcome(False, reason="cascading abort")
        try:
            chain = self.store.chain(op.key)
        except KeyNotFound:
            return ExecOutcome(False, reason=f"key not found: {op.key}")

        action: Action = txn.cc_fn(txn, op, chain)
        op.priority = action.a_p
        a_d = action.a_d
        stored = txn.mode == STORED_PROCEDURE
        if self.recording:
            txn.events_log.append((oracle.EV_FUNC, txn.func.version))

        targets = None
        if a_d == NO_DETECTION:
            op.clean = True
        elif a_d == DETECT_ALL:
            conflicts = chain.conflicting_accessors(txn, op)
            conflicts = [(rt, other) for rt, other in conflicts
                         if other.priority >= op.priority]
            if conflicts:
                chain.note_conflict()
                targets = [(rt, _FINISH, 0) for rt, _ in
                           {id(rt): (rt, o) for rt, o in conflicts}.values()]
        else:  # DETECT_CRITICAL
            if stored:
                targets = self._pipeline_targets(txn, action.waits, op.priority)
            elif not self.early_validation(txn):
                return ExecOutcome(False, reason="early validation failed")

        if targets:
            if not self._wait_targets(txn, targets, action.a_t, chain, op.priority):
                return ExecOutcome(False, reason="conflict wait timed out")
            if a_d == DETECT_ALL:
                # passed the eager check: keep later arrivals from ordering
                # ahead of us and forcing a pointless abort
                op.priority = 1.0

        try:
            result = self.safe_execute(txn, op)
        except KeyNotFound as exc:
            return ExecOutcome(False, reason=f"key not found: {exc}")
        chain.register_access(txn, op)
        txn.op_priorities.append(op.priority)
        txn.executed_count += 1

        if stored and action.expose and txn.ws:
            if not self.early_validation(txn):
                return ExecOutcome(False, reason="validate-before-expose failed")
            if op.op_index < len(txn.plan):
                if not self._wait_next_op_pipeline(txn, op):
                    return ExecOutcome(False, reason="pre-expose pipeline wait timed out")
            else:
                deps = [(rt, _FINISH, 0) for rt in txn.dep.values() if rt.is_running]
                if deps and not self._wait_targets(txn, deps, INF, None, op.priority):
                    return ExecOutcome(False, reason="pre-expose dependency wait failed")
            self._expose_writes(txn, chain)

        return ExecOutcome(True, result)

    def _pipeline_targets(self, txn: Transaction, waits: tuple[int, ...],
                          priority: float):
        targets = []
        for rt in list(txn.dep.values()):
            if not rt.is_running:
                continue
            bar = waits[rt.txn_type - 1]
            if bar <= 0 or rt.executed_count >= bar:
                continue
            known = rt.op_priorities[:bar]
            window_max = max(known, default=0.0)
            if len(known) < bar:
                window_max = max(window_max, 0.5)   # unexecuted ops: default rank
            if window_max < priority:
                continue
            targets.append((rt, _PROGRESS, bar))
        return targets or None

    def _wait_next_op_pipeline(self, txn: Transaction, op: Operation) -> bool:
        nxt = txn.plan[op.op_index]          # op_index is 1-based
        try:
            chain = self.store.chain(nxt.key)
        except KeyNotFound:
            return True
        nxt_action: Action = txn.cc_fn(txn, nxt, chain)
        targets = self._pipeline_targets(txn, nxt_action.waits, nxt_action.a_p)
        if not targets:
            return True
        return self._wait_targets(txn, targets, nxt_action.a_t, chain, nxt_action.a_p)

    def _expose_writes(self, txn: Transaction, op_chain) -> None:
        pending = [pw for pw in txn.ws if not pw.exposed]
        if not pending:
            return
        store = self.store
        keys = sorted({pw.op.key for pw in pending})
        for key in keys:
            store.lock_tuple(key, txn.id)
        try:
            for reader in op_chain.dirty_reader_txns(txn.id):
                txn.add_dep(reader, dirty=False)
            for pw in pending:
                version = Version(txn.id, pw.payload, False)
                version.writer_ref = txn
                store.append_dirty(pw.op.key, txn.id, version)
                pw.exposed = True
                self.ctx.expose_count += 1
        finally:
            for key in reversed(keys):
                store.unlock_tuple(key, txn.id)

    # -- data access ----------------------------------------------------------

    def safe_execute(self, txn: Transaction, op: Operation) -> Optional[Version]:
        if op.op_type == WRITE:
            payload = b"%d:%d" % (txn.id, op.op_index)
            pw = PendingWrite(op, payload)
            txn.ws.append(pw)
            txn.ws_keys[op.key] = pw
            if self.recording:
                txn.events_log.append((oracle.EV_WRITE, op.key, payload))
            return None

        pw = txn.ws_keys.get(op.key)
        if pw is not None:                       # own buffered write
            if self.recording:
                txn.events_log.append((oracle.EV_READ, op.key, txn.id, True, pw.payload))
            own = Version(txn.id, pw.payload, False)
            own.writer_ref = txn
            return own

        chain = self.store.chain(op.key)
        if op.clean or txn.mode == INTERACTIVE:
            v = chain.latest_committed()
        else:
            v = chain.latest_any()
            if not v.committed:
                if v.writer == txn.id:           # own exposed write
                    if self.recording:
                        txn.events_log.append(
                            (oracle.EV_READ, op.key, txn.id, True, v.payload))
                    return v
                writer = v.writer_ref
                if writer is not None:
                    txn.add_dep(writer, dirty=True)
                self.ctx.dirty_read_count += 1
        txn.rs.append((op.key, v.writer, v.payload))
        txn.validate.append((op.key, v.writer, v.payload))
        if self.recording:
            txn.events_log.append((oracle.EV_READ, op.key, v.writer, False, v.payload))
        return v

    # -- validation and commit ---------------------------------------------------

    def early_validation(self, txn: Transaction) -> bool:
        store = self.store
        for key, writer, _payload in txn.validate:
            tail = store.read_latest_any(key)
            if tail.writer != writer:
                return False
        txn.validate.clear()
        return True

    def commit(self, txn: Transaction) -> bool:
        # (1) settle dependencies; dirty reads from aborted sources are fatal
        deps = [(rt, _FINISH, 0) for rt in txn.dep.values() if rt.is_running]
        if deps and not self._wait_targets(txn, deps, INF, None, 1.0):
            self.abort(txn)
            return False
        for dep_id in txn.dirty_dep:
            if txn.dep[dep_id].status == ABORTED:
                self.abort(txn)
                return False
        if txn.must_abort:
            self.abort(txn)
            return False

        store = self.store
        keys = sorted(txn.ws_keys)
        for key in keys:                       # (2) global key order, no deadlock
            store.lock_tuple(key, txn.id)
        txn.seq = next(store.seq)              # serialization point

        for key, writer, payload in txn.rs:    # (3)
            chain = store.chain(key)
            if chain.latch.locked() and chain.latch_owner != txn.id:
                # another transaction is between its serialization point and
                # its promotion; treat as a conflict rather than racing it
                self._unlock_all(txn, keys)
                self.abort(txn)
                return False
            v = chain.latest_committed()
            if v.writer != writer or v.payload != payload:
                chain.note_conflict()
                self._unlock_all(txn, keys)
                self.abort(txn)
                return False

        for key in keys:                       # (4)
            store.remove_dirty(key, txn.id)
            store.promote_commit(key, txn.id, txn.ws_keys[key].payload)
            store.unlock_tuple(key, txn.id)
        self._finish(txn, COMMITTED)
        return True

    def abort(self, txn: Transaction) -> None:
        self._finish(txn, ABORTED)

    def _unlock_all(self, txn: Transaction, keys) -> None:
        for key in reversed(keys):
            self.store.unlock_tuple(key, txn.id)

    def _finish(self, txn: Transaction, status: int) -> None:
        if txn.status != RUNNING:
            return
        if status == ABORTED:
            exposed = sorted({pw.op.key for pw in txn.ws if pw.exposed})
            for key in exposed:
                self.store.lock_tuple(key, txn.id)
                self.store.remove_dirty(key, txn.id)
                self.store.unlock_tuple(key, txn.id)
            for reader in list(txn.dirty_readers):
                reader.must_abort = True
        txn.status = status
        for chain in txn.touched:
            chain.deregister(txn.id)
        recorder = self.ctx.recorder
        if recorder is not None and recorder.enabled:
            recorder.record(txn)
        txn.finished.set()

    # -- waiting with deadline + deadlock breaking --------------------------------

    @staticmethod
    def _resolved(target) -> bool:
        rt, kind, bar = target
        if rt.status != RUNNING:
            return True
        return kind == _PROGRESS and rt.executed_count >= bar

    def _has_cycle(self, txn: Transaction, unresolved) -> bool:
        seen = set()
        stack = [t[0] for t in unresolved]
        budget = 256
        while stack and budget:
            budget -= 1
            t = stack.pop()
            if t is txn:
                return True
            if id(t) in seen or t.status != RUNNING:
                continue
            seen.add(id(t))
            stack.extend(t.waiting_for)
        return False

    def _wait_targets(self, txn: Transaction, targets, timeout_us: float,
                      chain, priority: float) -> bool:
        unresolved = [t for t in targets if not self._resolved(t)]
        if not unresolved:
            return True
        if timeout_us <= 0:
            return False
        deadline = None if timeout_us == INF else time.monotonic() + timeout_us / 1e6

        for _ in range(_SPIN_ROUNDS):
            time.sleep(0)
            unresolved = [t for t in unresolved if not self._resolved(t)]
            if not unresolved:
                return True

        token = None
        if chain is not None:
            token = chain.add_waiter(priority, next(self.store.waiter_arrivals))
        txn.waiting_for = tuple(t[0] for t in unresolved)
        step = _PARK_STEP_S
        rounds = 0
        try:
            while True:
                unresolved = [t for t in unresolved if not self._resolved(t)]
                if not unresolved:
                    return True
                if txn.must_abort:
                    return False
                now = time.monotonic()
                if deadline is not None and now >= deadline:
                    return False
                rounds += 1
                if rounds % _CYCLE_CHECK_EVERY == 0 and self._has_cycle(txn, unresolved):
                    return False
                txn.waiting_for = tuple(t[0] for t in unresolved)
                wait_s = step if deadline is None else min(step, deadline - now)
                unresolved[0][0].finished.wait(max(wait_s, 0.0))
                step = min(step * 2, _PARK_STEP_MAX_S)
        finally:
            txn.waiting_for = ()
            if token is not None:
                chain.remove_waiter(token)

    # -- whole-transaction driver ---------------------------------------------------

    def run_transaction(self, txn_input: TxnInput, mode: int,
                        stop: Optional[Callable[[], bool]] = None,
                        stats: Optional["WorkerStats"] = None) -> Transaction:
        """Execute to commit, retrying aborted attempts after the learned
        per-type backoff.  Retries keep the first attempt's timestamp so a
        restarted transaction keeps aging (no starvation under wait-die
        style tables).  Repeated aborts escalate the delay so that tables
        pairing eager detection with zero timeout cannot turn into retry
        storms."""
        timestamp = next(self.store.timestamps)
        attempt = 0
        while True:
            attempt += 1
            txn = self.begin(txn_input, mode, timestamp)
            ok = True
            for op in txn.plan:
                outcome = self.execute_operation(txn, op)
                if not outcome.ok:
                    ok = False
                    break
            if ok and self.commit(txn):
                if stats is not None:
                    stats.committed(txn)
                return txn
            if txn.status == RUNNING:
                self.abort(txn)
            if stats is not None:
                stats.aborted(txn)
            if stop is not None and stop():
                return txn
            backoff_us = txn.func.backoff[txn.txn_type - 1]
            if attempt > 1:
                backoff_us = max(backoff_us, 20.0) * min(attempt, 50)
                backoff_us *= 0.5 + ((txn.id * 2654435761) % 1024) / 1024.0
            if backoff_us > 0:
                time.sleep(backoff_us / 1e6)


class WorkerStats:
    """Commit/abort tallies restricted to the measurement window."""

    def __init__(self, window_start: float, window_end: float):
        self.window = (window_start, window_end)
        self.commits = 0
        self.aborts = 0
        self.per_type: dict[int, int] = {}

    def _in_window(self) -> bool:
        now = time.monotonic()
        return self.window[0] <= now <= self.window[1]

    def committed(self, txn: Transaction) -> None:
        if self._in_window():
            self.commits += 1
            self.per_type[txn.txn_type] = self.per_type.get(txn.txn_type, 0) + 1

    def aborted(self, txn: Transaction) -> None:
        if self._in_window():
            self.aborts += 1


def evaluate_score(ctx: ExecContext, func: AgentFunction,
                   warmup_s: float = 1.0, measure_s: float = 2.0,
                   mode: int = STORED_PROCEDURE,
                   seed: int = 1,
                   threads: Optional[int] = None) -> ScoreReport:
    """Swap func in, run the workload on the worker pool, report committed
    throughput over the measurement window.  One evaluation owns the pool
    at a time."""
    with ctx.eval_lock:
        ctx.active.swap_active(func)
        executor = Executor(ctx)
        n_threads = threads if threads is not None else ctx.workload.threads
        start = time.monotonic()
        window = (start + warmup_s, start + warmup_s + measure_s)
        stop_time = window[1]
        stats = [WorkerStats(*window) for _ in range(n_threads)]

        def worker(idx: int) -> None:
            gen = ctx.workload.generator(idx, seed)
            st = stats[idx]
            stop = lambda: time.monotonic() >= stop_time
            while time.monotonic() < stop_time:
                executor.run_transaction(gen(), mode, stop=stop, stats=st)

        threads_list = [threading.Thread(target=worker, args=(i,), daemon=True)
                        for i in range(n_threads)]
        for t in threads_list:
            t.start()
        for t in threads_list:
            t.join()

        commits = sum(s.commits for s in stats)
        aborts = sum(s.aborts for s in stats)
        per_type: dict[int, int] = {}
        for s in stats:
            for t, c in s.per_type.items():
                per_type[t] = per_type.get(t, 0) + c
        total = commits + aborts
        return ScoreReport(
            throughput=commits / measure_s,
            abort_rate=(aborts / total) if total else 0.0,
            duration=warmup_s + measure_s,
            per_type=per_type,
        )


def run_recorded(workload, func: AgentFunction, txn_count: int,
                 mode: int = STORED_PROCEDURE, seed: int = 1,
                 threads: Optional[int] = None,
                 extra_selectors=()) -> tuple[oracle.History, ExecContext]:
    """Run a fixed number of transactions on a fresh store with full
    history recording; the run is quiescent at start and end so the
    snapshot pair brackets exactly the recorded transactions."""
    ctx = make_context(workload, func, extra_selectors=extra_selectors)
    ctx.recorder = oracle.Recorder()
    ctx.recorder.enabled = True
    executor = Executor(ctx)
    initial = ctx.store.dump()
    n_threads = threads if threads is not None else workload.threads
    share = [txn_count // n_threads] * n_threads
    for i in range(txn_count % n_threads):
        share[i] += 1

    def worker(idx: int) -> None:
        gen = ctx.workload.generator(idx, seed)
        for _ in range(share[idx]):
            executor.run_transaction(gen(), mode)

    workers = [threading.Thread(target=worker, args=(i,), daemon=True)
               for i in range(n_threads)]
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    history = ctx.recorder.build(initial, ctx.store.dump())
    return history, ctx
