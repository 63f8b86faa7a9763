import queue
import threading

import pytest

from learnedcc import features
from learnedcc.engine import Key
from learnedcc.workloads import OpSpec, TxnInput, WorkloadStatic


class SimpleWorkload:
    """Hand-built workload for scripted schedules: explicit static op
    lists, explicit key population, no generators."""

    name = "simple"

    def __init__(self, static: WorkloadStatic, keys: dict[Key, bytes],
                 threads: int = 2):
        self.static = static
        self._keys = keys
        self.threads = threads

    def population(self):
        return dict(self._keys)

    def selector(self):
        return features.selector_type_op(self.static.n_types, self.static.max_ops)

    def generator(self, thread_id, seed):   # pragma: no cover - scripts drive txns
        raise NotImplementedError("scripted workload has no generator")


def key(name: str) -> Key:
    return Key("t", name.encode())


def two_key_workload(op_lists, learned=None) -> SimpleWorkload:
    """Types over two tuples A and B; op_lists entries are per-type lists
    of ("A"|"B", is_write)."""
    static = WorkloadStatic(
        type_names=tuple(f"type{i + 1}" for i in range(len(op_lists))),
        op_lists=tuple(tuple(("t", w) for _, w in ops) for ops in op_lists),
        learned=learned or tuple(range(1, len(op_lists) + 1)),
    )
    return SimpleWorkload(static, {key("A"): b"init", key("B"): b"init"})


def txn_input(txn_type: int, ops) -> TxnInput:
    return TxnInput(txn_type, tuple(OpSpec(key(k), w) for k, w in ops))


BLOCKED = object()


class ScriptRunner:
    """Drives transactions step by step on dedicated threads so tests can
    interleave operations deterministically and observe blocking.

    step() returns the call's result, or BLOCKED if it did not finish
    within the probe window; settle() later collects the real result.
    """

    def __init__(self, probe_s: float = 0.25):
        self.probe_s = probe_s
        self._threads: dict[str, threading.Thread] = {}
        self._cmd: dict[str, queue.Queue] = {}
        self._res: dict[str, queue.Queue] = {}

    def _loop(self, label: str):
        while True:
            fn = self._cmd[label].get()
            if fn is None:
                return
            try:
                self._res[label].put(("ok", fn()))
            except Exception as exc:   # surfaced by settle()
                self._res[label].put(("err", exc))

    def _ensure(self, label: str):
        if label not in self._threads:
            self._cmd[label] = queue.Queue()
            self._res[label] = queue.Queue()
            t = threading.Thread(target=self._loop, args=(label,), daemon=True)
            self._threads[label] = t
            t.start()

    def step(self, label: str, fn):
        self._ensure(label)
        self._cmd[label].put(fn)
        try:
            kind, value = self._res[label].get(timeout=self.probe_s)
        except queue.Empty:
            return BLOCKED
        if kind == "err":
            raise value
        return value

    def settle(self, label: str, timeout: float = 5.0):
        kind, value = self._res[label].get(timeout=timeout)
        if kind == "err":
            raise value
        return value

    def close(self):
        for label, q in self._cmd.items():
            q.put(None)
        for t in self._threads.values():
            t.join(timeout=1.0)


@pytest.fixture
def script():
    runner = ScriptRunner()
    yield runner
    runner.close()
