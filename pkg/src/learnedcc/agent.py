"""Concurrency-control actions and the state -> action lookup table.

An action bundles one conflict-detection posture with its resolution
parameters: timeout, priority, per-transaction-type pipeline waits and the
expose flag.  The agent function is a plain dict from state keys to
actions plus a default row, so the per-access decision is a single lookup.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from . import features
from .features import FeatureSelector, make_state_fn

NO_DETECTION = 0
DETECT_CRITICAL = 1
DETECT_ALL = 2

INF = math.inf

MAX_TABLE_ROWS = features.MAX_TABLE_ROWS

FILE_HEADER = "ccaalf-table v1"


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class Action(NamedTuple):
    a_d: int                      # NO_DETECTION / DETECT_CRITICAL / DETECT_ALL
    a_t: float                    # timeout in microseconds, math.inf blocks
    a_p: float                    # priority in [0, 1]
    waits: tuple[int, ...]        # pipeline waits, one per transaction type
    expose: bool

    def validate(self, op_counts: Optional[tuple[int, ...]] = None) -> None:
        if self.a_d not in (NO_DETECTION, DETECT_CRITICAL, DETECT_ALL):
            raise ValueError(f"bad detection mode {self.a_d}")
        if self.a_t < 0:
            raise ValueError("negative timeout")
        if not 0.0 <= self.a_p <= 1.0:
            raise ValueError(f"priority {self.a_p} outside [0,1]")
        if any(w < 0 for w in self.waits):
            raise ValueError("negative wait")
        if op_counts is not None:
            if len(self.waits) != len(op_counts):
                raise ValueError("waits length != transaction type count")
            for w, n in zip(self.waits, op_counts):
                if w > n:
                    raise ValueError(f"wait {w} exceeds type op count {n}")


def default_action(n_types: int) -> Action:
    """Most conservative safe row, used for states never seen in training."""
    return Action(DETECT_ALL, INF, 0.5, (0,) * n_types, False)


@dataclass
class AgentFunction:
    """Lookup table plus per-type retry backoffs.

    Treated as immutable once installed: optimizers build fresh instances
    instead of editing live tables, which is what makes the atomic swap in
    ActiveFunction safe for concurrent readers.
    """

    table: dict[tuple, Action]
    default: Action
    backoff: tuple[float, ...]        # per-type retry delay, microseconds
    selector_id: str
    n_types: int
    version: int = 0

    def __post_init__(self):
        if len(self.table) > MAX_TABLE_ROWS:
            raise ValueError(f"table has {len(self.table)} rows, cap is {MAX_TABLE_ROWS}")
        if len(self.backoff) != self.n_types:
            raise ValueError("backoff length != n_types")

    def get_cc(self, state: tuple) -> Action:
        return self.table.get(state, self.default)

    def rows(self) -> int:
        return len(self.table)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.table):
            h.update(repr((key, self.table[key])).encode())
        h.update(repr(("default", self.default)).encode())
        h.update(repr(self.backoff).encode())
        return h.hexdigest()[:16]

    def replace_rows(self, table: dict[tuple, Action], default: Optional[Action] = None,
                     backoff: Optional[tuple[float, ...]] = None) -> "AgentFunction":
        return AgentFunction(
            table=dict(table),
            default=default if default is not None else self.default,
            backoff=backoff if backoff is not None else self.backoff,
            selector_id=self.selector_id,
            n_types=self.n_types,
        )

    def __eq__(self, other):
        if not isinstance(other, AgentFunction):
            return NotImplemented
        return (self.table == other.table and self.default == other.default
                and self.backoff == other.backoff
                and self.selector_id == other.selector_id
                and self.n_types == other.n_types)


def get_cc(func: AgentFunction, state: tuple) -> Action:
    return func.table.get(state, func.default)


def make_cc_fn(func: AgentFunction, selector: FeatureSelector) -> Callable:
    """Fuse feature capture, selection and table lookup into one closure."""
    state_fn = make_state_fn(selector)
    table = func.table
    default = func.default
    return lambda txn, op, chain: table.get(state_fn(txn, op, chain), default)


# -- baseline encodings -------------------------------------------------------

def encode_occ(n_types: int) -> AgentFunction:
    """Purely optimistic: no detection anywhere, clean reads, validation at
    commit decides everything."""
    zero = (0,) * n_types
    return AgentFunction(
        table={},
        default=Action(NO_DETECTION, 0.0, 0.0, zero, False),
        backoff=(100.0,) * n_types,
        selector_id=features.selector_type(n_types).id,
        n_types=n_types,
    )


def encode_2pl(n_types: int) -> AgentFunction:
    """Wait-die over eagerly detected conflicts: a requester younger than
    the oldest conflicting transaction dies immediately, everyone else
    blocks until the owners finish.  Uniform priority keeps the waiter
    queue in plain FIFO order."""
    zero = (0,) * n_types
    die = Action(DETECT_ALL, 0.0, 0.5, zero, False)
    wait = Action(DETECT_ALL, INF, 0.5, zero, False)
    table = {
        (features.AGE_YOUNGER,): die,
        (features.AGE_OLDER,): wait,
        (features.AGE_NO_CONFLICT,): wait,
    }
    return AgentFunction(
        table=table,
        default=wait,
        backoff=(100.0,) * n_types,
        selector_id=features.selector_age().id,
        n_types=n_types,
    )


def encode_ic3(workload_static, selector: Optional[FeatureSelector] = None) -> AgentFunction:
    """Pipelined execution over the full static conflict graph: every row
    detects critical conflicts, blocks, exposes, and carries the waits the
    unmodified graph requires."""
    from . import conflict_graph

    if selector is None:
        selector = features.selector_type_op(workload_static.n_types, workload_static.max_ops)
    n = workload_static.n_types
    base_row = Action(DETECT_CRITICAL, INF, 0.5, (0,) * n, True)
    table = {key: base_row for key in selector.key_space()}
    func = AgentFunction(
        table=table,
        default=default_action(n),
        backoff=(100.0,) * n,
        selector_id=selector.id,
        n_types=n,
    )
    mods = conflict_graph.Modifications.all_false(
        conflict_graph.build_full_graph(workload_static))
    return conflict_graph.update_wait_actions(mods, func, workload_static, selector)


def encode_asocc(n_types: int, cold_max: int, hot_min: int,
                 buckets: int = 8) -> AgentFunction:
    """Hotness-tiered posture: optimistic on cold keys, eager blocking on
    hot keys, early-check-and-abort in between.  Thresholds are bucket
    indices of the hotness selector; fixtures pick them per workload."""
    selector = features.selector_hotness(buckets)
    spec = selector.specs[3]
    zero = (0,) * n_types
    cold = Action(NO_DETECTION, 0.0, 0.5, zero, False)
    hot = Action(DETECT_ALL, INF, 0.5, zero, False)
    warm = Action(DETECT_CRITICAL, 0.0, 0.5, zero, False)
    table = {}
    for b in range(spec.buckets):
        if b <= cold_max:
            table[(b,)] = cold
        elif b >= hot_min:
            table[(b,)] = hot
        else:
            table[(b,)] = warm
    return AgentFunction(
        table=table,
        default=cold,
        backoff=(100.0,) * n_types,
        selector_id=selector.id,
        n_types=n_types,
    )


def random_function(workload_static, selector: FeatureSelector, rng) -> AgentFunction:
    """Uniformly sampled table over the selector's state space; waits stay
    within each type's operation count.  Used for fuzzing the safety
    property."""
    n = workload_static.n_types
    op_counts = workload_static.op_counts
    timeouts = (0.0, 100.0, 1000.0, INF)

    def rand_action() -> Action:
        waits = tuple(rng.randint(0, op_counts[i]) for i in range(n))
        return Action(
            a_d=rng.choice((NO_DETECTION, DETECT_CRITICAL, DETECT_ALL)),
            a_t=rng.choice(timeouts),
            a_p=round(rng.random(), 3),
            waits=waits,
            expose=bool(rng.getrandbits(1)),
        )

    table = {key: rand_action() for key in selector.key_space()}
    backoff = tuple(float(rng.choice((0, 50, 200, 1000))) for _ in range(n))
    return AgentFunction(
        table=table,
        default=default_action(n),
        backoff=backoff,
        selector_id=selector.id,
        n_types=n,
    )


# -- serialization ------------------------------------------------------------

def _fmt_timeout(t: float) -> str:
    return "inf" if math.isinf(t) else repr(t)


def _fmt_row(state, action: Action) -> str:
    key = "default" if state is None else ",".join(str(v) for v in state)
    waits = " ".join(str(w) for w in action.waits)
    return (f"{key} | {action.a_d} {_fmt_timeout(action.a_t)} "
            f"{repr(action.a_p)} {1 if action.expose else 0} {waits}").rstrip()


def serialize(func: AgentFunction) -> str:
    lines = [f"{FILE_HEADER} ntypes={func.n_types} selector={func.selector_id}"]
    for state in sorted(func.table):
        lines.append(_fmt_row(state, func.table[state]))
    lines.append(_fmt_row(None, func.default))
    lines.append("backoff " + " ".join(repr(b) for b in func.backoff))
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> AgentFunction:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty input", 1)
    header = lines[0].split()
    if len(header) != 4 or " ".join(header[:2]) != FILE_HEADER:
        raise ParseError(f"bad header {lines[0]!r}", 1)
    try:
        n_types = int(header[2].removeprefix("ntypes="))
    except ValueError:
        raise ParseError("bad ntypes field", 1) from None
    selector_id = header[3].removeprefix("selector=")

    table: dict[tuple, Action] = {}
    default: Optional[Action] = None
    backoff: Optional[tuple[float, ...]] = None
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("backoff"):
            parts = line.split()[1:]
            if len(parts) != n_types:
                raise ParseError(f"backoff needs {n_types} entries, got {len(parts)}", line_no)
            try:
                backoff = tuple(float(p) for p in parts)
            except ValueError:
                raise ParseError("bad backoff value", line_no) from None
            continue
        if "|" not in line:
            raise ParseError("row missing '|' separator", line_no)
        key_part, action_part = (p.strip() for p in line.split("|", 1))
        fields = action_part.split()
        if len(fields) != 4 + n_types:
            raise ParseError(
                f"expected {4 + n_types} action fields, got {len(fields)}", line_no)
        try:
            a_d = int(fields[0])
            a_t = INF if fields[1] == "inf" else float(fields[1])
            a_p = float(fields[2])
            expose = bool(int(fields[3]))
            waits = tuple(int(w) for w in fields[4:])
        except ValueError:
            raise ParseError("unparseable action field", line_no) from None
        action = Action(a_d, a_t, a_p, waits, expose)
        try:
            action.validate()
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        if key_part == "default":
            default = action
        else:
            try:
                state = tuple(int(v) for v in key_part.split(","))
            except ValueError:
                raise ParseError(f"bad state key {key_part!r}", line_no) from None
            table[state] = action

    if default is None:
        raise ParseError("missing default row", len(lines))
    if backoff is None:
        raise ParseError("missing backoff footer", len(lines))
    return AgentFunction(
        table=table, default=default, backoff=backoff,
        selector_id=selector_id, n_types=n_types,
    )


# -- non-blocking replacement ---------------------------------------------------

class ActiveFunction:
    """Holder for the live agent function.

    Readers pin a reference at transaction start and keep using it for the
    whole transaction; swap_active publishes a new immutable instance via a
    single reference assignment, so readers are wait-free and never observe
    a half-updated table.  Superseded versions stay alive for as long as
    any pinned transaction references them.
    """

    def __init__(self, initial: AgentFunction):
        self._write_lock = threading.Lock()
        initial.version = 1
        self._current = initial
        self._checksums = {1: initial.checksum()}

    @property
    def current(self) -> AgentFunction:
        return self._current

    def pin(self) -> AgentFunction:
        return self._current

    def swap_active(self, new_func: AgentFunction) -> int:
        with self._write_lock:
            prev = self._current
            new_func.version = prev.version + 1
            self._checksums[new_func.version] = new_func.checksum()
            self._current = new_func
            return prev.version

    def checksum_of(self, version: int) -> Optional[str]:
        return self._checksums.get(version)
