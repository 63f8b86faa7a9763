"""Per-access feature capture and the selector that compresses the nine
raw features into a compact state key.

Feature vector layout (1-based ids, as used in the selector file format):

  f1 txn_type          1..n
  f2 op_index          executed operation count + 1
  f3 op_type           0=read 1=write
  f4 key_hotness       decaying per-key conflict counter
  f5 dep_count         |T.dep|
  f6 dependents_count  transactions depending on T
  f7 accessor_count    registered holders + parked waiters on the tuple
  f8 writeset_size     |T.ws|
  f9 relative_age      0=no conflict, 1=older than oldest conflicting
                       transaction, 2=younger

Collection uses only relaxed reads of monotone counters and registry
snapshots; it never takes a latch, and values may lag real state by up to
one operation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator

from .engine import Operation, Transaction, VersionChain, WRITE

N_FEATURES = 9

AGE_NO_CONFLICT = 0
AGE_OLDER = 1
AGE_YOUNGER = 2

LINEAR = "lin"
SQRT = "sqrt"
LOG = "log"
TRANSFORMS = (LINEAR, SQRT, LOG)

# (lo, hi) defaults per feature id; hi for runtime counters is a pragmatic
# cap, refinable by calibrate_ranges
DEFAULT_RANGES = {
    1: (1, 8),
    2: (1, 32),
    3: (0, 2),
    4: (0, 1024),
    5: (0, 16),
    6: (0, 16),
    7: (0, 32),
    8: (0, 32),
    9: (0, 3),
}

MAX_TABLE_ROWS = 1024


class SelectorError(ValueError):
    pass


def _apply(transform: str, x: float) -> float:
    if transform == LINEAR:
        return x
    if transform == SQRT:
        return math.sqrt(x)
    return math.log1p(x)


@dataclass(frozen=True)
class FeatureSpec:
    include: bool
    transform: str = LINEAR
    buckets: int = 8
    lo: int = 0
    hi: int = 8

    def bucket_of(self, value: float) -> int:
        if not self.include:
            return 0
        span = _apply(self.transform, self.hi) - _apply(self.transform, self.lo)
        if span <= 0:
            return 0
        t = _apply(self.transform, max(value, self.lo)) - _apply(self.transform, self.lo)
        b = int(self.buckets * t / (span * (1.0 + 1e-9)))
        if b >= self.buckets:
            return self.buckets - 1
        return b


@dataclass(frozen=True)
class FeatureSelector:
    """Chooses, transforms and bucketizes features; the resulting state key
    is the tuple of bucket indices of the included features in f1..f9
    order."""

    id: str
    specs: tuple[FeatureSpec, ...]

    def __post_init__(self):
        if len(self.specs) != N_FEATURES:
            raise SelectorError(f"need {N_FEATURES} feature specs, got {len(self.specs)}")
        if not any(s.include for s in self.specs):
            raise SelectorError("at least one feature must be included")
        if self.cardinality() > MAX_TABLE_ROWS:
            raise SelectorError(
                f"state space {self.cardinality()} exceeds table cap {MAX_TABLE_ROWS}")

    def included_ids(self) -> tuple[int, ...]:
        return tuple(i + 1 for i, s in enumerate(self.specs) if s.include)

    def cardinality(self) -> int:
        n = 1
        for s in self.specs:
            if s.include:
                n *= s.buckets
        return n

    def key_space(self) -> Iterator[tuple[int, ...]]:
        axes = [range(s.buckets) for s in self.specs if s.include]
        return itertools.product(*axes)

    def includes(self, feature_id: int) -> bool:
        return self.specs[feature_id - 1].include


def select(selector: FeatureSelector, x: tuple) -> tuple[int, ...]:
    """Map a raw nine-feature vector to its state key."""
    return tuple(
        spec.bucket_of(x[i])
        for i, spec in enumerate(selector.specs)
        if spec.include
    )


def relative_age(txn: Transaction, op: Operation, chain: VersionChain) -> int:
    oldest = None
    want_all = op.op_type == WRITE
    for tid, entry in list(chain.accessors.items()):
        if tid == txn.id or not entry.owner.is_running:
            continue
        for other in entry.ops:
            if want_all or other.op_type == WRITE:
                ts = entry.owner.timestamp
                if oldest is None or ts < oldest:
                    oldest = ts
                break
    if oldest is None:
        return AGE_NO_CONFLICT
    return AGE_YOUNGER if txn.timestamp > oldest else AGE_OLDER


def collect(txn: Transaction, op: Operation, chain: VersionChain) -> tuple:
    """All nine raw features for one access, latch-free."""
    return (
        txn.txn_type,
        txn.executed_count + 1,
        op.op_type,
        chain.hotness(),
        len(txn.dep),
        txn.dependents,
        len(chain.accessors) + chain.waiter_count,
        len(txn.ws),
        relative_age(txn, op, chain),
    )


# -- fused hot path ---------------------------------------------------------

def _lut(spec: FeatureSpec, cap: int) -> list[int]:
    return [spec.bucket_of(v) for v in range(cap + 1)]


def _getter(feature_id: int, spec: FeatureSpec) -> Callable:
    """Closure computing one included feature's bucket directly from the
    runtime objects, via a precomputed bucket table for counter features."""
    cap = max(spec.hi, 1) * 4 + 8
    lut = _lut(spec, cap)

    if feature_id == 1:
        return lambda t, op, ch: lut[t.txn_type if t.txn_type <= cap else cap]
    if feature_id == 2:
        return lambda t, op, ch: lut[t.executed_count + 1 if t.executed_count < cap else cap]
    if feature_id == 3:
        return lambda t, op, ch: lut[op.op_type]
    if feature_id == 4:
        return lambda t, op, ch: lut[min(ch.hotness(), cap)]
    if feature_id == 5:
        return lambda t, op, ch: lut[min(len(t.dep), cap)]
    if feature_id == 6:
        return lambda t, op, ch: lut[min(t.dependents, cap)]
    if feature_id == 7:
        return lambda t, op, ch: lut[min(len(ch.accessors) + ch.waiter_count, cap)]
    if feature_id == 8:
        return lambda t, op, ch: lut[min(len(t.ws), cap)]
    return lambda t, op, ch: lut[relative_age(t, op, ch)]


def make_state_fn(selector: FeatureSelector) -> Callable:
    """Compile the selector into a (txn, op, chain) -> state-key closure.

    Equivalent to select(selector, collect(...)) but skips excluded
    features; specialized arities keep the common 1-3 feature selectors
    within the per-access time budget.
    """
    getters = [
        _getter(i + 1, spec)
        for i, spec in enumerate(selector.specs)
        if spec.include
    ]
    if len(getters) == 1:
        g0 = getters[0]
        return lambda t, op, ch: (g0(t, op, ch),)
    if len(getters) == 2:
        g0, g1 = getters
        return lambda t, op, ch: (g0(t, op, ch), g1(t, op, ch))
    if len(getters) == 3:
        g0, g1, g2 = getters
        return lambda t, op, ch: (g0(t, op, ch), g1(t, op, ch), g2(t, op, ch))
    return lambda t, op, ch: tuple(g(t, op, ch) for g in getters)


# -- stock selectors ---------------------------------------------------------

def _specs(overrides: dict[int, FeatureSpec]) -> tuple[FeatureSpec, ...]:
    out = []
    for fid in range(1, N_FEATURES + 1):
        if fid in overrides:
            out.append(overrides[fid])
        else:
            lo, hi = DEFAULT_RANGES[fid]
            out.append(FeatureSpec(False, LINEAR, 8, lo, hi))
    return tuple(out)


def selector_type_op(n_types: int, max_ops: int) -> FeatureSelector:
    """Transaction type crossed with operation position; the workhorse
    selector for per-operation wait/expose tables."""
    return FeatureSelector(
        id=f"typeop-{n_types}x{max_ops}",
        specs=_specs({
            1: FeatureSpec(True, LINEAR, n_types, 1, n_types),
            2: FeatureSpec(True, LINEAR, max_ops, 1, max_ops),
        }),
    )


def selector_type(n_types: int) -> FeatureSelector:
    return FeatureSelector(
        id=f"type-{n_types}",
        specs=_specs({1: FeatureSpec(True, LINEAR, n_types, 1, n_types)}),
    )


def selector_age() -> FeatureSelector:
    return FeatureSelector(
        id="age3",
        specs=_specs({9: FeatureSpec(True, LINEAR, 3, 0, 3)}),
    )


def selector_hotness(buckets: int = 8) -> FeatureSelector:
    return FeatureSelector(
        id=f"hot-{buckets}",
        specs=_specs({4: FeatureSpec(True, LOG, buckets, 0, 1024)}),
    )


def calibrate_ranges(selector: FeatureSelector, samples: list[tuple]) -> FeatureSelector:
    """Re-cap runtime-counter ranges at the observed p99 of a sample of raw
    vectors (typically from a short calibration run)."""
    if not samples:
        return selector
    specs = list(selector.specs)
    for i, spec in enumerate(specs):
        fid = i + 1
        if not spec.include or fid in (1, 2, 3, 9):
            continue
        values = sorted(s[i] for s in samples)
        p99 = values[min(len(values) - 1, int(0.99 * len(values)))]
        specs[i] = replace(spec, hi=max(int(p99), spec.lo + 1))
    return FeatureSelector(id=selector.id, specs=tuple(specs))


# -- serialization ------------------------------------------------------------

def serialize_selector(selector: FeatureSelector) -> str:
    lines = [f"selector {selector.id}"]
    for i, s in enumerate(selector.specs):
        lines.append(
            f"f{i + 1} include={1 if s.include else 0} "
            f"transform={s.transform} buckets={s.buckets}"
        )
    return "\n".join(lines) + "\n"


def deserialize_selector(text: str) -> FeatureSelector:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("selector "):
        raise SelectorError("missing selector header")
    sel_id = lines[0].split(" ", 1)[1]
    if len(lines) != 1 + N_FEATURES:
        raise SelectorError(f"expected {N_FEATURES} feature lines, got {len(lines) - 1}")
    specs = []
    for fid, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[0] != f"f{fid}":
            raise SelectorError(f"feature line {fid} malformed: {line!r}")
        kv = dict(p.split("=", 1) for p in parts[1:])
        transform = kv["transform"]
        if transform not in TRANSFORMS:
            raise SelectorError(f"unknown transform {transform!r}")
        buckets = int(kv["buckets"])
        include = kv["include"] == "1"
        # included index-like features bucketize one-to-one, so their range
        # follows the bucket count; everything else uses the stock ranges
        if include and fid in (1, 2):
            lo, hi = 1, buckets
        else:
            lo, hi = DEFAULT_RANGES[fid]
        specs.append(FeatureSpec(
            include=include,
            transform=transform,
            buckets=buckets,
            lo=lo,
            hi=hi,
        ))
    return FeatureSelector(id=sel_id, specs=tuple(specs))
