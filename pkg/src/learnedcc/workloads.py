"""Benchmark workload generators.

Both workloads expose the same surface: a static per-type operation list
(table, read/write) used to build conflict graphs, a key population loaded
before a run, and per-thread deterministic transaction generators.
"""

from __future__ import annotations

import functools
import random
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from . import features
from .engine import Key, READ, WRITE


class OpSpec(NamedTuple):
    key: Key
    is_write: bool


class TxnInput(NamedTuple):
    txn_type: int                 # 1-based
    ops: tuple[OpSpec, ...]


@dataclass(frozen=True)
class WorkloadStatic:
    """Per-type operation shapes: everything the conflict graph and the
    pipelined encodings need to know before any transaction runs."""

    type_names: tuple[str, ...]
    op_lists: tuple[tuple[tuple[str, bool], ...], ...]   # per type: (table, is_write)
    learned: tuple[int, ...]                             # 1-based learned type ids

    @property
    def n_types(self) -> int:
        return len(self.type_names)

    @property
    def max_ops(self) -> int:
        return max(len(ops) for ops in self.op_lists)

    @property
    def op_counts(self) -> tuple[int, ...]:
        return tuple(len(ops) for ops in self.op_lists)

    def ops_of(self, txn_type: int) -> tuple[tuple[str, bool], ...]:
        return self.op_lists[txn_type - 1]


def static_op_lists(workload) -> WorkloadStatic:
    return workload.static


# -- Zipf sampling -------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _zipf_cdf(n: int, theta: float) -> tuple[float, ...]:
    weights = [1.0 / (k ** theta) for k in range(1, n + 1)]
    total = sum(weights)
    cdf = []
    acc = 0.0
    for w in weights:
        acc += w / total
        cdf.append(acc)
    cdf[-1] = 1.0
    return tuple(cdf)


def zipf_sample(n: int, theta: float, rng: random.Random) -> int:
    """Draw a 1-based rank with P(k) proportional to k^-theta."""
    if theta == 0.0:
        return rng.randrange(n) + 1
    return bisect_right(_zipf_cdf(n, theta), rng.random()) + 1


# -- YCSB-extended -------------------------------------------------------------

# hotspot layouts used in the access-pattern experiments; 1 marks a skewed
# position, 0 a uniform one
YCSB_PATTERNS = {
    1: (0, 0, 0, 1, 0, 0, 0, 0, 0, 0),
    2: (1, 0, 0, 1, 1, 0, 0, 0, 0, 0),
    3: (0, 0, 0, 1, 0, 1, 0, 1, 1, 0),
    4: (1, 1, 0, 0, 1, 0, 0, 1, 1, 0),
}

# alternating reads and writes so every hotspot position can raise both
# read-write and write-write conflicts
DEFAULT_RW_LIST = (READ, WRITE) * 5


@dataclass
class YcsbExtConfig:
    n_keys: int = 1000
    ops_per_txn: int = 10
    pattern: tuple[int, ...] = YCSB_PATTERNS[1]
    read_write_list: tuple[int, ...] = DEFAULT_RW_LIST
    theta_hot: float = 1.0
    theta_cold: float = 0.0
    threads: int = 16
    seed: int = 1
    # generalized mode for the interactive length/read-ratio experiments;
    # when read_ratio is set, pattern and read_write_list are ignored
    txn_len: Optional[int] = None
    read_ratio: Optional[float] = None

    def __post_init__(self):
        if self.read_ratio is None and len(self.pattern) != self.ops_per_txn:
            raise ValueError("pattern length must equal ops_per_txn")


def _ycsb_key(idx: int) -> Key:
    return Key("ycsb", struct.pack(">I", idx))


class YcsbWorkload:
    name = "ycsb"

    def __init__(self, cfg: YcsbExtConfig):
        self.cfg = cfg
        self.threads = cfg.threads
        n_ops = cfg.txn_len if cfg.read_ratio is not None else cfg.ops_per_txn
        rw = (cfg.read_write_list if cfg.read_ratio is None
              else tuple([READ] * n_ops))
        self.static = WorkloadStatic(
            type_names=("ycsb",),
            op_lists=((tuple(("ycsb", t == WRITE) for t in rw)),),
            learned=(1,),
        )
        self._keys = [_ycsb_key(i) for i in range(cfg.n_keys)]

    def population(self) -> dict[Key, bytes]:
        return {k: b"init" for k in self._keys}

    def selector(self) -> features.FeatureSelector:
        return features.selector_type_op(1, len(self.static.op_lists[0]))

    def generator(self, thread_id: int, seed: int) -> Callable[[], TxnInput]:
        cfg = self.cfg
        rng = random.Random((seed << 8) ^ thread_id)
        keys = self._keys
        n = cfg.n_keys

        if cfg.read_ratio is not None:
            length = cfg.txn_len or 10
            ratio = cfg.read_ratio

            def gen_generalized() -> TxnInput:
                ops = tuple(
                    OpSpec(keys[zipf_sample(n, cfg.theta_hot, rng) - 1],
                           rng.random() >= ratio)
                    for _ in range(length)
                )
                return TxnInput(1, ops)

            return gen_generalized

        pattern = cfg.pattern
        rw = cfg.read_write_list

        def gen() -> TxnInput:
            ops = tuple(
                OpSpec(
                    keys[zipf_sample(n, cfg.theta_hot if pattern[i] else cfg.theta_cold,
                                     rng) - 1],
                    rw[i] == WRITE,
                )
                for i in range(len(pattern))
            )
            return TxnInput(1, ops)

        return gen


def gen_ycsb_txn(cfg: YcsbExtConfig, rng: random.Random) -> TxnInput:
    """One-shot generation helper mirroring the per-thread generator."""
    wl = YcsbWorkload(cfg)
    keys = wl._keys
    if cfg.read_ratio is not None:
        length = cfg.txn_len or 10
        ops = tuple(
            OpSpec(keys[zipf_sample(cfg.n_keys, cfg.theta_hot, rng) - 1],
                   rng.random() >= cfg.read_ratio)
            for _ in range(length))
        return TxnInput(1, ops)
    ops = tuple(
        OpSpec(
            keys[zipf_sample(cfg.n_keys,
                             cfg.theta_hot if cfg.pattern[i] else cfg.theta_cold,
                             rng) - 1],
            cfg.read_write_list[i] == WRITE,
        )
        for i in range(cfg.ops_per_txn)
    )
    return TxnInput(1, ops)


# -- TPC-C (desk scale) ----------------------------------------------------------

TPCC_NEW_ORDER = 1
TPCC_PAYMENT = 2
TPCC_DELIVERY = 3
TPCC_ORDER_STATUS = 4
TPCC_STOCK_LEVEL = 5

TPCC_TYPE_NAMES = ("new_order", "payment", "delivery", "order_status", "stock_level")


@dataclass
class TpccConfig:
    warehouses: int = 1
    threads: int = 16
    mix: tuple[int, ...] = (45, 43, 4, 4, 4)      # NO, P, D, OS, SL percentages
    districts: int = 10
    customers_per_district: int = 100
    items: int = 1000
    stock_per_warehouse: int = 1000
    order_slots: int = 64                         # pre-allocated orders per district
    order_lines: int = 3                          # lines per new-order
    seed: int = 1

    def __post_init__(self):
        if sum(self.mix) != 100:
            raise ValueError(f"mix must sum to 100, got {sum(self.mix)}")


def _k(table: str, *parts: int) -> Key:
    return Key(table, struct.pack(">" + "I" * len(parts), *parts))


def tpcc_static(cfg: TpccConfig) -> WorkloadStatic:
    new_order = [("warehouse", False), ("district", False), ("district", True)]
    for _ in range(cfg.order_lines):
        new_order += [("item", False), ("stock", False), ("stock", True),
                      ("order_line", True)]
    new_order.append(("order", True))
    payment = [("warehouse", False), ("warehouse", True),
               ("district", False), ("district", True),
               ("customer", False), ("customer", True)]
    delivery = [("new_order", False), ("new_order", True),
                ("order", False), ("order", True),
                ("customer", False), ("customer", True)]
    order_status = [("customer", False), ("order", False)] + \
        [("order_line", False)] * cfg.order_lines
    stock_level = [("district", False), ("order_line", False), ("order_line", False),
                   ("stock", False), ("stock", False)]
    return WorkloadStatic(
        type_names=TPCC_TYPE_NAMES,
        op_lists=(tuple(new_order), tuple(payment), tuple(delivery),
                  tuple(order_status), tuple(stock_level)),
        learned=(TPCC_NEW_ORDER, TPCC_PAYMENT, TPCC_DELIVERY),
    )


class TpccWorkload:
    name = "tpcc"

    def __init__(self, cfg: TpccConfig):
        self.cfg = cfg
        self.threads = cfg.threads
        self.static = tpcc_static(cfg)
        acc = 0
        self._mix_cdf = []
        for share in cfg.mix:
            acc += share
            self._mix_cdf.append(acc)

    def population(self) -> dict[Key, bytes]:
        cfg = self.cfg
        pop: dict[Key, bytes] = {}
        for w in range(cfg.warehouses):
            pop[_k("warehouse", w)] = b"init"
            for i in range(cfg.stock_per_warehouse):
                pop[_k("stock", w, i)] = b"init"
            for d in range(cfg.districts):
                pop[_k("district", w, d)] = b"init"
                for c in range(cfg.customers_per_district):
                    pop[_k("customer", w, d, c)] = b"init"
                for s in range(cfg.order_slots):
                    pop[_k("order", w, d, s)] = b"init"
                    pop[_k("new_order", w, d, s)] = b"init"
                    for ln in range(cfg.order_lines):
                        pop[_k("order_line", w, d, s, ln)] = b"init"
        for i in range(cfg.items):
            pop[_k("item", i)] = b"init"
        return pop

    def selector(self) -> features.FeatureSelector:
        return features.selector_type_op(self.static.n_types, self.static.max_ops)

    def generator(self, thread_id: int, seed: int) -> Callable[[], TxnInput]:
        cfg = self.cfg
        rng = random.Random((seed << 8) ^ thread_id)
        mix_cdf = self._mix_cdf
        # per-thread rolling slot counters, offset so threads do not pile
        # onto the same pre-allocated order slots
        slot = [thread_id * 7 % cfg.order_slots] * (cfg.warehouses * cfg.districts)
        deliver = [thread_id * 3 % cfg.order_slots] * (cfg.warehouses * cfg.districts)

        def pick_type() -> int:
            r = rng.randrange(100)
            for t, edge in enumerate(mix_cdf, start=1):
                if r < edge:
                    return t
            return len(mix_cdf)

        def gen() -> TxnInput:
            t = pick_type()
            w = rng.randrange(cfg.warehouses)
            d = rng.randrange(cfg.districts)
            di = w * cfg.districts + d
            if t == TPCC_NEW_ORDER:
                s = slot[di] = (slot[di] + 1) % cfg.order_slots
                ops = [OpSpec(_k("warehouse", w), False),
                       OpSpec(_k("district", w, d), False),
                       OpSpec(_k("district", w, d), True)]
                for ln in range(cfg.order_lines):
                    item = zipf_sample(cfg.items, 0.5, rng) - 1
                    ops += [OpSpec(_k("item", item), False),
                            OpSpec(_k("stock", w, item % cfg.stock_per_warehouse), False),
                            OpSpec(_k("stock", w, item % cfg.stock_per_warehouse), True),
                            OpSpec(_k("order_line", w, d, s, ln), True)]
                ops.append(OpSpec(_k("order", w, d, s), True))
            elif t == TPCC_PAYMENT:
                c = rng.randrange(cfg.customers_per_district)
                ops = [OpSpec(_k("warehouse", w), False),
                       OpSpec(_k("warehouse", w), True),
                       OpSpec(_k("district", w, d), False),
                       OpSpec(_k("district", w, d), True),
                       OpSpec(_k("customer", w, d, c), False),
                       OpSpec(_k("customer", w, d, c), True)]
            elif t == TPCC_DELIVERY:
                s = deliver[di] = (deliver[di] + 1) % cfg.order_slots
                c = rng.randrange(cfg.customers_per_district)
                ops = [OpSpec(_k("new_order", w, d, s), False),
                       OpSpec(_k("new_order", w, d, s), True),
                       OpSpec(_k("order", w, d, s), False),
                       OpSpec(_k("order", w, d, s), True),
                       OpSpec(_k("customer", w, d, c), False),
                       OpSpec(_k("customer", w, d, c), True)]
            elif t == TPCC_ORDER_STATUS:
                s = rng.randrange(cfg.order_slots)
                c = rng.randrange(cfg.customers_per_district)
                ops = [OpSpec(_k("customer", w, d, c), False),
                       OpSpec(_k("order", w, d, s), False)]
                ops += [OpSpec(_k("order_line", w, d, s, ln), False)
                        for ln in range(cfg.order_lines)]
            else:
                s = rng.randrange(cfg.order_slots)
                item = rng.randrange(cfg.stock_per_warehouse)
                ops = [OpSpec(_k("district", w, d), False),
                       OpSpec(_k("order_line", w, d, s, 0), False),
                       OpSpec(_k("order_line", w, d, s, 1), False),
                       OpSpec(_k("stock", w, item), False),
                       OpSpec(_k("stock", w, (item + 1) % cfg.stock_per_warehouse), False)]
            return TxnInput(t, tuple(ops))

        return gen


def gen_tpcc_txn(cfg: TpccConfig, rng: random.Random) -> TxnInput:
    wl = TpccWorkload(cfg)
    gen = wl.generator(0, rng.randrange(2 ** 30))
    return gen()


# -- workload config files -------------------------------------------------------

def make_workload(cfg) -> object:
    if isinstance(cfg, YcsbExtConfig):
        return YcsbWorkload(cfg)
    if isinstance(cfg, TpccConfig):
        return TpccWorkload(cfg)
    raise TypeError(f"unknown workload config {type(cfg)!r}")


def write_config(cfg, path: str) -> None:
    lines = []
    if isinstance(cfg, YcsbExtConfig):
        lines.append("workload=ycsb")
        lines.append(f"n_keys={cfg.n_keys}")
        lines.append(f"ops_per_txn={cfg.ops_per_txn}")
        lines.append("pattern=" + "".join(str(b) for b in cfg.pattern))
        lines.append("read_write_list=" +
                     "".join("W" if t == WRITE else "R" for t in cfg.read_write_list))
        lines.append(f"theta_hot={cfg.theta_hot}")
        lines.append(f"theta_cold={cfg.theta_cold}")
        lines.append(f"threads={cfg.threads}")
        lines.append(f"seed={cfg.seed}")
        if cfg.read_ratio is not None:
            lines.append(f"txn_len={cfg.txn_len}")
            lines.append(f"read_ratio={cfg.read_ratio}")
    elif isinstance(cfg, TpccConfig):
        lines.append("workload=tpcc")
        lines.append(f"warehouses={cfg.warehouses}")
        lines.append(f"threads={cfg.threads}")
        lines.append("mix=" + ",".join(str(m) for m in cfg.mix))
        lines.append(f"order_slots={cfg.order_slots}")
        lines.append(f"order_lines={cfg.order_lines}")
        lines.append(f"seed={cfg.seed}")
    else:
        raise TypeError(f"unknown workload config {type(cfg)!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_config(path: str):
    kv: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    kind = kv.get("workload")
    if kind == "ycsb":
        cfg = YcsbExtConfig(
            n_keys=int(kv.get("n_keys", 1000)),
            ops_per_txn=int(kv.get("ops_per_txn", 10)),
            pattern=tuple(int(c) for c in kv.get("pattern", "0001000000")),
            read_write_list=tuple(
                WRITE if c == "W" else READ
                for c in kv.get("read_write_list", "RWRWRWRWRW")),
            theta_hot=float(kv.get("theta_hot", 1.0)),
            theta_cold=float(kv.get("theta_cold", 0.0)),
            threads=int(kv.get("threads", 16)),
            seed=int(kv.get("seed", 1)),
            txn_len=int(kv["txn_len"]) if "txn_len" in kv else None,
            read_ratio=float(kv["read_ratio"]) if "read_ratio" in kv else None,
        )
        return cfg
    if kind == "tpcc":
        return TpccConfig(
            warehouses=int(kv.get("warehouses", 1)),
            threads=int(kv.get("threads", 16)),
            mix=tuple(int(m) for m in kv.get("mix", "45,43,4,4,4").split(",")),
            order_slots=int(kv.get("order_slots", 64)),
            order_lines=int(kv.get("order_lines", 3)),
            seed=int(kv.get("seed", 1)),
        )
    raise ValueError(f"unknown workload kind {kind!r} in {path}")
