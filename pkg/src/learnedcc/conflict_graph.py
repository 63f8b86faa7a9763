"""Static conflict graph over (transaction type, operation index) nodes and
the search that shrinks it.

Nodes conflict when their operations touch the same table and at least one
writes.  Two monotone mutation families reduce the graph: merging a node
into its successor (the write batch exposes later) and marking a node
optimistic (its edges are cut).  Pipeline waits are recomputed from the
reduced graph; since mutations only ever shrink the effective graph, the
search space is finite and the population search terminates.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional

from .agent import Action, AgentFunction, NO_DETECTION
from .features import FeatureSelector
from .workloads import WorkloadStatic

Node = tuple[int, int]   # (txn_type 1-based, op_index 1-based)


@dataclass(frozen=True)
class ConflictGraph:
    nodes: tuple[Node, ...]
    edges: frozenset[tuple[Node, Node]]   # stored with endpoints sorted

    def __contains__(self, pair) -> bool:
        a, b = pair
        return ((a, b) if a <= b else (b, a)) in self.edges


def build_full_graph(static: WorkloadStatic) -> ConflictGraph:
    nodes = []
    info = {}
    for t in range(1, static.n_types + 1):
        for i, (table, is_write) in enumerate(static.ops_of(t), start=1):
            node = (t, i)
            nodes.append(node)
            info[node] = (table, is_write)
    edges = set()
    for i, a in enumerate(nodes):
        ta, wa = info[a]
        for b in nodes[i + 1:]:
            tb, wb = info[b]
            if ta == tb and (wa or wb):
                edges.add((a, b))
    return ConflictGraph(tuple(nodes), frozenset(edges))


@dataclass(frozen=True)
class Modifications:
    """Boolean maps over the mutable (learned-type) nodes: ve marks a node
    merged with its successor, vo marks it optimistic (edges cut).  ve is
    pinned false on each type's last operation."""

    ve: dict[Node, bool]
    vo: dict[Node, bool]

    @staticmethod
    def all_false(graph: ConflictGraph,
                  learned: Optional[tuple[int, ...]] = None) -> "Modifications":
        nodes = [n for n in graph.nodes if learned is None or n[0] in learned]
        return Modifications(ve={n: False for n in nodes},
                             vo={n: False for n in nodes})

    def merged(self, node: Node) -> bool:
        return self.ve.get(node, False)

    def optimistic(self, node: Node) -> bool:
        return self.vo.get(node, False)

    def canonical(self) -> tuple:
        return (
            tuple(sorted((n, v) for n, v in self.ve.items())),
            tuple(sorted((n, v) for n, v in self.vo.items())),
        )

    def is_all_false(self) -> bool:
        return not any(self.ve.values()) and not any(self.vo.values())

    def effective_counts(self, graph: ConflictGraph) -> tuple[int, int]:
        n_nodes = len(graph.nodes) - sum(1 for v in self.ve.values() if v)
        n_edges = sum(
            1 for (a, b) in graph.edges
            if not self.vo.get(a, False) and not self.vo.get(b, False)
        )
        return n_nodes, n_edges


def _last_op_nodes(static: WorkloadStatic) -> set[Node]:
    return {(t, len(static.ops_of(t))) for t in range(1, static.n_types + 1)}


def cut_edge_set(graph: ConflictGraph, mods: Modifications) -> frozenset:
    return frozenset(
        (a, b) for (a, b) in graph.edges
        if not mods.optimistic(a) and not mods.optimistic(b)
    )


def get_wait_actions(op: Node, target_type: int, mods: Modifications,
                     last_exposed: tuple[Node, ...], *,
                     graph: ConflictGraph, static: WorkloadStatic,
                     cut_edges: Optional[frozenset] = None,
                     memo: Optional[dict] = None) -> int:
    """Pipeline wait for `op` against transactions of `target_type`.

    Scans the target type's operations newest-first, tracking the expose
    point that covers each merged batch: a conflicting read requires
    waiting for that read itself, a conflicting write requires waiting for
    the operation that will expose it.  Write operations defer their own
    wait until the batch containing them is exposed, at which point the
    exposing operation inherits the largest deferred wait (read via memo).
    """
    if cut_edges is None:
        cut_edges = cut_edge_set(graph, mods)
    if memo is None:
        memo = {}
    ops = static.ops_of(target_type)
    n = len(ops)
    last_expose_point = n + 1
    wait = 0
    for i in range(n, 0, -1):
        other = (target_type, i)
        if not mods.merged(other):
            last_expose_point = i
        pair = (op, other) if op <= other else (other, op)
        if op != other and pair in cut_edges:
            if not ops[i - 1][1]:       # conflicting read
                wait = i
            else:                        # conflicting write
                wait = last_expose_point
            break
    memo[(op, target_type)] = wait

    op_is_write = static.ops_of(op[0])[op[1] - 1][1]
    res = 0 if op_is_write else wait
    for prev in last_exposed:
        if static.ops_of(prev[0])[prev[1] - 1][1]:   # deferred write wait
            prev_wait = memo.get((prev, target_type), 0)
            if prev_wait > res:
                res = prev_wait
    return res


def _static_buckets(selector: FeatureSelector, txn_type: int, op_index: int,
                    is_write: bool) -> dict[int, int]:
    """Bucket values of the statically-determined features for one node;
    runtime features are wildcards."""
    out = {}
    positions = selector.included_ids()
    for pos, fid in enumerate(positions):
        spec = selector.specs[fid - 1]
        if fid == 1:
            out[pos] = spec.bucket_of(txn_type)
        elif fid == 2:
            out[pos] = spec.bucket_of(op_index)
        elif fid == 3:
            out[pos] = spec.bucket_of(1 if is_write else 0)
    return out


def producers_of_state(selector: FeatureSelector, static: WorkloadStatic,
                       state: tuple) -> list[Node]:
    """All (type, op-index) nodes whose execution can generate `state`:
    static feature buckets must match, runtime features match anything."""
    out = []
    for t in range(1, static.n_types + 1):
        for i, (_, is_write) in enumerate(static.ops_of(t), start=1):
            buckets = _static_buckets(selector, t, i, is_write)
            if all(state[pos] == b for pos, b in buckets.items()):
                out.append((t, i))
    return out


def update_wait_actions(mods: Modifications, best: AgentFunction,
                        static: WorkloadStatic, selector: FeatureSelector,
                        graph: Optional[ConflictGraph] = None) -> AgentFunction:
    """Recompute every row's pipeline waits (and expose windows) from the
    modified graph, keeping the other action fields of `best`.

    A state reachable from several nodes takes the longest wait so no
    dependency cycle can slip through; a state whose every producer ends up
    disconnected in the cut graph (edges cut, or none to begin with) runs
    without detection since its accesses cannot conflict.
    """
    if graph is None:
        graph = build_full_graph(static)
    cut_edges = cut_edge_set(graph, mods)
    degree: dict[Node, int] = {n: 0 for n in graph.nodes}
    for a, b in cut_edges:
        degree[a] += 1
        degree[b] += 1
    memo: dict = {}
    wait_act: dict[tuple[int, int, int], int] = {}

    for t in range(1, static.n_types + 1):
        n_ops = len(static.ops_of(t))
        for target in range(1, static.n_types + 1):
            unexposed: list[Node] = []
            to_expose: tuple[Node, ...] = ()
            for i in range(1, n_ops + 1):
                op = (t, i)
                wait_act[(t, target, i)] = get_wait_actions(
                    op, target, mods, to_expose,
                    graph=graph, static=static, cut_edges=cut_edges, memo=memo)
                unexposed.append(op)
                to_expose = ()
                if not mods.merged(op):
                    to_expose = tuple(unexposed)
                    unexposed = []

    table: dict[tuple, Action] = {}
    for state in selector.key_space():
        producers = producers_of_state(selector, static, state)
        base = best.get_cc(state)
        waits = []
        for target in range(1, static.n_types + 1):
            w = 0
            for (t, i) in producers:
                w = max(w, wait_act[(t, target, i)])
            waits.append(w)
        is_optimistic = all(degree.get(node, 0) == 0 for node in producers)
        a_d = NO_DETECTION if is_optimistic else base.a_d
        expose = base.expose and producers != [] and all(
            not mods.merged(node) for node in producers)
        table[state] = Action(a_d, base.a_t, base.a_p, tuple(waits), expose)

    return best.replace_rows(table)


def mutate(mods: Modifications, prob: float, rng: random.Random,
           static: WorkloadStatic) -> Modifications:
    """Independently flip false entries to true with probability prob;
    true entries never revert, and merge stays off each type's last op."""
    last_ops = _last_op_nodes(static)
    ve = dict(mods.ve)
    vo = dict(mods.vo)
    for node, flag in ve.items():
        if not flag and node not in last_ops and rng.random() < prob:
            ve[node] = True
    for node, flag in vo.items():
        if not flag and rng.random() < prob:
            vo[node] = True
    return Modifications(ve=ve, vo=vo)


@dataclass
class Individual:
    mods: Modifications
    func: AgentFunction
    score: float


class SearchTrace:
    """Optional instrumentation: parent/child effective sizes per accepted
    mutation, for shrink-monotonicity checks."""

    def __init__(self):
        self.steps: list[tuple[tuple[int, int], tuple[int, int]]] = []

    def record(self, parent_counts, child_counts):
        self.steps.append((parent_counts, child_counts))


def graph_reduction_search(
    static: WorkloadStatic,
    selector: FeatureSelector,
    initial_func: AgentFunction,
    initial_score: float,
    evaluate: Callable[[AgentFunction], Optional[float]],
    rng: random.Random,
    *,
    branch_factor: int = 4,
    mutate_rate: float = 0.05,
    K: int = 4,
    max_try: int = 16,
    max_step: int = 3,
    trace: Optional[SearchTrace] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[AgentFunction, float]:
    """Population search over graph modifications.

    Starts from the unmodified graph; each individual spawns branch_factor
    deduplicated mutations and only the K best survive a round.  evaluate
    returns None once the caller's budget runs out, which ends the search
    with the best function seen so far.
    """
    graph = build_full_graph(static)
    best_func, best_score = initial_func, initial_score
    start_mods = Modifications.all_false(graph, static.learned)
    if log:
        log(f"graph_search start nodes={len(graph.nodes)} edges={len(graph.edges)} "
            f"K={K} mods=all-false")
    if not graph.edges or not start_mods.ve:
        return best_func, best_score     # nothing to cut or merge

    pop: list[Individual] = [Individual(start_mods, initial_func, initial_score)]
    searched = {start_mods.canonical()}
    prev_pop_key = None
    unchanged_rounds = 0

    while pop:
        children: list[Individual] = []
        exhausted: list[Individual] = []
        for ind in pop:
            for _ in range(branch_factor):
                child = mutate(ind.mods, mutate_rate, rng, static)
                tries = 1
                while child.canonical() in searched and tries <= max_try:
                    child = mutate(ind.mods, mutate_rate, rng, static)
                    tries += 1
                if tries > max_try:
                    exhausted.append(ind)
                    break
                searched.add(child.canonical())
                func = update_wait_actions(child, best_func, static, selector, graph)
                score = evaluate(func)
                if score is None:
                    return best_func, best_score
                if trace is not None:
                    trace.record(ind.mods.effective_counts(graph),
                                 child.effective_counts(graph))
                if score > best_score:
                    best_func, best_score = func, score
                children.append(Individual(child, func, score))

        pool = [ind for ind in pop if ind not in exhausted] + children
        pool.sort(key=lambda ind: -ind.score)
        pop = pool[:K]
        pop_key = tuple(ind.mods.canonical() for ind in pop)
        if pop_key == prev_pop_key:
            unchanged_rounds += 1
            if unchanged_rounds >= max_step:
                break
        else:
            unchanged_rounds = 0
            prev_pop_key = pop_key

    return best_func, best_score


# -- debug dump ------------------------------------------------------------------

def dump_graph(graph: ConflictGraph, mods: Optional[Modifications] = None) -> str:
    def fmt(node: Node) -> str:
        return f"{node[0]}:{node[1]}"

    lines = [f"node {fmt(n)}" for n in graph.nodes]
    lines += [f"edge {fmt(a)} {fmt(b)}" for a, b in sorted(graph.edges)]
    if mods is not None:
        lines += [f"merge {fmt(n)}" for n, v in sorted(mods.ve.items()) if v]
        lines += [f"cut {fmt(n)}" for n, v in sorted(mods.vo.items()) if v]
    return "\n".join(lines) + "\n"
