"""Command-line entry points.

    learnedcc bench    --workload w.cfg --baseline occ --seconds 5 --out dir
    learnedcc optimize --workload w.cfg --budget 600 --out dir
    learnedcc inspect  dir/table.ccaalf
    learnedcc verify   --workload w.cfg --baseline ic3 --txns 2000

bench writes throughput.csv and a summary line; optimize writes
optlog.csv, events.log and table.ccaalf; verify replays the recorded
history through the serializability checker and fails loudly on any
divergence (dumping history.txt for triage).
"""

from __future__ import annotations

import argparse
import os
import random
import sys
import time
from dataclasses import dataclass
from typing import Optional

from . import agent, conflict_graph, executor, features, optimizer, oracle, workloads
from .engine import INTERACTIVE, STORED_PROCEDURE

LOG_VERBOSITY_ENV = "LEARNEDCC_LOG"


@dataclass
class RunConfig:
    workload_path: str
    mode: int
    baseline: Optional[str]
    table_path: Optional[str]
    budget_s: float
    seed: int
    out_dir: str
    verify: bool = False
    seconds: float = 5.0
    txns: int = 2000
    init: Optional[str] = None
    drift_demo: bool = False

    def __post_init__(self):
        chosen = sum(1 for x in (self.baseline, self.table_path) if x)
        if chosen > 1:
            raise ValueError("specify only one of --baseline / --table")


def _log_enabled() -> bool:
    return os.environ.get(LOG_VERBOSITY_ENV, "0") not in ("0", "")


def _say(msg: str) -> None:
    print(msg, flush=True)


def _load_workload(path: str):
    return workloads.make_workload(workloads.read_config(path))


def _baseline_func(name: str, workload) -> agent.AgentFunction:
    static = workload.static
    if name == "occ":
        return agent.encode_occ(static.n_types)
    if name == "2pl":
        return agent.encode_2pl(static.n_types)
    if name == "ic3":
        return agent.encode_ic3(static, workload.selector())
    if name == "asocc":
        return agent.encode_asocc(static.n_types, cold_max=1, hot_min=6)
    raise ValueError(f"unknown baseline {name!r} (occ, 2pl, ic3, asocc)")


def _resolve_function(cfg: RunConfig, workload) -> agent.AgentFunction:
    if cfg.baseline:
        return _baseline_func(cfg.baseline, workload)
    if cfg.table_path:
        with open(cfg.table_path, encoding="utf-8") as f:
            func = agent.deserialize(f.read())
        return func
    raise ValueError("no agent function specified")


def _context_for(cfg: RunConfig, workload, func) -> executor.ExecContext:
    ctx = executor.make_context(workload, func)
    if cfg.table_path:
        sidecar = cfg.table_path + ".selector"
        if os.path.exists(sidecar):
            with open(sidecar, encoding="utf-8") as f:
                ctx.register_selector(features.deserialize_selector(f.read()))
    if func.selector_id not in ctx.selectors:
        raise ValueError(f"table references unknown selector {func.selector_id!r}; "
                         f"provide {cfg.table_path}.selector")
    return ctx


def cmd_bench(cfg: RunConfig) -> int:
    workload = _load_workload(cfg.workload_path)
    func = _resolve_function(cfg, workload)
    ctx = _context_for(cfg, workload, func)
    os.makedirs(cfg.out_dir, exist_ok=True)

    if cfg.verify:
        history, rctx = executor.run_recorded(
            workload, func, cfg.txns, mode=cfg.mode, seed=cfg.seed)
        result = oracle.check_serializable(history)
        acyclic = oracle.check_commit_dag_acyclic(history)
        _say(f"verify: txns={len(history.committed())} serializable={result.ok} "
             f"commit_dag_acyclic={acyclic}")
        if not result.ok or not acyclic:
            path = os.path.join(cfg.out_dir, "history.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write(oracle.dump_history(history))
            _say(f"verify FAILED: {result.divergence}; history dumped to {path}")
            return 1

    window_s = 2.0
    rows = []
    elapsed = 0.0
    first = True
    while elapsed < cfg.seconds:
        measure = min(window_s, cfg.seconds - elapsed)
        report = executor.evaluate_score(
            ctx, func, warmup_s=1.0 if first else 0.0, measure_s=measure,
            mode=cfg.mode, seed=cfg.seed)
        rows.append(report.csv_row(time.time(), ctx.active.current.version))
        elapsed += report.duration
        first = False

    csv_path = os.path.join(cfg.out_dir, "throughput.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("ts,version,throughput,abort_rate,per_type\n")
        f.write("\n".join(rows) + "\n")
    last = rows[-1].split(",")
    _say(f"bench: throughput={last[2]} txns/s abort_rate={last[3]} -> {csv_path}")
    return 0


def _write_optlog(path: str, log_rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter,stage,score,best_score,wall_s\n")
        for it, stage, score, best, wall in log_rows:
            f.write(f"{it},{stage},{score:.2f},{best:.2f},{wall:.2f}\n")


def cmd_optimize(cfg: RunConfig) -> int:
    workload = _load_workload(cfg.workload_path)
    init_name = cfg.init or ("2pl" if cfg.mode == INTERACTIVE else "ic3")
    initial = _baseline_func(init_name, workload)
    ctx = executor.make_context(workload, initial)
    os.makedirs(cfg.out_dir, exist_ok=True)
    selector = workload.selector()
    rng = random.Random(cfg.seed)
    log = _say if _log_enabled() else None

    references = [_baseline_func(n, workload) for n in ("occ", "2pl")
                  if n != init_name]

    events: list[str] = []

    def score_fn_for(threads: Optional[int]):
        return lambda f: executor.evaluate_score(
            ctx, f, mode=cfg.mode, seed=cfg.seed, threads=threads).throughput

    if not cfg.drift_demo:
        result = optimizer.run_pipeline(
            score_fn_for(None), initial, cfg.budget_s, workload.static,
            selector, rng, reference_funcs=references, log=log)
        events.extend(result.events)
        all_rows = result.log_rows
        best = result.best_func
        _say(f"optimize: best_score={result.best_score:.1f} txns/s "
             f"time_to_best={result.time_to_best:.1f}s evals={len(result.history)}")
    else:
        phases = (1, 16, 4)
        phase_budget = cfg.budget_s / len(phases)
        all_rows = []
        best = initial
        best_score = float("-inf")
        detector = optimizer.DriftDetector()
        for i, threads in enumerate(phases):
            if i == 0:
                events.append(f"phase {i + 1} threads={threads} initial optimization")
            else:
                # run the previous function under the new load until the
                # monitor trips
                detector.set_reference(None if best_score == float("-inf") else best_score)
                windows = 0
                while windows < 50:
                    rep = executor.evaluate_score(
                        ctx, best, warmup_s=0.0, measure_s=detector.window_s,
                        mode=cfg.mode, seed=cfg.seed, threads=threads)
                    windows += 1
                    if detector.update(rep.throughput):
                        events.append(
                            f"phase {i + 1} threads={threads} drift detected after "
                            f"{windows} windows")
                        break
                events.append("drift_restart history=cleared init=" + init_name)
            result = optimizer.run_pipeline(
                score_fn_for(threads), initial, phase_budget, workload.static,
                selector, rng, reference_funcs=references if i == 0 else (),
                log=log)
            events.extend(result.events)
            offset = all_rows[-1][0] if all_rows else 0
            all_rows.extend((it + offset, st, sc, b, w)
                            for it, st, sc, b, w in result.log_rows)
            best, best_score = result.best_func, result.best_score
            detector.set_reference(best_score)
            _say(f"phase {i + 1} (threads={threads}): best={best_score:.1f} txns/s")

    _write_optlog(os.path.join(cfg.out_dir, "optlog.csv"), all_rows)
    with open(os.path.join(cfg.out_dir, "events.log"), "w", encoding="utf-8") as f:
        f.write("\n".join(events) + "\n")
    table_path = os.path.join(cfg.out_dir, "table.ccaalf")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(agent.serialize(best))
    with open(table_path + ".selector", "w", encoding="utf-8") as f:
        f.write(features.serialize_selector(selector))
    _say(f"optimize: table -> {table_path}")
    return 0


def cmd_inspect(table_path: str) -> int:
    if not os.path.exists(table_path):
        _say(f"inspect: no such file {table_path}")
        return 1
    try:
        with open(table_path, encoding="utf-8") as f:
            func = agent.deserialize(f.read())
    except agent.ParseError as exc:
        _say(f"inspect: parse error: {exc}")
        return 1
    names = {agent.NO_DETECTION: "no-detection",
             agent.DETECT_CRITICAL: "detect-critical",
             agent.DETECT_ALL: "detect-all"}
    hist: dict[str, int] = {}
    for action in list(func.table.values()) + [func.default]:
        label = names[action.a_d]
        hist[label] = hist.get(label, 0) + 1
    _say(f"table: selector={func.selector_id} ntypes={func.n_types} "
         f"rows={func.rows()} (cap {agent.MAX_TABLE_ROWS})")
    for state in sorted(func.table):
        a = func.table[state]
        timeout = "inf" if a.a_t == float("inf") else f"{a.a_t:.0f}us"
        _say(f"  {','.join(map(str, state)):>12}  {names[a.a_d]:<16} t={timeout:<8} "
             f"p={a.a_p:.2f} expose={int(a.expose)} w={list(a.waits)}")
    a = func.default
    timeout = "inf" if a.a_t == float("inf") else f"{a.a_t:.0f}us"
    _say(f"  {'default':>12}  {names[a.a_d]:<16} t={timeout:<8} "
         f"p={a.a_p:.2f} expose={int(a.expose)} w={list(a.waits)}")
    _say("detection histogram: " +
         ", ".join(f"{k}={v}" for k, v in sorted(hist.items())))
    _say(f"backoff: {[round(b, 1) for b in func.backoff]} us")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    cfg.verify = True
    workload = _load_workload(cfg.workload_path)
    func = _resolve_function(cfg, workload)
    _context_for(cfg, workload, func)   # validates selector availability
    os.makedirs(cfg.out_dir, exist_ok=True)
    history, ctx = executor.run_recorded(
        workload, func, cfg.txns, mode=cfg.mode, seed=cfg.seed)
    result = oracle.check_serializable(history)
    acyclic = oracle.check_commit_dag_acyclic(history)
    _say(f"verify: committed={len(history.committed())} "
         f"aborted_attempts={history.aborted_attempts} "
         f"serializable={result.ok} commit_dag_acyclic={acyclic}")
    if cfg.mode == INTERACTIVE:
        _say(f"verify: dirty_reads={ctx.dirty_read_count} exposes={ctx.expose_count}")
    if result.ok and acyclic:
        return 0
    path = os.path.join(cfg.out_dir, "history.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(oracle.dump_history(history))
    _say(f"verify FAILED: {result.divergence or 'dependency cycle'}; see {path}")
    return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnedcc")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, budget=False):
        p.add_argument("--workload", required=True, help="workload config file")
        p.add_argument("--mode", choices=("stored", "interactive"), default="stored")
        p.add_argument("--baseline", choices=("occ", "2pl", "ic3", "asocc"))
        p.add_argument("--table", dest="table_path")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--out", dest="out_dir", default="out")

    b = sub.add_parser("bench", help="run one agent function, emit throughput CSV")
    common(b)
    b.add_argument("--seconds", type=float, default=5.0)
    b.add_argument("--verify", action="store_true",
                   help="record history and require the replay check to pass")
    b.add_argument("--txns", type=int, default=2000,
                   help="transactions for the verify pass")

    o = sub.add_parser("optimize", help="learn an agent function under a budget")
    common(o)
    o.add_argument("--budget", dest="budget_s", type=float, default=600.0)
    o.add_argument("--init", choices=("occ", "2pl", "ic3"))
    o.add_argument("--drift-demo", action="store_true",
                   help="three-phase load shift with drift-triggered restarts")

    i = sub.add_parser("inspect", help="pretty-print a table file")
    i.add_argument("table_path")

    v = sub.add_parser("verify", help="recorded run + serializability oracle")
    common(v)
    v.add_argument("--txns", type=int, default=2000)

    return parser


def _to_runconfig(args) -> RunConfig:
    return RunConfig(
        workload_path=args.workload,
        mode=INTERACTIVE if args.mode == "interactive" else STORED_PROCEDURE,
        baseline=getattr(args, "baseline", None),
        table_path=getattr(args, "table_path", None),
        budget_s=getattr(args, "budget_s", 600.0),
        seed=args.seed,
        out_dir=args.out_dir,
        verify=getattr(args, "verify", False),
        seconds=getattr(args, "seconds", 5.0),
        txns=getattr(args, "txns", 2000),
        init=getattr(args, "init", None),
        drift_demo=getattr(args, "drift_demo", False),
    )


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.table_path)
        cfg = _to_runconfig(args)
        if args.command == "bench":
            if not cfg.baseline and not cfg.table_path:
                raise ValueError("bench needs --baseline or --table")
            return cmd_bench(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg)
        if args.command == "verify":
            if not cfg.baseline and not cfg.table_path:
                raise ValueError("verify needs --baseline or --table")
            return cmd_verify(cfg)
        raise ValueError(f"unknown command {args.command}")
    except (ValueError, OSError, agent.ParseError) as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
