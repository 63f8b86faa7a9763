"""Offline learning stack: Gaussian-process surrogate with UCB proposals,
the staged optimization pipeline, throughput drift detection, and feature
selector search.

Scores are z-normalized before fitting; the surrogate is an isotropic RBF
GP whose hyperparameters maximize the log marginal likelihood (multi-start
L-BFGS-B on analytic gradients).  Proposals maximize UCB = mu + lambda *
sigma, with the returned point guaranteed to score at least as high as the
best of 1000 uniform candidates.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.optimize import minimize

from . import conflict_graph, features
from .agent import Action, AgentFunction, DETECT_ALL, DETECT_CRITICAL, INF, NO_DETECTION
from .features import DEFAULT_RANGES, FeatureSelector, FeatureSpec, TRANSFORMS
from .workloads import WorkloadStatic

UCB_LAMBDA = 2.576          # 99th percentile of the standard normal

TIMEOUT_MAX_US = 10_000.0   # log-scale ceiling; u=1 maps to blocking
BACKOFF_MAX_US = 100_000.0
_BLOCK_THRESHOLD = 0.98

_JITTER = 1e-10
_THETA_BOUNDS = [(-4.6, 2.3), (-6.9, 2.3), (-18.4, 0.0)]   # log l, log sf, log sn
_NOISE_FLOOR = 1e-8


# -- Gaussian process ---------------------------------------------------------

def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum(
        (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T), 0.0)


def log_marginal_likelihood(theta: np.ndarray, X: np.ndarray,
                            y: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient w.r.t. (log lengthscale, log signal, log noise)."""
    n = len(y)
    ell, sf, sn = np.exp(theta)
    d2 = _sqdist(X, X)
    R = np.exp(-0.5 * d2 / (ell * ell))
    K = sf * sf * R + (sn * sn + _JITTER) * np.eye(n)
    L = sla.cholesky(K, lower=True)
    alpha = sla.cho_solve((L, True), y)
    lml = (-0.5 * float(y @ alpha)
           - float(np.log(np.diag(L)).sum())
           - 0.5 * n * math.log(2.0 * math.pi))

    Kinv = sla.cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    dK_dl = sf * sf * R * (d2 / (ell * ell))
    dK_dsf = 2.0 * sf * sf * R
    dK_dsn = 2.0 * sn * sn * np.eye(n)
    grad = np.array([
        0.5 * float((W * dK_dl).sum()),
        0.5 * float((W * dK_dsf).sum()),
        0.5 * float((W * dK_dsn).sum()),
    ])
    return lml, grad


@dataclass
class GPSurrogate:
    X: np.ndarray
    y_z: np.ndarray
    theta: np.ndarray            # log (lengthscale, signal std, noise std)
    L: np.ndarray                # cached Cholesky factor of K
    alpha: np.ndarray
    y_mean: float
    y_std: float

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.theta[0]))

    @property
    def signal_std(self) -> float:
        return float(np.exp(self.theta[1]))

    def _kstar(self, P: np.ndarray) -> np.ndarray:
        ell, sf = np.exp(self.theta[0]), np.exp(self.theta[1])
        return sf * sf * np.exp(-0.5 * _sqdist(P, self.X) / (ell * ell))

    def predict_batch(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        P = np.atleast_2d(P)
        if len(self.X) == 0:
            sf = float(np.exp(self.theta[1]))
            mean = np.full(len(P), self.y_mean)
            std = np.full(len(P), sf * self.y_std)
            return mean, std
        ks = self._kstar(P)
        mean_z = ks @ self.alpha
        v = sla.solve_triangular(self.L, ks.T, lower=True)
        sf = float(np.exp(self.theta[1]))
        var = np.maximum(sf * sf - (v * v).sum(0), 0.0)
        return (mean_z * self.y_std + self.y_mean,
                np.sqrt(var) * self.y_std)

    def predict(self, p: np.ndarray) -> tuple[float, float]:
        mean, std = self.predict_batch(np.asarray(p, dtype=float)[None, :])
        return float(mean[0]), float(std[0])

    def ucb_and_grad(self, p: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
        if len(self.X) == 0:
            return self.y_mean + lam * self.signal_std * self.y_std, np.zeros_like(p)
        ell = self.lengthscale
        ks = self._kstar(p[None, :])[0]
        mean_z = float(ks @ self.alpha)
        kinv_ks = sla.cho_solve((self.L, True), ks)
        sf = self.signal_std
        var = max(sf * sf - float(ks @ kinv_ks), 0.0)
        sigma = math.sqrt(var)

        dks = ks[:, None] * (self.X - p[None, :]) / (ell * ell)   # (n, d)
        dmean = self.alpha @ dks
        if sigma > 1e-12:
            dsigma = -(kinv_ks @ dks) / sigma
        else:
            dsigma = np.zeros_like(p)
        ucb = (mean_z + lam * sigma) * self.y_std + self.y_mean
        grad = (dmean + lam * dsigma) * self.y_std
        return ucb, grad


def fit(X: Sequence[Sequence[float]], y: Sequence[float],
        rng: Optional[random.Random] = None, n_starts: int = 6) -> GPSurrogate:
    """Fit the surrogate to evaluation history.  With fewer than two points
    the prior (default hyperparameters, constant mean) is returned."""
    rng = rng or random.Random(0)
    Xa = np.asarray(list(X), dtype=float)
    ya = np.asarray(list(y), dtype=float)
    if Xa.ndim == 1:
        Xa = Xa.reshape(len(ya), -1)
    y_mean = float(ya.mean()) if len(ya) else 0.0
    y_std = float(ya.std()) if len(ya) > 1 and ya.std() > 1e-12 else 1.0
    y_z = (ya - y_mean) / y_std

    default_theta = np.array([math.log(0.3), 0.0, math.log(1e-2)])
    if len(ya) < 2:
        Xfit = Xa if len(ya) else np.zeros((0, 1))
        theta = default_theta.copy()
        theta[2] = math.log(_NOISE_FLOOR)
        if len(ya):
            n = len(ya)
            ell, sf, sn = np.exp(theta)
            K = sf * sf * np.exp(-0.5 * _sqdist(Xfit, Xfit) / (ell * ell)) \
                + (sn * sn + _JITTER) * np.eye(n)
            L = sla.cholesky(K, lower=True)
            alpha = sla.cho_solve((L, True), y_z)
        else:
            L = np.zeros((0, 0))
            alpha = np.zeros(0)
        return GPSurrogate(Xfit, y_z, theta, L, alpha, y_mean, y_std)

    def neg_lml(theta):
        try:
            v, g = log_marginal_likelihood(theta, Xa, y_z)
        except sla.LinAlgError:
            return 1e12, np.zeros(3)
        return -v, -g

    starts = [default_theta]
    for _ in range(n_starts - 1):
        starts.append(np.array([
            rng.uniform(*_THETA_BOUNDS[0]),
            rng.uniform(-2.0, 1.0),
            rng.uniform(-9.0, -1.0),
        ]))
    best_theta, best_val = default_theta, math.inf
    for s in starts:
        res = minimize(neg_lml, s, jac=True, method="L-BFGS-B",
                       bounds=_THETA_BOUNDS)
        if res.fun < best_val:
            best_val, best_theta = res.fun, res.x

    ell, sf, sn = np.exp(best_theta)
    K = sf * sf * np.exp(-0.5 * _sqdist(Xa, Xa) / (ell * ell)) \
        + (sn * sn + _JITTER) * np.eye(len(ya))
    L = sla.cholesky(K, lower=True)
    alpha = sla.cho_solve((L, True), y_z)
    return GPSurrogate(Xa, y_z, best_theta, L, alpha, y_mean, y_std)


def predict(g: GPSurrogate, p) -> tuple[float, float]:
    return g.predict(np.asarray(p, dtype=float))


def propose_next(g: GPSurrogate, lam: float = UCB_LAMBDA,
                 rng: Optional[random.Random] = None,
                 dim: Optional[int] = None,
                 n_starts: int = 16, n_candidates: int = 1000) -> np.ndarray:
    """Maximize UCB over the unit box.  The candidate sweep both seeds the
    local searches and lower-bounds the returned point's score."""
    rng = rng or random.Random(0)
    d = dim if dim is not None else (g.X.shape[1] if len(g.X) else 1)
    if len(g.X) == 0:
        return np.array([rng.random() for _ in range(d)])

    npr = np.random.default_rng(rng.getrandbits(32))
    cands = npr.random((n_candidates, d))
    mean, std = g.predict_batch(cands)
    scores = mean + lam * std
    order = np.argsort(scores)[::-1]

    best_p = cands[order[0]].copy()
    best_u = float(scores[order[0]])

    def neg_ucb(p):
        u, grad = g.ucb_and_grad(p, lam)
        return -u, -grad

    starts = [cands[i] for i in order[: n_starts // 2]]
    starts += [npr.random(d) for _ in range(n_starts - len(starts))]
    bounds = [(0.0, 1.0)] * d
    for s in starts:
        res = minimize(neg_ucb, s, jac=True, method="L-BFGS-B", bounds=bounds)
        if -res.fun > best_u:
            best_u, best_p = -res.fun, np.clip(res.x, 0.0, 1.0)
    return best_p


# -- parameter codecs -----------------------------------------------------------

def encode_timeout(t_us: float) -> float:
    if t_us == INF or t_us >= TIMEOUT_MAX_US:
        return 1.0
    return math.log1p(max(t_us, 0.0)) / math.log1p(TIMEOUT_MAX_US)


def decode_timeout(u: float) -> float:
    if u >= _BLOCK_THRESHOLD:
        return INF
    return math.expm1(max(u, 0.0) * math.log1p(TIMEOUT_MAX_US))


def encode_backoff(b_us: float) -> float:
    return math.log1p(min(max(b_us, 0.0), BACKOFF_MAX_US)) / math.log1p(BACKOFF_MAX_US)


def decode_backoff(u: float) -> float:
    return math.expm1(min(max(u, 0.0), 1.0) * math.log1p(BACKOFF_MAX_US))


class TimeoutSpace:
    """Per-row timeout plus per-type backoff, log-scaled to the unit box."""

    def __init__(self, selector: FeatureSelector, n_types: int):
        self.states = sorted(selector.key_space())
        self.n_types = n_types
        self.dim = len(self.states) + n_types
        self.selector_id = selector.id

    def encode(self, func: AgentFunction) -> Optional[np.ndarray]:
        if func.selector_id != self.selector_id or func.n_types != self.n_types:
            return None
        vec = [encode_timeout(func.get_cc(s).a_t) for s in self.states]
        vec += [encode_backoff(b) for b in func.backoff]
        return np.array(vec)

    def decode(self, vec: np.ndarray, base: AgentFunction) -> AgentFunction:
        table = {}
        for i, s in enumerate(self.states):
            row = base.get_cc(s)
            table[s] = row._replace(a_t=decode_timeout(float(vec[i])))
        backoff = tuple(decode_backoff(float(v)) for v in vec[len(self.states):])
        return base.replace_rows(table, backoff=backoff)


class FullSpace:
    """Everything tunable at the final stage: per-row timeout, priority,
    one-hot-relaxed detection mode and scaled waits, plus backoffs.  The
    expose flags stay owned by the graph reduction stages."""

    ROW_FIXED = 5   # a_t, a_p, 3-way detection one-hot

    def __init__(self, selector: FeatureSelector, static: WorkloadStatic):
        self.states = sorted(selector.key_space())
        self.static = static
        self.n_types = static.n_types
        self.row_dim = self.ROW_FIXED + self.n_types
        self.dim = len(self.states) * self.row_dim + self.n_types
        self.selector_id = selector.id

    def encode(self, func: AgentFunction) -> Optional[np.ndarray]:
        if func.selector_id != self.selector_id or func.n_types != self.n_types:
            return None
        vec: list[float] = []
        counts = self.static.op_counts
        for s in self.states:
            row = func.get_cc(s)
            one_hot = [0.0, 0.0, 0.0]
            one_hot[row.a_d] = 1.0
            vec += [encode_timeout(row.a_t), row.a_p] + one_hot
            vec += [row.waits[i] / counts[i] if counts[i] else 0.0
                    for i in range(self.n_types)]
        vec += [encode_backoff(b) for b in func.backoff]
        return np.array(vec)

    def decode(self, vec: np.ndarray, base: AgentFunction) -> AgentFunction:
        table = {}
        counts = self.static.op_counts
        k = self.row_dim
        for i, s in enumerate(self.states):
            chunk = vec[i * k:(i + 1) * k]
            row = base.get_cc(s)
            a_d = int(np.argmax(chunk[2:5]))
            waits = tuple(
                min(counts[j], int(round(float(chunk[5 + j]) * counts[j])))
                for j in range(self.n_types))
            table[s] = Action(
                a_d=a_d,
                a_t=decode_timeout(float(chunk[0])),
                a_p=min(max(float(chunk[1]), 0.0), 1.0),
                waits=waits,
                expose=row.expose,
            )
        tail = vec[len(self.states) * k:]
        backoff = tuple(decode_backoff(float(v)) for v in tail)
        return base.replace_rows(table, backoff=backoff)


# -- evaluation bookkeeping --------------------------------------------------------

@dataclass
class EvaluationRecord:
    func: AgentFunction
    score: float
    stage: int
    wall_time: float
    param: Optional[np.ndarray] = None


@dataclass
class PipelineResult:
    best_func: AgentFunction
    best_score: float
    history: list[EvaluationRecord]
    log_rows: list[tuple[int, int, float, float, float]]  # iter, stage, score, best, wall
    events: list[str]
    time_to_best: float


class BudgetClock:
    def __init__(self, budget_s: float):
        self.start = time.monotonic()
        self.deadline = self.start + budget_s

    def remaining(self) -> float:
        return self.deadline - time.monotonic()

    def expired(self) -> bool:
        return time.monotonic() >= self.deadline

    def elapsed(self) -> float:
        return time.monotonic() - self.start


def materialize(func: AgentFunction, selector: FeatureSelector) -> AgentFunction:
    """Expand the table to one explicit row per reachable state so the
    per-row parameter spaces have a fixed layout."""
    return func.replace_rows({s: func.get_cc(s) for s in selector.key_space()})


def bo_stage(space, base: AgentFunction, best_score: float,
             history: list[EvaluationRecord],
             evaluate: Callable[..., Optional[float]],
             rng: random.Random, *, stage: int,
             lam: float = UCB_LAMBDA,
             stop_no_improve: Optional[int] = 20,
             max_evals: Optional[int] = None) -> tuple[AgentFunction, float]:
    """One Bayesian-optimization stage over `space`.

    Seeds the surrogate with every prior evaluation that is encodable in
    this space; stops on the no-improvement rule, on eval budget, or when
    evaluate reports the wall budget is gone (returns None).
    """
    X: list[np.ndarray] = []
    y: list[float] = []
    for rec in history:
        p = space.encode(rec.func)
        if p is not None:
            X.append(p)
            y.append(rec.score)

    best_func = base
    no_improve = 0
    n_evals = 0
    while True:
        if max_evals is not None and n_evals >= max_evals:
            break
        if len(X) >= 2:
            g = fit(X, y, rng)
            p = propose_next(g, lam, rng, dim=space.dim)
        else:
            p = np.array([rng.random() for _ in range(space.dim)])
        func = space.decode(p, best_func)
        score = evaluate(func, stage=stage, param=p)
        if score is None:
            break
        n_evals += 1
        X.append(p)
        y.append(score)
        if score > best_score:
            best_score = score
            best_func = func
            no_improve = 0
        else:
            no_improve += 1
        if stop_no_improve is not None and no_improve >= stop_no_improve:
            break
    return best_func, best_score


def run_pipeline(score_fn: Callable[[AgentFunction], float],
                 initial: AgentFunction,
                 budget_s: float,
                 static: WorkloadStatic,
                 selector: FeatureSelector,
                 rng: random.Random,
                 *,
                 reference_funcs: Sequence[AgentFunction] = (),
                 lam: float = UCB_LAMBDA,
                 branch_factor: int = 4,
                 mutate_rate: float = 0.05,
                 log: Optional[Callable[[str], None]] = None,
                 trace: Optional[conflict_graph.SearchTrace] = None,
                 ) -> PipelineResult:
    """Four stages under one wall budget: graph reduction (K=4), timeout
    tuning, deeper graph reduction (K=8), then full fine-tuning until the
    budget runs out.  Reference encodings are evaluated up front: they are
    points of the search space, so the returned function never loses to a
    baseline except by measurement noise.
    """
    clock = BudgetClock(budget_s)
    history: list[EvaluationRecord] = []
    log_rows: list[tuple[int, int, float, float, float]] = []
    events: list[str] = []
    state = {"iter": 0, "best": -math.inf, "best_func": None, "t_best": 0.0}

    def note(msg: str) -> None:
        events.append(msg)
        if log:
            log(msg)

    def evaluate(func: AgentFunction, stage: int, param=None) -> Optional[float]:
        if clock.expired():
            return None
        t0 = time.monotonic()
        score = score_fn(func)
        wall = clock.elapsed()
        state["iter"] += 1
        if score > state["best"]:
            state["best"] = score
            state["best_func"] = func
            state["t_best"] = wall
        history.append(EvaluationRecord(func, score, stage, time.monotonic() - t0,
                                        param=param))
        log_rows.append((state["iter"], stage, score, state["best"], wall))
        return score

    # stage 0: initial function and baseline reference points
    pipeline_func = materialize(initial, selector)
    pipeline_score = evaluate(pipeline_func, stage=0)
    if pipeline_score is None:
        raise ValueError("budget exhausted before the initial evaluation")
    for ref in reference_funcs:
        if evaluate(ref, stage=0) is None:
            break

    stages_done = []

    # stage 1: graph reduction, small population
    if not clock.expired():
        note(f"stage1 start graph-reduction K={branch_factor} mods=all-false")
        pipeline_func, pipeline_score = conflict_graph.graph_reduction_search(
            static, selector, pipeline_func, pipeline_score,
            lambda f: evaluate(f, stage=1), rng,
            branch_factor=branch_factor, mutate_rate=mutate_rate, K=4,
            trace=trace, log=log)
        stages_done.append(1)

    # stage 2: timeouts and backoffs
    if not clock.expired():
        note("stage2 start timeout-tuning")
        space = TimeoutSpace(selector, static.n_types)
        pipeline_func, pipeline_score = bo_stage(
            space, pipeline_func, pipeline_score, history,
            lambda f, stage, param=None: evaluate(f, stage=2, param=param),
            rng, stage=2, lam=lam, stop_no_improve=20)
        stages_done.append(2)

    # stage 3: graph reduction, larger population, restart from full graph
    if not clock.expired():
        note("stage3 start graph-reduction K=8 mods=all-false")
        pipeline_func, pipeline_score = conflict_graph.graph_reduction_search(
            static, selector, pipeline_func, pipeline_score,
            lambda f: evaluate(f, stage=3), rng,
            branch_factor=branch_factor, mutate_rate=mutate_rate, K=8,
            trace=trace, log=log)
        stages_done.append(3)

    # stage 4: everything, until the budget is gone
    if not clock.expired():
        note("stage4 start full fine-tuning")
        space = FullSpace(selector, static)
        pipeline_func, pipeline_score = bo_stage(
            space, pipeline_func, pipeline_score, history,
            lambda f, stage, param=None: evaluate(f, stage=4, param=param),
            rng, stage=4, lam=lam, stop_no_improve=None)
        stages_done.append(4)

    best_func = state["best_func"] if state["best_func"] is not None else pipeline_func
    return PipelineResult(
        best_func=best_func,
        best_score=state["best"],
        history=history,
        log_rows=log_rows,
        events=events,
        time_to_best=state["t_best"],
    )


# -- drift detection ---------------------------------------------------------------

@dataclass
class DriftDetector:
    """Threshold test on the EWMA of windowed throughput against the
    reference level captured when optimization last finished."""

    threshold: float = 0.10
    halflife_s: float = 5.0
    window_s: float = 2.0
    reference: Optional[float] = None
    ewma: Optional[float] = None

    @property
    def alpha(self) -> float:
        return 1.0 - 2.0 ** (-self.window_s / self.halflife_s)

    def set_reference(self, value: float) -> None:
        self.reference = value
        self.ewma = value

    def update(self, throughput: float) -> bool:
        if self.ewma is None:
            self.ewma = throughput
        else:
            a = self.alpha
            self.ewma = a * throughput + (1.0 - a) * self.ewma
        if not self.reference:
            return False
        return abs(self.ewma - self.reference) / self.reference > self.threshold


def detect_drift(stream: Sequence[float], reference: float,
                 detector: Optional[DriftDetector] = None) -> Optional[int]:
    """Feed a throughput stream through a detector; index of the first
    triggering window, or None."""
    det = detector or DriftDetector()
    det.set_reference(reference)
    for i, x in enumerate(stream):
        if det.update(x):
            return i
    return None


# -- feature selector optimization ----------------------------------------------------

_SELECTOR_DIM = features.N_FEATURES * 2   # include bit + transform per feature


def _decode_selector(vec: np.ndarray, static: WorkloadStatic) -> FeatureSelector:
    specs: list[FeatureSpec] = []
    included: list[int] = []
    for fid in range(1, features.N_FEATURES + 1):
        inc = vec[(fid - 1) * 2] > 0.5
        t_idx = min(int(vec[(fid - 1) * 2 + 1] * 3), 2)
        transform = TRANSFORMS[t_idx]
        lo, hi = DEFAULT_RANGES[fid]
        if fid == 1:
            buckets, lo, hi = static.n_types, 1, static.n_types
        elif fid == 2:
            buckets, lo, hi = static.max_ops, 1, static.max_ops
        elif fid == 3:
            buckets = 2
        elif fid == 9:
            buckets = 3
        else:
            buckets = 8
        specs.append(FeatureSpec(inc, transform, buckets, lo, hi))
        if inc:
            included.append(fid)
    if not included:
        specs[0] = FeatureSpec(True, features.LINEAR, static.n_types, 1, static.n_types)
        included = [1]
    # shed highest-id features until the state space fits the table cap
    while True:
        card = 1
        for s in specs:
            if s.include:
                card *= s.buckets
        if card <= features.MAX_TABLE_ROWS or len(included) == 1:
            break
        drop = included.pop()
        spec = specs[drop - 1]
        specs[drop - 1] = FeatureSpec(False, spec.transform, spec.buckets,
                                      spec.lo, spec.hi)
    sel_id = "opt-" + "".join(
        (s.transform[0] if s.include else "x") for s in specs)
    return FeatureSelector(id=sel_id, specs=tuple(specs))


def optimize_feature_selector(
        evaluate_selector: Callable[[FeatureSelector], float],
        static: WorkloadStatic,
        total_budget_s: float,
        rng: random.Random,
        candidates: Optional[Sequence[FeatureSelector]] = None,
        lam: float = UCB_LAMBDA) -> tuple[FeatureSelector, float]:
    """Search selector encodings by Bayesian optimization (or exhaust an
    explicit candidate list); each evaluation runs a full inner
    optimization with its own budget and reports the achieved score."""
    clock = BudgetClock(total_budget_s)

    if candidates is not None:
        best_sel, best_score = None, -math.inf
        for sel in candidates:
            score = evaluate_selector(sel)
            if score > best_score:
                best_sel, best_score = sel, score
            if clock.expired():
                break
        return best_sel, best_score

    X: list[np.ndarray] = []
    y: list[float] = []
    best_sel, best_score = None, -math.inf
    seen: dict[str, float] = {}
    while not clock.expired():
        if len(X) >= 2:
            g = fit(X, y, rng)
            p = propose_next(g, lam, rng, dim=_SELECTOR_DIM)
        else:
            p = np.array([rng.random() for _ in range(_SELECTOR_DIM)])
        sel = _decode_selector(p, static)
        if sel.id in seen:
            score = seen[sel.id]
        else:
            score = evaluate_selector(sel)
            seen[sel.id] = score
        X.append(p)
        y.append(score)
        if score > best_score:
            best_sel, best_score = sel, score
    if best_sel is None:
        best_sel = _decode_selector(
            np.array([rng.random() for _ in range(_SELECTOR_DIM)]), static)
        best_score = evaluate_selector(best_sel)
    return best_sel, best_score
