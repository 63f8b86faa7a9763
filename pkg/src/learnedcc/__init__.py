"""Multi-version transactional engine with learned concurrency control.

The per-access control decision (conflict detection posture, timeout,
priority, pipeline waits, expose) is a lookup in a learned state -> action
table; the offline stack learns that table with Bayesian optimization over
a Gaussian-process surrogate plus a conflict-graph reduction search, and
re-optimizes when throughput drifts.
"""

from .agent import (Action, ActiveFunction, AgentFunction, encode_2pl,
                    encode_asocc, encode_ic3, encode_occ)
from .engine import Key, Store, Version
from .executor import ExecContext, Executor, ScoreReport, evaluate_score, make_context
from .features import FeatureSelector, FeatureSpec
from .oracle import History, check_commit_dag_acyclic, check_serializable
from .optimizer import DriftDetector, GPSurrogate, run_pipeline
from .workloads import TpccConfig, YcsbExtConfig, make_workload

__all__ = [
    "Action", "ActiveFunction", "AgentFunction", "DriftDetector", "ExecContext",
    "Executor", "FeatureSelector", "FeatureSpec", "GPSurrogate", "History",
    "Key", "ScoreReport", "Store", "TpccConfig", "Version", "YcsbExtConfig",
    "check_commit_dag_acyclic", "check_serializable", "encode_2pl",
    "encode_asocc", "encode_ic3", "encode_occ", "evaluate_score",
    "make_context", "make_workload", "run_pipeline",
]
