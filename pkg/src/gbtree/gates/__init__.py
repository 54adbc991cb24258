from .dsl import (
    CTX_SCHEMA,
    ENV_SCHEMA,
    EvalEnv,
    GateEvaluationError,
    GateExpr,
    GateSyntaxError,
    KeywordClassifier,
    Subject,
    evaluate,
    parse_gate,
    parse_precondition,
    to_text,
)
from .library import (
    EPS_GLOBAL,
    EPS_NODE,
    Gate,
    GateLibrary,
    GateVerdict,
    UpdateDecision,
    eval_gate,
    expr_rejects,
    hard_gate_ok,
    library_from_json,
    library_to_json,
    node_gate_ok,
    propose_update,
    rejected_set,
    subject_for,
)

__all__ = [
    "CTX_SCHEMA",
    "ENV_SCHEMA",
    "EPS_GLOBAL",
    "EPS_NODE",
    "EvalEnv",
    "Gate",
    "GateEvaluationError",
    "GateExpr",
    "GateLibrary",
    "GateSyntaxError",
    "GateVerdict",
    "KeywordClassifier",
    "Subject",
    "UpdateDecision",
    "eval_gate",
    "evaluate",
    "expr_rejects",
    "hard_gate_ok",
    "library_from_json",
    "library_to_json",
    "node_gate_ok",
    "parse_gate",
    "parse_precondition",
    "propose_update",
    "rejected_set",
    "subject_for",
    "to_text",
]
