"""Gates, conjunction semantics and the monotone update discipline."""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from ..events import PATH_KEYS, StructuredContext, short_hash, canonical_json
from .dsl import (
    EvalEnv,
    GateEvaluationError,
    GateExpr,
    Subject,
    evaluate,
    parse_gate,
    to_text,
)

EPS_GLOBAL = 0.01
EPS_NODE = 0.02

_FIELD_RE = re.compile(r"\{([A-Za-z0-9_.]+)\}")


@dataclass(frozen=True)
class GateVerdict:
    ok: bool
    msg: str = ""
    gate_id: str | None = None

    def __post_init__(self) -> None:
        if not self.ok and not self.msg:
            raise ValueError("a rejecting verdict needs a message")


@dataclass(frozen=True)
class Gate:
    id: str
    expr: GateExpr
    message_template: str
    scope: str = "global"  # "global" or "node:<id>"
    kind: str = "rule"  # "rule" or "content"
    unsafe_corpus: tuple[StructuredContext, ...] = ()
    benign_corpus: tuple[StructuredContext, ...] = ()

    @property
    def expr_text(self) -> str:
        return to_text(self.expr)

    @property
    def is_global(self) -> bool:
        return self.scope == "global"

    def with_corpora(self, unsafe: Iterable[StructuredContext] = (), benign: Iterable[StructuredContext] = ()) -> Gate:
        return replace(
            self,
            unsafe_corpus=_merge_ctxs(self.unsafe_corpus, unsafe),
            benign_corpus=_merge_ctxs(self.benign_corpus, benign),
        )


def _merge_ctxs(base: Sequence[StructuredContext], extra: Iterable[StructuredContext]) -> tuple[StructuredContext, ...]:
    seen = {c.ctx_id for c in base}
    out = list(base)
    for c in extra:
        if c.ctx_id not in seen:
            seen.add(c.ctx_id)
            out.append(c)
    return tuple(out)


def subject_for(ctx: StructuredContext) -> Subject:
    related = {v for k, v in ctx.canonical_args.items() if k in PATH_KEYS}
    if ctx.resource is not None:
        related.add(ctx.resource)
    return Subject(ctx.record(), ctx.recent_hard_history, frozenset(related))


def render_message(template: str, ctx: StructuredContext) -> str:
    rec = ctx.record()
    return _FIELD_RE.sub(lambda m: str(rec.get(m.group(1), "?")), template)


def expr_rejects(expr: GateExpr, ctx: StructuredContext, env: EvalEnv | None = None) -> bool:
    """Fail-closed evaluation: evaluation errors count as a rejection."""
    try:
        return evaluate(expr, subject_for(ctx), env)
    except GateEvaluationError:
        return True


def eval_gate(gate: Gate, ctx: StructuredContext, env: EvalEnv | None = None) -> GateVerdict:
    try:
        violated = evaluate(gate.expr, subject_for(ctx), env)
    except GateEvaluationError as exc:
        return GateVerdict(False, f"gate {gate.id} failed closed: {exc}", gate.id)
    if violated:
        msg = render_message(gate.message_template, ctx) or f"blocked by gate {gate.id}"
        return GateVerdict(False, msg, gate.id)
    return GateVerdict(True, "", gate.id)


def _conjunction(gates: Iterable[Gate], ctx: StructuredContext, env: EvalEnv | None) -> tuple[bool, GateVerdict | None]:
    for gate in sorted(gates, key=lambda g: g.id):
        verdict = eval_gate(gate, ctx, env)
        if not verdict.ok:
            return False, verdict
    return True, None


def hard_gate_ok(
    library: Iterable[Gate], ctx: StructuredContext, env: EvalEnv | None = None
) -> tuple[bool, GateVerdict | None]:
    """Conjunction over the global gates, in id order, stopping at the first failure."""
    return _conjunction((g for g in library if g.is_global), ctx, env)


def node_gate_ok(
    node_gates: Iterable[Gate], ctx: StructuredContext, env: EvalEnv | None = None
) -> tuple[bool, GateVerdict | None]:
    return _conjunction(node_gates, ctx, env)


# --------------------------------------------------------------------------
# monotone updates


@dataclass(frozen=True)
class UpdateDecision:
    accepted: bool
    reason: str = ""
    witness: str | None = None  # ctx id of the first violating context
    benign_fp: float = 0.0
    vacuous_benign: bool = False


def propose_update(
    gate_old: Gate | None,
    gate_new: Gate,
    unsafe_corpus: Sequence[StructuredContext],
    benign_corpus: Sequence[StructuredContext],
    eps_benign: float,
    env: EvalEnv | None = None,
) -> UpdateDecision:
    """Accept ``gate_new`` iff it keeps every unsafe rejection and stays in the benign budget.

    ``gate_old`` of None means a fresh gate: monotonicity holds vacuously.
    """
    if gate_old is not None:
        for ctx in unsafe_corpus:
            if expr_rejects(gate_old.expr, ctx, env) and not expr_rejects(gate_new.expr, ctx, env):
                return UpdateDecision(False, f"monotonicity: re-admits unsafe ctx {ctx.ctx_id}", ctx.ctx_id)
    if not benign_corpus:
        return UpdateDecision(True, "benign corpus empty; benign check vacuous", vacuous_benign=True)
    rejected = [c for c in benign_corpus if expr_rejects(gate_new.expr, c, env)]
    fp = len(rejected) / len(benign_corpus)
    if fp > eps_benign + 1e-12:
        return UpdateDecision(
            False, f"benign_fp {fp:.4g} > {eps_benign:.4g}", rejected[0].ctx_id, benign_fp=fp
        )
    return UpdateDecision(True, "", benign_fp=fp)


def rejected_set(
    gates: Iterable[Gate], probe: Iterable[StructuredContext], env: EvalEnv | None = None
) -> frozenset[str]:
    """Ids of probe contexts rejected by at least one gate (the executable safety subset)."""
    gates = list(gates)
    return frozenset(c.ctx_id for c in probe if any(expr_rejects(g.expr, c, env) for g in gates))


class GateLibrary:
    """Global gate set with single-writer, monotone updates.

    Readers take ``snapshot()``, an immutable tuple that is swapped
    atomically after an update is accepted. Every context placed in any
    gate's unsafe corpus, plus registered probe contexts, is re-checked on
    every update.
    """

    def __init__(self, gates: Iterable[Gate] = (), *, eps_benign: float = EPS_GLOBAL) -> None:
        self._gates: tuple[Gate, ...] = tuple(sorted(gates, key=lambda g: g.id))
        self._probe: tuple[StructuredContext, ...] = ()
        self._lock = threading.Lock()
        self.eps_benign = eps_benign
        self.version = 0

    def snapshot(self) -> tuple[Gate, ...]:
        return self._gates

    def __iter__(self):
        return iter(self._gates)

    def __len__(self) -> int:
        return len(self._gates)

    def get(self, gate_id: str) -> Gate | None:
        return next((g for g in self._gates if g.id == gate_id), None)

    def register_probe(self, ctxs: Iterable[StructuredContext]) -> None:
        with self._lock:
            self._probe = _merge_ctxs(self._probe, ctxs)

    @property
    def probe(self) -> tuple[StructuredContext, ...]:
        return self._probe

    def rejects(self, ctx: StructuredContext, env: EvalEnv | None = None) -> bool:
        return any(expr_rejects(g.expr, ctx, env) for g in self._gates)

    def add(self, gate: Gate, env: EvalEnv | None = None) -> UpdateDecision:
        with self._lock:
            if any(g.id == gate.id for g in self._gates):
                return UpdateDecision(False, f"duplicate gate id {gate.id}")
            decision = propose_update(None, gate, (), gate.benign_corpus, self.eps_benign, env)
            if decision.accepted:
                self._gates = tuple(sorted(self._gates + (gate,), key=lambda g: g.id))
                self.version += 1
            return decision

    def update(self, gate_id: str, new_expr: GateExpr, env: EvalEnv | None = None) -> UpdateDecision:
        with self._lock:
            old = self.get(gate_id)
            if old is None:
                return UpdateDecision(False, f"unknown gate {gate_id}")
            new = replace(old, expr=new_expr)
            guarded = _merge_ctxs(old.unsafe_corpus, self._probe)
            decision = propose_update(old, new, guarded, old.benign_corpus, self.eps_benign, env)
            if decision.accepted:
                self._gates = tuple(new if g.id == gate_id else g for g in self._gates)
                self.version += 1
            return decision

    def record_unsafe(self, gate_id: str, ctxs: Iterable[StructuredContext]) -> None:
        with self._lock:
            self._gates = tuple(g.with_corpora(unsafe=ctxs) if g.id == gate_id else g for g in self._gates)


# --------------------------------------------------------------------------
# serialization


def gate_to_json(gate: Gate) -> dict[str, Any]:
    return {
        "id": gate.id,
        "scope": gate.scope,
        "kind": gate.kind,
        "expr": gate.expr_text,
        "message_template": gate.message_template,
        "corpus_refs": {
            "unsafe": [c.ctx_id for c in gate.unsafe_corpus],
            "benign": [c.ctx_id for c in gate.benign_corpus],
        },
    }


def gate_from_json(d: Mapping[str, Any], contexts: Mapping[str, StructuredContext] | None = None) -> Gate:
    contexts = contexts or {}
    refs = d.get("corpus_refs") or {}
    missing = [r for r in list(refs.get("unsafe", ())) + list(refs.get("benign", ())) if r not in contexts]
    if missing:
        raise ValueError(f"gate {d['id']}: unresolved corpus refs {missing[:3]}")
    return Gate(
        id=d["id"],
        expr=parse_gate(d["expr"]),
        message_template=d.get("message_template", ""),
        scope=d.get("scope", "global"),
        kind=d.get("kind", "rule"),
        unsafe_corpus=tuple(contexts[r] for r in refs.get("unsafe", ())),
        benign_corpus=tuple(contexts[r] for r in refs.get("benign", ())),
    )


def corpus_table(gates: Iterable[Gate]) -> dict[str, dict[str, Any]]:
    table: dict[str, dict[str, Any]] = {}
    for g in gates:
        for c in g.unsafe_corpus + g.benign_corpus:
            table.setdefault(c.ctx_id, c.to_dict())
    return {k: table[k] for k in sorted(table)}


def contexts_from_table(table: Mapping[str, Mapping[str, Any]]) -> dict[str, StructuredContext]:
    out = {}
    for key, d in table.items():
        ctx = StructuredContext.from_dict(d)
        if ctx.ctx_id != key:
            raise ValueError(f"context {key} does not hash to its id")
        out[key] = ctx
    return out


def library_to_json(gates: Iterable[Gate]) -> dict[str, Any]:
    gates = sorted(gates, key=lambda g: g.id)
    return {"gates": [gate_to_json(g) for g in gates], "contexts": corpus_table(gates)}


def library_from_json(d: Mapping[str, Any]) -> list[Gate]:
    if isinstance(d, list):  # bare array form, no corpora
        return [gate_from_json(g) for g in d]
    ctxs = contexts_from_table(d.get("contexts") or {})
    return [gate_from_json(g, ctxs) for g in d.get("gates") or ()]


def gate_set_hash(gates: Iterable[Gate]) -> str:
    return short_hash(canonical_json([gate_to_json(g) for g in sorted(gates, key=lambda g: g.id)]), 32)


@dataclass
class GateOutcome:
    gate_id: str
    unsafe_rejected: int
    unsafe_total: int
    benign_rejected: int
    benign_total: int
    witnesses: list[str] = field(default_factory=list)


def gate_test(gates: Iterable[Gate], unsafe: Sequence[StructuredContext], benign: Sequence[StructuredContext],
              env: EvalEnv | None = None) -> list[GateOutcome]:
    """Evaluate each gate against two corpora (used by the gate-test command)."""
    out = []
    for g in sorted(gates, key=lambda g: g.id):
        u = [c for c in unsafe if expr_rejects(g.expr, c, env)]
        b = [c for c in benign if expr_rejects(g.expr, c, env)]
        out.append(GateOutcome(g.id, len(u), len(unsafe), len(b), len(benign), [c.ctx_id for c in b[:5]]))
    return out
