"""Deterministic gate synthesis from violating contexts.

Candidates are instantiated from features of the positive contexts (exact
resource, ancestor prefixes, history motifs, domains, ports, executables),
then chosen by greedy set cover under the benign false-positive budget.
"""

from __future__ import annotations

import glob as _glob
import posixpath
from dataclasses import dataclass, field
from typing import Sequence

from ..events import StructuredContext, short_hash
from .dsl import (
    And,
    DomainInAllowlist,
    EvalEnv,
    FieldEquals,
    GateExpr,
    HistoryMotif,
    Not,
    PathMatches,
    PathUnderRoots,
    PortIn,
    parse_gate,
    to_text,
)
from .library import Gate, expr_rejects, propose_update, subject_for

# lower rank = more specific
RANK_EXACT, RANK_PREFIX, RANK_MOTIF, RANK_DOMAIN, RANK_EXEC, RANK_PORT = 0, 1, 2, 3, 4, 5


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    expr: GateExpr
    rank: float
    kind: str


@dataclass
class SynthesisResult:
    gates: list[Gate]
    uncovered: list[StructuredContext] = field(default_factory=list)
    discarded: int = 0
    vacuous_benign: bool = False

    @property
    def failed(self) -> bool:
        return bool(self.uncovered)


def _is_path(value: str) -> bool:
    return value.startswith("/")


def _ancestors(path: str) -> list[str]:
    out = []
    d = posixpath.dirname(path)
    while d and d != "/":
        out.append(d)
        d = posixpath.dirname(d)
    return out


def candidates_for(ctx: StructuredContext) -> list[Candidate]:
    typed = FieldEquals("primitive_type", ctx.primitive_type)
    out: list[Candidate] = []
    res = ctx.resource
    if res:
        out.append(Candidate(And((typed, FieldEquals("resource", res))), RANK_EXACT, "exact"))
        if _is_path(res):
            anc = _ancestors(res)
            for depth, d in enumerate(anc):
                glob = _glob.escape(d) + "/*"
                out.append(
                    Candidate(And((typed, PathMatches("resource", glob))), RANK_PREFIX + depth / 100, "prefix")
                )
    if ctx.recent_hard_history:
        related = subject_for(ctx).related
        last = ctx.recent_hard_history[-2:]
        pats = tuple((r.category, "same" if r.resource in related else "any") for r in last)
        cat = FieldEquals("category", ctx.category)
        out.append(Candidate(And((cat, HistoryMotif(pats))), RANK_MOTIF, "motif"))
    if ctx.net_dest is not None:
        out.append(Candidate(And((typed, DomainInAllowlist((), (ctx.net_dest[0],)))), RANK_DOMAIN, "domain"))
        out.append(Candidate(And((typed, PortIn((ctx.net_dest[1],)))), RANK_PORT, "port"))
    if ctx.proc_meta is not None and ctx.primitive_type == "proc_spawn":
        exe = FieldEquals("proc_meta.executable", ctx.proc_meta[0])
        out.append(Candidate(And((typed, exe)), RANK_EXEC, "executable"))
    return out


def synthesize_gates(
    contexts: Sequence[StructuredContext],
    benign_corpus: Sequence[StructuredContext],
    eps_benign: float,
    *,
    scope: str,
    env: EvalEnv | None = None,
) -> SynthesisResult:
    """Greedy cover of ``contexts`` by candidates that fit the benign budget.

    Candidates are ordered by coverage of still-uncovered positives, then by
    specificity, then by canonical text. Each emitted gate is checked with
    ``propose_update`` as a fresh gate.
    """
    if not contexts:
        raise SynthesisError("no violating contexts to synthesize from")
    positives = {c.ctx_id: c for c in contexts}
    pool: dict[str, Candidate] = {}
    for c in positives.values():
        for cand in candidates_for(c):
            key = to_text(cand.expr)
            if key not in pool or cand.rank < pool[key].rank:
                pool[key] = cand
    n_benign = len(benign_corpus)
    covers: dict[str, frozenset[str]] = {}
    benign_hits: dict[str, frozenset[str]] = {}
    discarded = 0
    for key, cand in pool.items():
        hits = frozenset(b.ctx_id for b in benign_corpus if expr_rejects(cand.expr, b, env))
        if n_benign and len(hits) / n_benign > eps_benign + 1e-12:
            discarded += 1
            continue
        covers[key] = frozenset(cid for cid, c in positives.items() if expr_rejects(cand.expr, c, env))
        benign_hits[key] = hits
    uncovered = set(positives)
    chosen: list[str] = []
    union_fp: set[str] = set()
    while uncovered:
        best = None
        for key in sorted(covers):
            gain = len(covers[key] & uncovered)
            if gain == 0:
                continue
            if n_benign and len(union_fp | benign_hits[key]) / n_benign > eps_benign + 1e-12:
                continue
            rank = (-gain, pool[key].rank, key)
            if best is None or rank < best[0]:
                best = (rank, key)
        if best is None:
            break
        key = best[1]
        chosen.append(key)
        uncovered -= covers[key]
        union_fp |= benign_hits[key]
    gates = []
    for key in chosen:
        expr = pool[key].expr
        gate = Gate(
            id=f"{_scope_tag(scope)}-{short_hash(scope + key, 10)}",
            expr=expr,
            message_template=f"{pool[key].kind} gate: {{primitive_type}} on {{resource}} rejected",
            scope=scope,
            unsafe_corpus=tuple(c for cid, c in positives.items() if cid in covers[key]),
            benign_corpus=tuple(benign_corpus),
        )
        decision = propose_update(None, gate, gate.unsafe_corpus, benign_corpus, eps_benign, env)
        if decision.accepted:
            gates.append(gate)
        else:  # cannot happen given the filter above; kept as a guard
            uncovered |= set(c.ctx_id for c in gate.unsafe_corpus)
    return SynthesisResult(
        gates=gates,
        uncovered=[positives[cid] for cid in sorted(uncovered)],
        discarded=discarded,
        vacuous_benign=not benign_corpus,
    )


def _scope_tag(scope: str) -> str:
    return "g" if scope == "global" else "n" + scope.split(":", 1)[-1]


def default_global_gates() -> list[Gate]:
    """Workspace confinement and the read-archive-send exfiltration motif."""
    confine = Gate(
        id="g000-workspace",
        expr=And((FieldEquals("category", "write_delete"), Not(PathUnderRoots("resource")))),
        message_template="write outside workspace: {resource}",
    )
    exfil = Gate(
        id="g001-exfil",
        expr=parse_gate('(and (field= category "net_send") (history-motif (sensitive_read any) (write_delete same)))'),
        message_template="exfiltration motif: sending {args.source} after a sensitive read",
    )
    return [confine, exfil]


__all__ = [
    "Candidate",
    "SynthesisError",
    "SynthesisResult",
    "candidates_for",
    "default_global_gates",
    "synthesize_gates",
]
