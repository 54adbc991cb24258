"""Stall recovery: success-leaf retrieval with environment-signature
filtering, conservative preconditions, and risk-weighted shortest paths."""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from .embedding import HashingEmbedder, cosine, l2_normalize
from .events import FAMILIES
from .gates.dsl import GateEvaluationError, GateExpr, Subject, evaluate
from .tree import GBTree

DOMAIN_BUCKETS = 8
FILE_BUCKETS = 32


def _bucket(text: str, n: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")
    return (h >> 1) % n, 1.0 if h & 1 else -1.0


def env_record(summary: Mapping[str, Any]) -> dict[str, Any]:
    """Flat field view of an environment summary for precondition evaluation."""
    tools = sorted(summary.get("env.tools", ()))
    rec: dict[str, Any] = {
        "env.domain": summary.get("env.domain", "") or "",
        "env.repo_root": summary.get("env.repo_root", "/"),
        "env.files": sorted(summary.get("env.files", ())),
        "env.tools": tools,
    }
    for fam in FAMILIES:
        rec[f"env.flags.{fam}"] = "true" if fam in tools else "false"
    return rec


def env_signature(summary: Mapping[str, Any]) -> tuple[float, ...]:
    """Domain bucket, signed file-set sketch, tool flags and a coarse risk
    footprint, each block scaled to a fixed weight, then L2-normalized."""
    domain = [0.0] * DOMAIN_BUCKETS
    if summary.get("env.domain"):
        i, _ = _bucket(str(summary["env.domain"]), DOMAIN_BUCKETS)
        domain[i] = 1.0
    files = [0.0] * FILE_BUCKETS
    for path in sorted(summary.get("env.files", ())):
        i, sign = _bucket(path, FILE_BUCKETS)
        files[i] += sign
    files = [2.0 * x for x in l2_normalize(files)] if any(files) else files
    tools = set(summary.get("env.tools", ()))
    flags = [1.0 if f in tools else 0.0 for f in FAMILIES]
    flags = [x / math.sqrt(max(1, sum(flags))) for x in flags]
    risk = summary.get("env.risk", {}) or {}
    footprint = [0.5 if risk.get("tainted") else 0.0, 0.5 if risk.get("sends") else 0.0]
    return l2_normalize(domain + files + flags + footprint)


def precondition_holds(expr: GateExpr | None, record: Mapping[str, Any]) -> bool:
    """Conservative: a missing field makes the node infeasible."""
    if expr is None:
        return True
    try:
        return evaluate(expr, Subject(record))
    except GateEvaluationError:
        return False


@dataclass(frozen=True)
class LeafCandidate:
    leaf_id: int
    task_cos: float
    env_cos: float


def retrieve_leaves(
    task_desc: str,
    tree: GBTree,
    embedder: HashingEmbedder | None,
    theta_env: float,
    env_now: Sequence[float],
    top_k: int = 50,
    family: str | None = None,
) -> list[LeafCandidate]:
    """Success leaves ranked by task similarity, filtered by environment match.

    Leaves without a stored environment signature are filtered out.
    """
    emb = embedder or tree.embedder
    q = emb.embed(task_desc)
    rows = []
    for lid in tree.success_leaves(family):
        leaf = tree.node(lid)
        sig = leaf.env_signature
        if sig is None:
            continue
        texts = leaf.task_descs or [leaf.description]
        tcos = max(cosine(q, emb.embed(t)) for t in texts)
        ecos = cosine(env_now, sig)
        if ecos >= theta_env:
            rows.append(LeafCandidate(lid, tcos, ecos))
    rows.sort(key=lambda c: (-c.task_cos, c.leaf_id))
    return rows[:top_k]


def edge_cost(risk_level: int, lam: float = 0.5) -> float:
    return 1.0 + lam * risk_level


@dataclass(frozen=True)
class RecoveryPlan:
    path: tuple[int, ...]
    total_cost: float
    leaf: int

    @property
    def length(self) -> int:
        return len(self.path) - 1

    def to_dict(self) -> dict[str, Any]:
        return {"path": list(self.path), "total_cost": self.total_cost, "leaf": self.leaf}


def family_graph(tree: GBTree, family_root: int) -> dict[int, list[int]]:
    """Undirected parent/child adjacency of one family subtree."""
    members = set(tree.subtree(family_root))
    adj: dict[int, list[int]] = {n: [] for n in members}
    for n in members:
        for c in tree.node(n).children:
            if c in members:
                adj[n].append(c)
                adj[c].append(n)
    return {n: sorted(v) for n, v in adj.items()}


def plan_recovery(
    tree: GBTree,
    current_node: int,
    candidates: Iterable[int],
    env: Mapping[str, Any],
    lam: float = 0.5,
    D_max: int = 8,
    family_root: int | None = None,
) -> RecoveryPlan | None:
    """Dijkstra over (cost, path) so equal costs resolve to the
    lexicographically smallest node-id path; paths over ``D_max`` edges and
    nodes whose precondition fails are excluded."""
    targets = set(candidates) - {current_node}
    if not targets:
        return None
    if family_root is None:
        chain = tree.path_to(current_node)
        family_root = chain[1] if len(chain) > 1 else chain[0]
    adj = family_graph(tree, family_root)
    if current_node not in adj:
        return None
    feasible = {n: precondition_holds(tree.node(n).precondition, env) for n in adj}
    heap: list[tuple[float, tuple[int, ...]]] = [(0.0, (current_node,))]
    settled: set[int] = set()
    while heap:
        cost, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node in targets:
            return RecoveryPlan(path, cost, node)
        if len(path) - 1 >= D_max:
            continue
        for nxt in adj[node]:
            if nxt in settled or nxt in path or not feasible[nxt]:
                continue
            heapq.heappush(heap, (cost + edge_cost(tree.node(nxt).risk_level, lam), path + (nxt,)))
    return None


def recovery_record(stall_reason: str, candidates: Sequence[LeafCandidate], plan: RecoveryPlan | None,
                    verdicts: Sequence[str] = ()) -> dict[str, Any]:
    return {
        "stall_reason": stall_reason,
        "candidates": [c.leaf_id for c in candidates],
        "path": None if plan is None else list(plan.path),
        "cost": None if plan is None else plan.total_cost,
        "verdicts": list(verdicts),
    }
