"""The rooted Gated Behavior Tree: nodes, merge discipline, split audit,
acyclicity enforcement and canonical persistence."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .embedding import HashingEmbedder, cosine, l2_normalize
from .events import Event, StructuredContext, canonical_json, short_hash
from .gates.dsl import GateExpr, GateSyntaxError, parse_precondition, to_text
from .gates.library import Gate, contexts_from_table, corpus_table, gate_from_json, gate_to_json
from .macros import MacroSpan

ROOT_ID = 0
FORMAT = "gbtree/1"


class TreeError(ValueError):
    """A structural invariant does not hold; the message names it."""


@dataclass
class Constituent:
    ref: tuple[str, int, int]
    description: str
    sigma_cont: tuple[float, ...]
    next: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"ref": list(self.ref), "description": self.description, "sigma_cont": list(self.sigma_cont), "next": self.next}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Constituent:
        r = d["ref"]
        return cls((str(r[0]), int(r[1]), int(r[2])), d["description"], tuple(d["sigma_cont"]), d.get("next"))


@dataclass
class MacroNode:
    node_id: int
    parent_id: int | None
    description: str
    family: str | None = None
    tags: tuple[str, ...] = ()
    risk_level: int = 0
    sigma_disc: Any = None
    sigma_cont: tuple[float, ...] = ()
    local_gates: list[Gate] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    selection_stats: dict[int, dict[str, list[int]]] = field(default_factory=dict)
    precondition: GateExpr | None = None
    env_sum: tuple[float, ...] | None = None
    env_count: int = 0
    is_success_leaf: bool = False
    task_descs: list[str] = field(default_factory=list)
    exemplar: list[Event] = field(default_factory=list)
    constituents: list[Constituent] = field(default_factory=list)

    @property
    def is_gated(self) -> bool:
        return bool(self.local_gates)

    @property
    def env_signature(self) -> tuple[float, ...] | None:
        return None if self.env_sum is None else l2_normalize(self.env_sum)

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "parent_id": self.parent_id,
            "description": self.description,
            "family": self.family,
            "tags": list(self.tags),
            "risk_level": self.risk_level,
            "sigma_disc": _disc_to_json(self.sigma_disc),
            "sigma_cont": list(self.sigma_cont),
            "local_gates": [gate_to_json(g) for g in self.local_gates],
            "children": list(self.children),
            "selection_stats": {
                str(c): {k: list(v) for k, v in sorted(s.items())} for c, s in sorted(self.selection_stats.items())
            },
            "precondition": None if self.precondition is None else to_text(self.precondition),
            "env_sum": None if self.env_sum is None else list(self.env_sum),
            "env_count": self.env_count,
            "is_success_leaf": self.is_success_leaf,
            "task_descs": list(self.task_descs),
            "exemplar": [e.to_dict() for e in self.exemplar],
            "constituents": [c.to_dict() for c in self.constituents],
        }


def _disc_to_json(disc: Any) -> Any:
    if disc is None:
        return None
    fam, ns, hard, dt = disc
    return {"families": [[f, n] for f, n in fam], "namespaces": list(ns), "hard_touch": hard, "delta_types": list(dt)}


def _disc_from_json(d: Any) -> Any:
    if d is None:
        return None
    return (
        tuple((str(f), int(n)) for f, n in d["families"]),
        tuple(d["namespaces"]),
        bool(d["hard_touch"]),
        tuple(d["delta_types"]),
    )


@dataclass(frozen=True)
class MergeDecision:
    merge: bool
    child_id: int | None = None
    desc_cos: float = 0.0


class GBTree:
    """Single rooted tree; family roots form the first layer.

    Edits go through methods that bump ``version`` and append an audit
    record. ``clone()`` gives readers an independent, consistent copy.
    """

    def __init__(self, embedder: HashingEmbedder | None = None) -> None:
        self.embedder = embedder or HashingEmbedder()
        self.nodes: dict[int, MacroNode] = {ROOT_ID: MacroNode(ROOT_ID, None, "root")}
        self.family_roots: dict[str, int] = {}
        self.version = 0
        self.audit_log: list[dict[str, Any]] = []
        self.next_id = 1

    # ---- reading

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.nodes

    def node(self, node_id: int) -> MacroNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeError(f"no node {node_id}") from None

    def clone(self) -> GBTree:
        other = GBTree.__new__(GBTree)
        other.embedder = self.embedder
        other.nodes = copy.deepcopy(self.nodes)
        other.family_roots = dict(self.family_roots)
        other.version = self.version
        other.audit_log = copy.deepcopy(self.audit_log)
        other.next_id = self.next_id
        return other

    def ancestors(self, node_id: int) -> list[int]:
        out = []
        cur = self.node(node_id).parent_id
        seen = set()
        while cur is not None:
            if cur in seen:
                raise TreeError("acyclicity/connectivity: parent chain loops")
            seen.add(cur)
            out.append(cur)
            cur = self.nodes[cur].parent_id
        return out

    def path_to(self, node_id: int) -> list[int]:
        return list(reversed(self.ancestors(node_id))) + [node_id]

    def subtree(self, node_id: int) -> list[int]:
        out, stack = [], [node_id]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(reversed(self.nodes[n].children))
        return out

    def family_of(self, node_id: int) -> str | None:
        for n in self.path_to(node_id):
            if self.nodes[n].family is not None:
                return self.nodes[n].family
        return None

    def success_leaves(self, family: str | None = None) -> list[int]:
        ids = sorted(n for n, v in self.nodes.items() if v.is_success_leaf)
        if family is None:
            return ids
        return [n for n in ids if self.family_of(n) == family]

    def embed(self, text: str) -> tuple[float, ...]:
        return self.embedder.embed(text)

    def all_gates(self) -> list[Gate]:
        return [g for n in sorted(self.nodes) for g in self.nodes[n].local_gates]

    def gates_along(self, node_id: int) -> list[Gate]:
        return list(self.nodes[node_id].local_gates)

    # ---- edits

    def _bump(self, record: dict[str, Any]) -> dict[str, Any]:
        self.version += 1
        record = {"version": self.version, **record}
        self.audit_log.append(record)
        return record

    def _new_node(self, parent_id: int, description: str, **kw: Any) -> MacroNode:
        node = MacroNode(self.next_id, parent_id, description, **kw)
        self.next_id += 1
        self.add_edge(parent_id, node)
        return node

    def add_edge(self, parent_id: int, child: MacroNode) -> None:
        """Attach ``child`` under ``parent_id``; refuses any edge that closes a cycle."""
        parent = self.node(parent_id)
        if child.node_id == parent_id or child.node_id in self.ancestors(parent_id):
            raise TreeError(f"acyclicity: {child.node_id} is an ancestor of {parent_id}")
        if child.node_id in self.nodes and self.nodes[child.node_id] is not child:
            raise TreeError(f"acyclicity/connectivity: node {child.node_id} already exists")
        if child.node_id in self.nodes and self.nodes[child.node_id].parent_id not in (None, parent_id):
            raise TreeError(f"tree: node {child.node_id} already has a parent")
        child.parent_id = parent_id
        self.nodes[child.node_id] = child
        if child.node_id not in parent.children:
            parent.children.append(child.node_id)

    def ensure_family(self, family: str) -> int:
        if family in self.family_roots:
            return self.family_roots[family]
        node = self._new_node(ROOT_ID, family, family=family)
        self.family_roots[family] = node.node_id
        self._bump({"op": "add_family", "family": family, "node": node.node_id})
        return node.node_id

    def try_merge(self, parent_id: int, cand: MacroSpan, theta_sig: float, theta_merge: float) -> MergeDecision:
        cand_emb = self.embed(cand.description)
        best: tuple[float, int] | None = None
        for cid in self.node(parent_id).children:
            child = self.nodes[cid]
            if child.is_gated or child.sigma_disc != cand.sigma_disc:
                continue
            if cosine(child.sigma_cont, cand.sigma_cont) < theta_sig:
                continue
            dsim = cosine(self.embed(child.description), cand_emb)
            if dsim < theta_merge:
                continue
            if best is None or (-dsim, cid) < (-best[0], best[1]):
                best = (dsim, cid)
        if best is None:
            return MergeDecision(False)
        return MergeDecision(True, best[1], best[0])

    def insert_path(
        self,
        family: str,
        macros: Sequence[MacroSpan],
        success: bool,
        *,
        theta_sig: float = 0.92,
        theta_merge: float = 0.85,
        exemplars: Sequence[Sequence[Event]] | None = None,
        env_signature: Sequence[float] | None = None,
        task_desc: str | None = None,
    ) -> dict[str, Any]:
        """Walk from the family root merging or adding one node per macro.

        Once a step creates a node every later step creates one too (a fresh
        node has no children), so the only edges added point at fresh ids and
        cannot close a cycle; the new path is still re-checked before the
        audit record is written.
        """
        fam_root = self.ensure_family(family)
        cur = fam_root
        created: list[int] = []
        merged: list[list[int]] = []
        path: list[int] = []
        prev_constituent: Constituent | None = None
        for i, m in enumerate(macros):
            dec = self.try_merge(cur, m, theta_sig, theta_merge) if not created else MergeDecision(False)
            if dec.merge:
                node = self.nodes[dec.child_id]
                merged.append([node.node_id, len(node.local_gates)])
            else:
                node = self._new_node(
                    cur,
                    m.description,
                    tags=m.tags,
                    risk_level=m.risk.risk_level,
                    sigma_disc=m.sigma_disc,
                    sigma_cont=m.sigma_cont,
                    exemplar=list(exemplars[i]) if exemplars else [],
                )
                created.append(node.node_id)
            if prev_constituent is not None:
                prev_constituent.next = node.node_id
            c = Constituent(m.env_context_ref, m.description, m.sigma_cont)
            node.constituents.append(c)
            prev_constituent = c
            path.append(node.node_id)
            cur = node.node_id
        if success and path:
            leaf = self.nodes[path[-1]]
            leaf.is_success_leaf = True
            if env_signature is not None:
                vec = tuple(float(x) for x in env_signature)
                leaf.env_sum = vec if leaf.env_sum is None else tuple(a + b for a, b in zip(leaf.env_sum, vec))
                leaf.env_count += 1
            if task_desc and task_desc not in leaf.task_descs:
                leaf.task_descs.append(task_desc)
        if path and self.path_to(path[-1])[:2] != [ROOT_ID, fam_root]:
            raise TreeError("acyclicity/connectivity: inserted path does not hang off its family root")
        return self._bump(
            {"op": "insert_path", "family": family, "success": success, "path": path, "created": created, "merged": merged}
        )

    def attach_gates(self, node_id: int, gates: Iterable[Gate]) -> dict[str, Any] | None:
        node = self.node(node_id)
        have = {g.id for g in node.local_gates}
        new = [g for g in gates if g.id not in have]
        if not new:
            return None
        node.local_gates.extend(sorted(new, key=lambda g: g.id))
        return self._bump({"op": "attach_gates", "node": node_id, "gates": [g.id for g in new]})

    def record_unsafe(self, node_id: int, gate_id: str, ctxs: Iterable[StructuredContext]) -> None:
        node = self.node(node_id)
        node.local_gates = [g.with_corpora(unsafe=ctxs) if g.id == gate_id else g for g in node.local_gates]

    def set_precondition(self, node_id: int, expr: GateExpr | None) -> None:
        self.node(node_id).precondition = expr

    def add_child(self, parent_id: int, payload: MacroNode, *, op: str = "add_child", extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
        work = self.clone()
        payload = copy.deepcopy(payload)
        payload.node_id = work.next_id
        payload.parent_id = None
        payload.children = []
        work.next_id += 1
        work.add_edge(parent_id, payload)
        work.verify()
        record = work._bump({"op": op, "parent": parent_id, "node": payload.node_id, **(extra or {})})
        self._adopt(work)
        return record

    def note(self, op: str, **extra: Any) -> dict[str, Any]:
        """Bump the version with an audit record and no structural change."""
        return self._bump({"op": op, **extra})

    def record_selection(self, parent_id: int, child_id: int, cluster: str, success: bool) -> None:
        stats = self.node(parent_id).selection_stats.setdefault(child_id, {})
        s, n = stats.get(cluster, [0, 0])
        stats[cluster] = [s + int(success), n + 1]

    def _adopt(self, other: GBTree) -> None:
        self.nodes, self.family_roots = other.nodes, other.family_roots
        self.version, self.audit_log, self.next_id = other.version, other.audit_log, other.next_id

    # ---- split audit

    def audit_split(self, node_id: int, traffic_threshold: int = 25, theta_sig: float = 0.92) -> dict[str, Any] | None:
        node = self.node(node_id)
        if node.is_gated or node.parent_id is None or node.family is not None:
            return None
        cons = node.constituents
        if len(cons) < traffic_threshold:
            return None
        clusters = signature_clusters([c.sigma_cont for c in cons], theta_sig)
        if len(clusters) < 2:
            return None
        work = self.clone()
        wnode = work.nodes[node_id]
        parent = work.nodes[node.parent_id]
        # children follow the cluster whose constituents lead to them most often
        owner: dict[int, int] = {}
        for child in wnode.children:
            votes = [sum(1 for i in cl if cons[i].next == child) for cl in clusters]
            owner[child] = max(range(len(clusters)), key=lambda k: (votes[k], -k))
        counts = [len(cl) for cl in clusters]
        parent_stats = parent.selection_stats.get(node_id, {})
        split_stats = {k: _proportional(v, counts) for k, v in parent_stats.items()}
        new_ids = []
        for k, cl in enumerate(clusters[1:], start=1):
            first = cons[cl[0]]
            sib = MacroNode(
                work.next_id,
                None,
                first.description,
                tags=wnode.tags,
                risk_level=wnode.risk_level,
                sigma_disc=wnode.sigma_disc,
                sigma_cont=first.sigma_cont,
                constituents=[cons[i] for i in cl],
                exemplar=list(wnode.exemplar),
            )
            work.next_id += 1
            work.add_edge(node.parent_id, sib)
            for child in [c for c in wnode.children if owner[c] == k]:
                wnode.children.remove(child)
                work.nodes[child].parent_id = None
                work.add_edge(sib.node_id, work.nodes[child])
                if child in wnode.selection_stats:
                    sib.selection_stats[child] = wnode.selection_stats.pop(child)
            if split_stats:
                parent.selection_stats[sib.node_id] = {key: parts[k] for key, parts in split_stats.items()}
            new_ids.append(sib.node_id)
        wnode.constituents = [cons[i] for i in clusters[0]]
        if split_stats:
            parent.selection_stats[node_id] = {key: parts[0] for key, parts in split_stats.items()}
        work.verify()
        record = work._bump({"op": "split", "node": node_id, "siblings": new_ids, "clusters": counts})
        self._adopt(work)
        return record

    # ---- invariants

    def verify(self) -> None:
        if ROOT_ID not in self.nodes or self.nodes[ROOT_ID].parent_id is not None:
            raise TreeError("acyclicity/connectivity: root missing or has a parent")
        seen: set[int] = set()
        stack = [ROOT_ID]
        while stack:
            n = stack.pop()
            if n in seen:
                raise TreeError(f"acyclicity/connectivity: node {n} reached twice")
            seen.add(n)
            for c in self.nodes[n].children:
                if c not in self.nodes:
                    raise TreeError(f"acyclicity/connectivity: dangling child {c} of {n}")
                if self.nodes[c].parent_id != n:
                    raise TreeError(f"acyclicity/connectivity: parent pointer of {c} disagrees with {n}")
                stack.append(c)
        if seen != set(self.nodes):
            raise TreeError(f"acyclicity/connectivity: unreachable nodes {sorted(set(self.nodes) - seen)[:5]}")
        for fam, nid in self.family_roots.items():
            if nid not in self.nodes or self.nodes[nid].parent_id != ROOT_ID or self.nodes[nid].family != fam:
                raise TreeError(f"family roots: {fam} -> {nid} is not a first-layer node")
        for n in self.nodes.values():
            if n.is_success_leaf and n.env_sum is None and n.env_count:
                raise TreeError(f"success leaf {n.node_id} lacks env signature")
        for rec in self.audit_log:
            for nid, ngates in rec.get("merged", ()):
                if ngates:
                    raise TreeError(f"merge anti-aliasing: merged into gated node {nid}")

    # ---- persistence

    def to_json(self) -> dict[str, Any]:
        gates = self.all_gates()
        return {
            "format": FORMAT,
            "version": self.version,
            "next_id": self.next_id,
            "embed_dim": self.embedder.dim,
            "family_roots": dict(sorted(self.family_roots.items())),
            "nodes": [self.nodes[n].to_dict() for n in sorted(self.nodes)],
            "contexts": corpus_table(gates),
            "audit_log": self.audit_log,
        }

    def dumps(self) -> str:
        return canonical_json(self.to_json())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    def safety_hash(self) -> str:
        return short_hash(canonical_json([gate_to_json(g) for g in self.all_gates()]), 32)

    def iter_nodes(self) -> Iterator[MacroNode]:
        for n in sorted(self.nodes):
            yield self.nodes[n]


def signature_clusters(vectors: Sequence[Sequence[float]], theta_sig: float) -> list[list[int]]:
    """Connected components of the graph with edges where cosine >= theta_sig.

    Components are ordered by their smallest member.
    """
    n = len(vectors)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if cosine(vectors[i], vectors[j]) >= theta_sig:
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def _proportional(counter: Sequence[int], weights: Sequence[int]) -> list[list[int]]:
    """Split [successes, trials] by weights with largest remainders, preserving totals."""
    total_w = sum(weights)
    out = [[0, 0] for _ in weights]
    for pos, value in enumerate(counter):
        shares = [value * w / total_w for w in weights]
        base = [int(s) for s in shares]
        rest = value - sum(base)
        order = sorted(range(len(weights)), key=lambda k: (-(shares[k] - base[k]), k))
        for k in order[:rest]:
            base[k] += 1
        for k, b in enumerate(base):
            out[k][pos] = b
    return out


def loads(text: str, embedder: HashingEmbedder | None = None) -> GBTree:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeError(f"artifact is not JSON: {exc}") from None
    return from_json(data, embedder)


def from_json(data: Mapping[str, Any], embedder: HashingEmbedder | None = None) -> GBTree:
    if data.get("format") != FORMAT:
        raise TreeError(f"unknown artifact format {data.get('format')!r}")
    tree = GBTree(embedder or HashingEmbedder(int(data.get("embed_dim", 256))))
    ctxs = contexts_from_table(data.get("contexts") or {})
    tree.nodes = {}
    for nd in data["nodes"]:
        try:
            gates = [gate_from_json(g, ctxs) for g in nd.get("local_gates") or ()]
            pre = None if nd.get("precondition") is None else parse_precondition(nd["precondition"])
        except (GateSyntaxError, ValueError) as exc:
            raise TreeError(f"gate round-trip: node {nd['node_id']}: {exc}") from None
        for g, raw in zip(gates, nd.get("local_gates") or ()):
            if to_text(g.expr) != raw["expr"]:
                raise TreeError(f"gate round-trip: {g.id} does not re-print canonically")
        node = MacroNode(
            node_id=int(nd["node_id"]),
            parent_id=nd["parent_id"],
            description=nd["description"],
            family=nd.get("family"),
            tags=tuple(nd.get("tags") or ()),
            risk_level=int(nd.get("risk_level", 0)),
            sigma_disc=_disc_from_json(nd.get("sigma_disc")),
            sigma_cont=tuple(nd.get("sigma_cont") or ()),
            local_gates=gates,
            children=[int(c) for c in nd.get("children") or ()],
            selection_stats={int(c): {k: list(v) for k, v in s.items()} for c, s in (nd.get("selection_stats") or {}).items()},
            precondition=pre,
            env_sum=None if nd.get("env_sum") is None else tuple(nd["env_sum"]),
            env_count=int(nd.get("env_count", 0)),
            is_success_leaf=bool(nd.get("is_success_leaf")),
            task_descs=list(nd.get("task_descs") or ()),
            exemplar=[Event.from_dict(e) for e in nd.get("exemplar") or ()],
            constituents=[Constituent.from_dict(c) for c in nd.get("constituents") or ()],
        )
        if node.node_id in tree.nodes:
            raise TreeError(f"acyclicity/connectivity: duplicate node id {node.node_id}")
        tree.nodes[node.node_id] = node
    tree.family_roots = {str(k): int(v) for k, v in (data.get("family_roots") or {}).items()}
    tree.version = int(data.get("version", 0))
    tree.next_id = int(data.get("next_id", max(tree.nodes) + 1))
    tree.audit_log = list(data.get("audit_log") or ())
    if tree.next_id <= max(tree.nodes):
        raise TreeError("next_id collides with an existing node")
    tree.verify()
    return tree


def load(path: str | Path, embedder: HashingEmbedder | None = None) -> GBTree:
    return loads(Path(path).read_text(encoding="utf-8"), embedder)


__all__ = [
    "Constituent",
    "GBTree",
    "MacroNode",
    "MergeDecision",
    "ROOT_ID",
    "TreeError",
    "from_json",
    "load",
    "loads",
    "signature_clusters",
]
