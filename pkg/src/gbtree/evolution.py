"""Failure-driven local repair: diagnose a covered failure on its spine,
import a better successor from an analogous success path, and accept the
edit only if the success and unsafe regression suites both pass."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

from .config import Config
from .embedding import cosine
from .events import Event, StructuredContext
from .gates.dsl import EvalEnv, to_text
from .gates.library import Gate, expr_rejects
from .runtime import Policy, Session, fingerprint, gate_env, traverse
from .selection import ClusterKey, selection_score
from .sim.executor import ExecutorError, ScriptedExecutor
from .sim.state import SimState, replay
from .traverser import ADVANCE, EXPLORE, FRAGILE, TraversalState, Traverser
from .tree import GBTree, MacroNode

REPAIR_ACTIONS = ("reuse_child", "add_child")

score = selection_score  # re-exported under the name operators use


class EvolutionError(ValueError):
    """A failure record is outside the scope of self-evolution."""


class Diagnoser(Protocol):
    def diagnose(self, episode: Mapping[str, Any]) -> int | None:
        """Spine node where a different successor could have avoided the failure."""
        ...


class ProgressDiagnoser:
    """Reference diagnoser.

    The parent of the first fragile transition wins; otherwise the node after
    which progress stopped; otherwise the last spine node.
    """

    def diagnose(self, episode: Mapping[str, Any]) -> int | None:
        record = episode.get("record", episode)
        steps = [s for s in record.get("steps", ()) if s.get("regime") in (ADVANCE, FRAGILE, EXPLORE)]
        spine = list((record.get("traversal") or {}).get("spine", ()))
        if not steps or not any(s.get("child_id") is not None for s in steps):
            return None
        for s in steps:
            if s["regime"] == FRAGILE:
                return s["node_before"]
        progressed = [i for i, s in enumerate(steps) if s["progress"]]
        if not progressed:
            return steps[0]["node_before"]
        last = progressed[-1]
        if last < len(steps) - 1:
            return steps[last]["node_after"]
        return spine[-1] if spine else None


def diagnose(episode: Mapping[str, Any], diagnoser: Diagnoser | None = None) -> int | None:
    if not episode.get("covered"):
        raise EvolutionError(f"{episode.get('episode_id')}: covered=0 episodes are out of scope")
    if episode.get("success"):
        raise EvolutionError(f"{episode.get('episode_id')}: not a failure")
    return (diagnoser or ProgressDiagnoser()).diagnose(episode)


# --------------------------------------------------------------------------
# analogs


@dataclass(frozen=True)
class Analog:
    leaf_id: int
    task_cos: float
    aligned_node: int
    align_cos: float


def retrieve_analogs(task_desc: str, tree: GBTree, R: int = 50, family: str | None = None) -> list[tuple[int, float]]:
    """Success leaves ranked by task-description cosine, top ``R``."""
    q = tree.embed(task_desc)
    rows = []
    for lid in tree.success_leaves(family):
        leaf = tree.node(lid)
        texts = leaf.task_descs or [leaf.description]
        rows.append((max(cosine(q, tree.embed(t)) for t in texts), lid))
    rows.sort(key=lambda r: (-r[0], r[1]))
    return [(lid, c) for c, lid in rows[:R]]


def align(tree: GBTree, v_star: int, leaf_id: int) -> tuple[int, float] | None:
    """Node on the leaf's path most similar to ``v_star``; it must have a successor."""
    path = tree.path_to(leaf_id)
    target = tree.node(v_star)
    if target.family is not None:
        fam_root = path[1] if len(path) > 2 else None
        return (fam_root, 1.0) if fam_root is not None and tree.node(fam_root).family == target.family else None
    q = tree.embed(target.description)
    best = None
    for nid in path[2:-1]:
        c = cosine(q, tree.embed(tree.node(nid).description))
        if best is None or c > best[1]:
            best = (nid, c)
    return best


def best_analog(tree: GBTree, v_star: int, task_desc: str, R: int, family: str | None) -> Analog | None:
    best = None
    for rank, (lid, tcos) in enumerate(retrieve_analogs(task_desc, tree, R, family)):
        if v_star in tree.path_to(lid):
            continue
        al = align(tree, v_star, lid)
        if al is None:
            continue
        key = (al[1], -rank)
        if best is None or key > best[0]:
            best = (key, Analog(lid, tcos, al[0], al[1]))
    return None if best is None else best[1]


# --------------------------------------------------------------------------
# proposals


@dataclass(frozen=True)
class RepairProposal:
    target_node: int
    action: str
    child_id: int | None = None
    payload: tuple[MacroNode, ...] = ()
    imported_from: Mapping[str, Any] = field(default_factory=dict)
    inherited_gates: tuple[str, ...] = ()
    episode_id: str = ""
    failed_child: int | None = None
    cluster: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_node": self.target_node,
            "action": self.action,
            "child_id": self.child_id,
            "payload": [n.description for n in self.payload],
            "imported_from": dict(self.imported_from),
            "inherited_gates": list(self.inherited_gates),
            "episode_id": self.episode_id,
            "failed_child": self.failed_child,
            "cluster": self.cluster,
        }


def _merged_gates(parent: Sequence[Gate], own: Sequence[Gate]) -> list[Gate]:
    have = {g.id for g in parent}
    return list(parent) + [g for g in own if g.id not in have]


def _chain_nodes(tree: GBTree, v_star: int, ids: Sequence[int]) -> list[MacroNode]:
    """Copies of the analog path below the aligned node, each carrying its
    parent's full gate set ahead of its own."""
    out = []
    parent_gates = list(tree.node(v_star).local_gates)
    for nid in ids:
        src = tree.node(nid)
        node = copy.deepcopy(src)
        node.children = []
        node.selection_stats = {}
        node.constituents = []
        node.local_gates = _merged_gates(parent_gates, src.local_gates)
        parent_gates = node.local_gates
        out.append(node)
    return out


def propose_repair(
    tree: GBTree,
    episode: Mapping[str, Any],
    config: Config,
    diagnoser: Diagnoser | None = None,
) -> RepairProposal | None:
    v_star = diagnose(episode, diagnoser)
    if v_star is None or v_star not in tree:
        return None
    record = episode.get("record", {})
    family = tree.family_of(v_star)
    analog = best_analog(tree, v_star, record.get("task_desc", ""), config.R, family)
    if analog is None:
        return None
    path = tree.path_to(analog.leaf_id)
    idx = path.index(analog.aligned_node)
    successor = path[idx + 1]
    failed = next((s.get("child_id") for s in record.get("steps", ()) if s.get("node_before") == v_star
                   and s.get("child_id") is not None), None)
    cluster = next((sel[2] for sel in record.get("selections", ()) if sel[0] == v_star), "")
    provenance = {"leaf": analog.leaf_id, "aligned": analog.aligned_node, "successor": successor,
                  "task_cos": analog.task_cos, "align_cos": analog.align_cos}
    succ = tree.node(successor)
    q = tree.embed(succ.description)
    for cid in tree.node(v_star).children:
        child = tree.node(cid)
        if child.sigma_disc == succ.sigma_disc and cosine(q, tree.embed(child.description)) >= config.theta_high:
            if cid == failed:
                return None  # the analog would pick the same child again
            return RepairProposal(v_star, "reuse_child", cid, (), provenance, (), str(episode.get("episode_id", "")),
                                  failed, cluster)
    chain = _chain_nodes(tree, v_star, path[idx + 1 :])
    return RepairProposal(v_star, "add_child", None, tuple(chain), provenance,
                          tuple(g.id for g in tree.node(v_star).local_gates), str(episode.get("episode_id", "")),
                          failed, cluster)


# --------------------------------------------------------------------------
# regression suites


@dataclass
class RegressionInputs:
    successes: Sequence[Mapping[str, Any]]
    windows: Sequence[Mapping[str, Any]]
    contexts: Mapping[str, StructuredContext]
    global_gates: Sequence[Gate]


def replay_success(tree: GBTree, record: Mapping[str, Any], target: int, config: Config,
                   global_gates: Sequence[Gate], env: EvalEnv | None = None) -> bool:
    """Replay the recorded prefix up to ``target`` ungated, then let the tree
    steer the remaining recorded intents; success means the same end state."""
    path = list(record["path"])
    k = path.index(target) if target in path else -1
    steps = record["steps"]
    state = SimState.from_dict(record["initial_state"])
    for step in steps[: k + 1]:
        state = replay(state, [Event.from_dict(a) for a in step["actions"]])[0]
    intents = [(s["description"], [Event.from_dict(a) for a in s["actions"]]) for s in steps[k + 1 :]]
    executor = ScriptedExecutor(intents)
    session = Session(state, executor, config, global_gates, use_global=True, use_node=True, env=env)
    trav = Traverser(tree, global_gates, config, [])
    tstate = TraversalState(str(record["id"]), record.get("family"), target, tree.path_to(target), True,
                            config.safe_explore_budget)
    try:
        traverse(record.get("task_desc", ""), Policy(tree, list(global_gates), []), config, trav, tstate, session,
                 executor, recover=False)
    except ExecutorError:
        return False
    return fingerprint(session.state) == record["final_fingerprint"]


def success_suite(old: GBTree, new: GBTree, target: int, inputs: RegressionInputs, config: Config,
                  env: EvalEnv | None = None) -> dict[str, Any]:
    through = [r for r in inputs.successes if target in r["path"][:-1] or
               (old.node(target).family is not None and r.get("family") == old.node(target).family)]
    before = [replay_success(old, r, target, config, inputs.global_gates, env) for r in through]
    after = [replay_success(new, r, target, config, inputs.global_gates, env) for r in through]
    n = len(through)
    rb = sum(before) / n if n else 1.0
    ra = sum(after) / n if n else 1.0
    witness = next((r["id"] for r, b, a in zip(through, before, after) if b and not a), None)
    return {"n": n, "before": rb, "after": ra, "drop": rb - ra,
            "passed": rb - ra <= config.delta_succ + 1e-12,
            "low_power": n < config.min_regression_successes, "witness": witness}


def _gates_for(tree: GBTree, nodes: Sequence[int]) -> list[Gate]:
    out: list[Gate] = []
    for nid in nodes:
        if nid in tree:
            out.extend(tree.node(nid).local_gates)
    return out


def unsafe_suite(old: GBTree, new: GBTree, target: int, inputs: RegressionInputs,
                 env: EvalEnv | None = None) -> dict[str, Any]:
    """Contexts of windows that map to ``target`` or to one of its children
    (the child set is what a repair edits) and were rejected stay rejected."""
    near = {target, *old.node(target).children}
    checked = 0
    for w in inputs.windows:
        if not near & set(w.get("nodes", ())):
            continue
        old_gates = list(inputs.global_gates) + _gates_for(old, w["nodes"])
        new_gates = list(inputs.global_gates) + _gates_for(new, w["nodes"])
        for cid in w["contexts"]:
            ctx = inputs.contexts.get(cid)
            if ctx is None:
                continue
            checked += 1
            if any(expr_rejects(g.expr, ctx, env) for g in old_gates) and \
                    not any(expr_rejects(g.expr, ctx, env) for g in new_gates):
                return {"checked": checked, "passed": False, "witness": w["trajectory_id"], "context": cid}
    return {"checked": checked, "passed": True, "witness": None}


# --------------------------------------------------------------------------
# apply


@dataclass
class RepairOutcome:
    accepted: bool
    reason: str
    tree: GBTree | None = None
    suites: dict[str, Any] = field(default_factory=dict)
    version: int | None = None
    new_nodes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"accepted": self.accepted, "reason": self.reason, "suites": self.suites, "version": self.version,
                "new_nodes": self.new_nodes}


def _relaxation(tree: GBTree, proposal: RepairProposal) -> str | None:
    if proposal.action not in REPAIR_ACTIONS:
        return f"gate relaxation or unknown action {proposal.action!r} is not a permitted repair"
    if proposal.target_node not in tree:
        return f"unknown target node {proposal.target_node}"
    if proposal.action == "reuse_child":
        if proposal.child_id not in tree.node(proposal.target_node).children:
            return f"node {proposal.child_id} is not a child of {proposal.target_node}"
        return None
    if not proposal.payload:
        return "empty payload"
    parent = tree.node(proposal.target_node).local_gates
    for node in proposal.payload:
        have = {g.id: to_text(g.expr) for g in node.local_gates}
        for g in parent:
            if have.get(g.id) != to_text(g.expr):
                return f"gate relaxation: payload {node.description!r} drops or alters gate {g.id}"
        parent = node.local_gates
    return None


def apply_repair(tree: GBTree, proposal: RepairProposal, inputs: RegressionInputs, config: Config,
                 env: EvalEnv | None = None) -> RepairOutcome:
    """Both suites must pass; the returned tree is a new version, the input is untouched."""
    reason = _relaxation(tree, proposal)
    if reason is not None:
        return RepairOutcome(False, reason)
    env = env if env is not None else gate_env(config)
    work = tree.clone()
    new_nodes: list[int] = []
    v = proposal.target_node
    if proposal.action == "add_child":
        parent = v
        for node in proposal.payload:
            rec = work.add_child(parent, node, extra={"repair": proposal.episode_id})
            parent = rec["node"]
            new_nodes.append(parent)
    succ = success_suite(tree, work, v, inputs, config, env)
    unsafe = unsafe_suite(tree, work, v, inputs, env)
    suites = {"success": succ, "unsafe": unsafe}
    if not succ["passed"]:
        return RepairOutcome(False, f"success regression (witness {succ['witness']})", None, suites)
    if not unsafe["passed"]:
        return RepairOutcome(False, f"unsafe re-admission (witness {unsafe['witness']})", None, suites)
    if proposal.failed_child is not None and proposal.failed_child in work.node(v).children:
        work.record_selection(v, proposal.failed_child, proposal.cluster, False)
    chosen = proposal.child_id if proposal.action == "reuse_child" else new_nodes[0]
    work.record_selection(v, chosen, proposal.cluster, True)
    work.verify()
    rec = work.note("repair", node=v, action=proposal.action, child=chosen, episode=proposal.episode_id)
    return RepairOutcome(True, "accepted", work, suites, rec["version"], new_nodes)


def append_episode_stats(tree: GBTree, episodes: Sequence[Mapping[str, Any]]) -> int:
    """Add each covered episode's selections with its outcome; counters only grow."""
    n = 0
    for ep in episodes:
        if not ep.get("covered"):
            continue
        for parent, child, cluster in ep.get("record", {}).get("selections", ()):
            if parent in tree and child in tree.node(parent).children:
                tree.record_selection(parent, child, cluster, bool(ep.get("success")))
                n += 1
    return n


__all__ = [
    "Analog",
    "ClusterKey",
    "Diagnoser",
    "EvolutionError",
    "ProgressDiagnoser",
    "RegressionInputs",
    "RepairOutcome",
    "RepairProposal",
    "align",
    "append_episode_stats",
    "apply_repair",
    "best_analog",
    "diagnose",
    "propose_repair",
    "replay_success",
    "retrieve_analogs",
    "score",
    "success_suite",
    "unsafe_suite",
]
