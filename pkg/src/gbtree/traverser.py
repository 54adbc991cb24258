"""Online traversal: plan-match-advance with three confidence regimes,
coverage bookkeeping, primitive-level gating and stall detection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .config import Config
from .embedding import cosine
from .events import StructuredContext
from .gates.dsl import EvalEnv
from .gates.library import Gate, GateVerdict, hard_gate_ok, node_gate_ok
from .router import FamilyPrototypes, maybe_reroot, route
from .selection import selection_score, success_rate
from .tree import GBTree, MacroNode, ROOT_ID

ADVANCE, FRAGILE, EXPLORE = "advance", "fragile", "explore"


@dataclass(frozen=True)
class MatchResult:
    child_id: int | None
    s_top1: float
    s_top2: float
    regime: str


def regime_for(s_top1: float, theta_low: float = 0.70, theta_high: float = 0.78) -> str:
    if s_top1 >= theta_high:
        return ADVANCE
    if s_top1 >= theta_low:
        return FRAGILE
    return EXPLORE


def match_children(
    proposal: str,
    node_id: int,
    tree: GBTree,
    *,
    theta_low: float = 0.70,
    theta_high: float = 0.78,
    cluster: str = "",
    alpha: float = 1.0,
    beta: float = 0.5,
) -> MatchResult:
    """Cosine of the proposal against each child description.

    Equal cosines are ordered by the selection score, then by node id. A
    leaf gives the explore regime with no child.
    """
    node = tree.node(node_id)
    if not node.children:
        return MatchResult(None, 0.0, 0.0, EXPLORE)
    q = tree.embed(proposal)
    rows = []
    for cid in node.children:
        sim = cosine(q, tree.embed(tree.node(cid).description))
        score = selection_score(sim, success_rate(node.selection_stats, cid, cluster), alpha, beta)
        rows.append((-sim, -score, cid))
    rows.sort()
    s1 = -rows[0][0]
    s2 = -rows[1][0] if len(rows) > 1 else 0.0
    return MatchResult(rows[0][2], s1, s2, regime_for(s1, theta_low, theta_high))


def allowed(
    ctx: StructuredContext,
    node: MacroNode | None,
    global_gates: Iterable[Gate],
    env: EvalEnv | None = None,
    *,
    use_global: bool = True,
    use_node: bool = True,
) -> tuple[bool, GateVerdict | None]:
    """Global conjunction and node-local conjunction; non-hard primitives pass ungated."""
    if ctx.category == "none":
        return True, None
    if use_global:
        ok, verdict = hard_gate_ok(global_gates, ctx, env)
        if not ok:
            return False, verdict
    if use_node and node is not None:
        ok, verdict = node_gate_ok(node.local_gates, ctx, env)
        if not ok:
            return False, verdict
    return True, None


@dataclass
class StallCounters:
    no_progress_steps: int = 0
    gate_blocks_in_window: int = 0
    repeated_proposals: int = 0

    def to_dict(self) -> dict[str, int]:
        return {"no_progress_steps": self.no_progress_steps, "gate_blocks_in_window": self.gate_blocks_in_window,
                "repeated_proposals": self.repeated_proposals}


class StallMonitor:
    """Flags a stall on consecutive no-progress steps, a gate loop within a
    sliding window of macro steps, or a repeated proposal without progress."""

    def __init__(self, config: Config) -> None:
        self.config = config
        self.counters = StallCounters()
        self._blocks: deque[tuple[int, str]] = deque()
        self._last: tuple[float, ...] | None = None
        self.step = 0

    def observe(self, proposal_embedding: Sequence[float] | None, progress: bool, blocked: Sequence[str]) -> str | None:
        cfg, c = self.config, self.counters
        self.step += 1
        c.no_progress_steps = 0 if progress else c.no_progress_steps + 1
        repeated = (
            proposal_embedding is not None
            and self._last is not None
            and cosine(proposal_embedding, self._last) >= cfg.repeat_cos
        )
        c.repeated_proposals = c.repeated_proposals + 1 if repeated and not progress else 0
        if proposal_embedding is not None:
            self._last = tuple(proposal_embedding)
        for category in blocked:
            self._blocks.append((self.step, category))
        while self._blocks and self._blocks[0][0] <= self.step - cfg.gate_loop_window:
            self._blocks.popleft()
        per_family: dict[str, int] = {}
        for _, category in self._blocks:
            per_family[category] = per_family.get(category, 0) + 1
        c.gate_blocks_in_window = max(per_family.values(), default=0)
        if c.no_progress_steps >= cfg.stall_no_progress:
            return "no_progress"
        if c.gate_blocks_in_window >= cfg.gate_loop_blocks:
            return "gate_loop"
        if c.repeated_proposals >= 2:
            return "repeated_proposal"
        return None


@dataclass
class TraversalState:
    episode_id: str
    family: str | None
    current_node: int
    spine: list[int]
    covered: bool
    safe_explore_budget_remaining: int
    fragile_steps: list[dict[str, Any]] = field(default_factory=list)
    stall_counters: StallCounters = field(default_factory=StallCounters)
    abstained: bool = False
    rerooted: bool = False
    explored: bool = False
    transitions: list[float] = field(default_factory=list)
    covered_history: list[bool] = field(default_factory=list)
    p_max: float = 0.0

    def uncover(self) -> None:
        self.covered = False

    def snapshot_coverage(self) -> None:
        self.covered_history.append(self.covered)

    def record(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "family": self.family,
            "spine": list(self.spine),
            "covered": self.covered,
            "abstained": self.abstained,
            "rerooted": self.rerooted,
            "explored": self.explored,
            "transitions": list(self.transitions),
            "covered_history": list(self.covered_history),
            "fragile_steps": list(self.fragile_steps),
            "p_max": self.p_max,
        }


def coverage_label(record: Mapping[str, Any], theta_low: float = 0.70) -> int:
    """1 iff routing was confident without a re-root, every transition matched
    at or above ``theta_low``, and safe exploration never ran."""
    if record.get("abstained") or record.get("rerooted") or record.get("explored"):
        return 0
    return int(all(s >= theta_low for s in record.get("transitions", ())))


@dataclass(frozen=True)
class ContextBundle:
    """What the executor sees. ``structured`` is passed verbatim and is never
    folded into the text channel."""

    task: str
    spine: tuple[str, ...]
    next_macro: str | None
    local_summary: str
    structured: Mapping[str, Any]

    def text(self) -> str:
        lines = [self.task, *self.spine]
        if self.next_macro:
            lines.append(self.next_macro)
        if self.local_summary:
            lines.append(self.local_summary)
        return "\n".join(lines)

    def chars(self) -> int:
        return len(self.text())


def spine_context(
    state: TraversalState,
    tree: GBTree,
    task_desc: str,
    env_summary: Mapping[str, Any] | None = None,
    *,
    next_macro: str | None = None,
    budget_chars: int = 300,
) -> ContextBundle:
    macros = [n for n in state.spine if n != ROOT_ID and tree.node(n).family is None]
    descs = tuple(tree.node(n).description for n in macros)
    summary = ""
    if macros:
        node = tree.node(macros[-1])
        summary = node.description + (f" [{', '.join(node.tags)}]" if node.tags else "")
    structured = dict(env_summary or {})
    return ContextBundle(task_desc, descs, next_macro, summary[:budget_chars], structured)


class MacroSession(Protocol):
    """Runs primitives for one macro step against the environment."""

    def realize_node(self, node: MacroNode) -> StepOutcome: ...

    def realize_own(self, node: MacroNode | None) -> StepOutcome: ...


@dataclass
class StepOutcome:
    progress: bool
    executed: int = 0
    blocked: list[str] = field(default_factory=list)  # hard categories of blocked primitives
    verdicts: list[str] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class StepRecord:
    proposal: str
    regime: str
    node_before: int
    child_id: int | None
    s_top1: float
    s_top2: float
    node_after: int
    progress: bool
    blocked: int
    covered: bool
    stall: str | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposal": self.proposal,
            "regime": self.regime,
            "node_before": self.node_before,
            "child_id": self.child_id,
            "s_top1": self.s_top1,
            "s_top2": self.s_top2,
            "node_after": self.node_after,
            "progress": self.progress,
            "blocked": self.blocked,
            "covered": self.covered,
            "stall": self.stall,
        }


EXHAUSTED = "exhausted"


class Traverser:
    """Steers one episode at a time over a read-only tree version."""

    def __init__(
        self,
        tree: GBTree,
        global_gates: Sequence[Gate],
        config: Config,
        prototypes: Sequence[FamilyPrototypes],
    ) -> None:
        self.tree = tree
        self.global_gates = tuple(global_gates)
        self.config = config
        self.prototypes = list(prototypes)

    def start(self, episode_id: str, task_desc: str) -> TraversalState:
        cfg = self.config
        decision = route(task_desc, self.prototypes, cfg.T_fam, cfg.delta_fam, self.tree.embedder)
        family = decision.family
        if family is not None and family not in self.tree.family_roots:
            family = None
        state = TraversalState(
            episode_id,
            family,
            self.tree.family_roots[family] if family is not None else ROOT_ID,
            [ROOT_ID] + ([self.tree.family_roots[family]] if family is not None else []),
            covered=family is not None,
            safe_explore_budget_remaining=cfg.safe_explore_budget,
            abstained=family is None,
            p_max=decision.p_max,
        )
        state.snapshot_coverage()
        return state

    def check_reroot(self, state: TraversalState, summary: str) -> bool:
        if state.family is None:
            return False
        cfg = self.config
        dec = maybe_reroot(state.family, summary, self.prototypes, cfg.delta_switch, cfg.delta_fam, cfg.T_fam,
                           self.tree.embedder)
        if not dec.reroot or dec.new_family not in self.tree.family_roots:
            return False
        state.family = dec.new_family
        state.current_node = self.tree.family_roots[dec.new_family]
        state.spine = [ROOT_ID, state.current_node]
        state.rerooted = True
        state.uncover()
        return True

    def step(self, state: TraversalState, proposal: str, session: MacroSession, stall: StallMonitor,
             cluster: str = "") -> StepRecord:
        cfg = self.config
        before = state.current_node
        match = match_children(
            proposal, state.current_node, self.tree, theta_low=cfg.theta_low, theta_high=cfg.theta_high,
            cluster=cluster, alpha=cfg.alpha, beta=cfg.beta,
        )
        if match.regime in (ADVANCE, FRAGILE):
            child = self.tree.node(match.child_id)
            outcome = session.realize_node(child)
            state.current_node = child.node_id
            state.spine.append(child.node_id)
            state.transitions.append(match.s_top1)
            if match.regime == FRAGILE:
                state.fragile_steps.append({"step": len(state.transitions) - 1, "node": child.node_id,
                                            "proposal": proposal, "s_top1": match.s_top1})
            regime = match.regime
        elif state.safe_explore_budget_remaining > 0:
            state.safe_explore_budget_remaining -= 1
            state.explored = True
            state.uncover()
            outcome = session.realize_own(self.tree.node(state.current_node))
            regime = EXPLORE
        else:
            state.snapshot_coverage()
            return StepRecord(proposal, EXHAUSTED, before, None, match.s_top1, match.s_top2, state.current_node,
                              False, 0, state.covered, None)
        reason = stall.observe(self.tree.embed(proposal), outcome.progress, outcome.blocked)
        state.stall_counters = stall.counters
        state.snapshot_coverage()
        return StepRecord(proposal, regime, before, match.child_id if regime != EXPLORE else None, match.s_top1,
                          match.s_top2, state.current_node, outcome.progress, len(outcome.blocked),
                          state.covered, reason)
