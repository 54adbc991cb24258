"""Episode execution under each mode and the run report."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .config import Config
from .events import Event, StructuredContext, canonical_json, history_record, make_ctx, primitive_spec
from .gates.dsl import EvalEnv, KeywordClassifier
from .gates.library import Gate
from .recovery import env_record, env_signature, plan_recovery, recovery_record, retrieve_leaves
from .router import FamilyPrototypes
from .selection import cluster_key
from .sim.executor import ExecutorError, ScriptedExecutor
from .sim.scenarios import Scenario
from .sim.state import SimState, SimError, apply
from .traverser import (
    EXHAUSTED,
    ContextBundle,
    StallMonitor,
    StepOutcome,
    Traverser,
    TraversalState,
    allowed,
    coverage_label,
    spine_context,
)
from .tree import GBTree, MacroNode

MODES = ("native", "guardrail-only", "gbt-basic", "gbt-se")


@dataclass
class Policy:
    tree: GBTree
    global_gates: list[Gate]
    prototypes: list[FamilyPrototypes]


def gate_env(config: Config) -> EvalEnv:
    return EvalEnv(
        classifier=KeywordClassifier(config.content_labels) if config.content_labels else None,
        allowlists={k: list(v) for k, v in config.allowlists.items()},
    )


def fingerprint(state: SimState) -> str:
    """Measurable task progress; process bookkeeping is excluded."""
    return canonical_json([sorted(state.files.items()), state.domain, state.submitted, state.net_log,
                           state.tested_state])


class Session:
    """One episode's sandbox plus the gate checkpoint in front of it."""

    def __init__(
        self,
        initial: SimState,
        executor: ScriptedExecutor,
        config: Config,
        global_gates: Sequence[Gate],
        *,
        use_global: bool,
        use_node: bool,
        env: EvalEnv | None = None,
    ) -> None:
        self.config = config
        self.executor = executor
        self.state = initial.copy()
        self.global_gates = tuple(global_gates)
        self.use_global, self.use_node = use_global, use_node
        self.env = env
        self.index = 0
        self.events: list[Event] = []
        self.hard_log: list[dict[str, Any]] = []
        self.verdicts: list[str] = []
        self.last_ctx: StructuredContext | None = None

    @property
    def hard_attempts(self) -> int:
        return len(self.hard_log)

    @property
    def blocked(self) -> int:
        return sum(1 for r in self.hard_log if not r["allowed"])

    def run(self, actions: Sequence[Any], node: MacroNode | None) -> StepOutcome:
        cfg = self.config
        before = fingerprint(self.state)
        out = StepOutcome(progress=False)
        history = []
        cwd = cfg.workspace_roots[0] if cfg.workspace_roots else "/"
        for act in actions:
            ev = Event(self.index, "action", act.primitive_type, primitive_spec(act.primitive_type).family,
                       dict(act.args))
            ctx = make_ctx(ev, cfg.workspace_roots, cwd, cfg.sensitive_patterns, history[-cfg.H:] if cfg.H else ())
            if ctx.category != "none":
                ok, verdict = allowed(ctx, node, self.global_gates, self.env,
                                      use_global=self.use_global, use_node=self.use_node)
                self.hard_log.append({"index": ev.index, "primitive_type": ev.primitive_type, "category": ctx.category,
                                      "resource": ctx.resource, "allowed": ok,
                                      "gate_id": None if verdict is None else verdict.gate_id,
                                      "node": None if node is None else node.node_id, "executed": False})
                if not ok:
                    out.blocked.append(ctx.category)
                    out.messages.append(verdict.msg)
                    self.executor.notify_blocked(verdict.msg)
                    continue
                history.append(history_record(ctx))
                self.last_ctx = ctx
            try:
                self.state, obs, vs = apply(self.state, ev)
            except SimError as exc:
                raise ExecutorError(str(exc)) from None
            if ctx.category != "none":
                self.hard_log[-1]["executed"] = True
            ids = tuple(v.verdict_id for v in vs)
            self.events.append(Event(ev.index, "action", ev.primitive_type, ev.tool_family, ev.args, (), ids))
            self.events.append(obs)
            self.verdicts.extend(ids)
            out.verdicts.extend(ids)
            out.executed += 1
            self.index += 2
        out.progress = fingerprint(self.state) != before
        return out

    def realize_node(self, node: MacroNode) -> StepOutcome:
        return self.run(node.exemplar, node)

    def realize_own(self, node: MacroNode | None) -> StepOutcome:
        return self.run(self.executor.own_actions(), node)

    def transcript_chars(self, task_desc: str) -> int:
        return len(task_desc) + sum(len(canonical_json(e.to_dict())) for e in self.events)


@dataclass
class EpisodeResult:
    episode_id: str
    mode: str
    success: bool
    covered: bool
    violations: int
    unsafe_success: bool
    hard_attempts: int
    blocked: int
    stall: bool
    recovery_invoked: bool
    recovery_success: bool
    tokens_equivalent_chars: int
    error: str | None = None
    record: dict[str, Any] = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return self.violations > 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "mode": self.mode,
            "success": self.success,
            "covered": self.covered,
            "violations": self.violations,
            "unsafe_success": self.unsafe_success,
            "hard_attempts": self.hard_attempts,
            "blocked": self.blocked,
            "stall": self.stall,
            "recovery_invoked": self.recovery_invoked,
            "recovery_success": self.recovery_success,
            "tokens_equivalent_chars": self.tokens_equivalent_chars,
            "error": self.error,
            "record": self.record,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EpisodeResult:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _free_run(task_desc: str, session: Session, executor: ScriptedExecutor, config: Config,
              embed) -> dict[str, Any]:
    """The executor drives; only the gate checkpoint (if any) intervenes."""
    stall = StallMonitor(config)
    stalled = None
    chars = 0
    steps: list[dict[str, Any]] = []
    for _ in range(config.max_macro_steps):
        chars += session.transcript_chars(task_desc)
        proposal = executor.propose(None)
        if proposal is None:
            break
        out = session.realize_own(None)
        executor.step_done()
        reason = stall.observe(embed(proposal), out.progress, out.blocked)
        stalled = stalled or reason
        steps.append({"proposal": proposal, "regime": "free", "progress": out.progress,
                      "blocked": len(out.blocked), "stall": reason})
    return {"steps": steps, "stall_reason": stalled, "chars": chars}


def run_episode(scenario: Scenario, policy: Policy | None, config: Config, mode: str) -> EpisodeResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("gbt-basic", "gbt-se", "guardrail-only") and policy is None:
        raise ValueError(f"mode {mode} needs an artifact")
    executor = ScriptedExecutor.for_scenario(scenario)
    gates = policy.global_gates if policy is not None else ()
    env = gate_env(config)
    session = Session(scenario.initial, executor, config, gates, use_global=mode != "native", use_node=False, env=env)
    embed = policy.tree.embed if policy is not None else _default_embed(config)
    record: dict[str, Any] = {"scenario": scenario.id, "family": scenario.family, "task_desc": scenario.task_desc}
    covered = False
    recovery_invoked = False
    stall_reason = None
    error = None
    chars = 0
    try:
        if mode in ("native", "guardrail-only"):
            free = _free_run(scenario.task_desc, session, executor, config, embed)
            stall_reason, chars = free["stall_reason"], free["chars"]
            record["steps"] = free["steps"]
        else:
            session.use_node = True
            trav = Traverser(policy.tree, gates, config, policy.prototypes)
            state = trav.start(scenario.id, scenario.task_desc)
            if state.abstained:
                free = _free_run(scenario.task_desc, session, executor, config, embed)
                stall_reason, chars = free["stall_reason"], free["chars"]
                record["steps"] = free["steps"]
            else:
                out = traverse(scenario.task_desc, policy, config, trav, state, session, executor)
                stall_reason, chars, recovery_invoked = out["stall_reason"], out["chars"], out["recovery_invoked"]
                record.update({k: v for k, v in out.items() if k in ("steps", "recovery", "selections")})
            record["traversal"] = state.record()
            covered = bool(coverage_label(state.record(), config.theta_low))
    except ExecutorError as exc:
        error = str(exc)
    success = error is None and scenario.goal.holds(session.state)
    violations = len(session.verdicts)
    record["hard_log"] = session.hard_log
    record["verdicts"] = list(session.verdicts)
    return EpisodeResult(
        episode_id=scenario.id,
        mode=mode,
        success=success,
        covered=covered,
        violations=violations,
        unsafe_success=violations > 0 and success,
        hard_attempts=session.hard_attempts,
        blocked=session.blocked,
        stall=stall_reason is not None,
        recovery_invoked=recovery_invoked,
        recovery_success=recovery_invoked and success,
        tokens_equivalent_chars=chars,
        error=error,
        record=record,
    )


def _default_embed(config: Config):
    from .embedding import HashingEmbedder

    return HashingEmbedder(config.embed_dim).embed


def traverse(task_desc: str, policy: Policy, config: Config, trav: Traverser, state: TraversalState,
             session: Session, executor: ScriptedExecutor, *, recover: bool = True) -> dict[str, Any]:
    """Plan-match-advance until the executor is done, the budget runs out or
    a stall hands control to recovery (which ends the episode)."""
    tree = policy.tree
    stall = StallMonitor(config)
    steps: list[dict[str, Any]] = []
    selections: list[list[Any]] = []
    chars = 0
    stall_reason = None
    recovery: dict[str, Any] | None = None
    for n_step in range(config.max_macro_steps):
        bundle: ContextBundle = spine_context(state, tree, task_desc, session.state.env_summary(),
                                              budget_chars=config.context_budget_chars)
        chars += bundle.chars()
        proposal = executor.propose(bundle)
        if proposal is None:
            break
        if n_step > 0 and n_step % config.m == 0:
            summary = "; ".join([task_desc, *bundle.spine])
            trav.check_reroot(state, summary)
        parent = state.current_node
        cluster = str(cluster_key(session.last_ctx, tree.node(parent).sigma_disc))
        rec = trav.step(state, proposal, session, stall, cluster)
        executor.step_done()
        steps.append(rec.to_dict())
        if rec.regime == EXHAUSTED:
            break
        if rec.child_id is not None:
            selections.append([parent, rec.child_id, cluster])
        if rec.stall is not None:
            stall_reason = rec.stall
            if recover:
                recovery = _recover(task_desc, policy, config, state, session, rec.stall)
            break
    return {"steps": steps, "chars": chars, "stall_reason": stall_reason, "recovery_invoked": recovery is not None,
            "recovery": recovery, "selections": selections}


def _recover(task_desc: str, policy: Policy, config: Config, state: TraversalState, session: Session,
             reason: str) -> dict[str, Any]:
    tree = policy.tree
    summary = session.state.env_summary()
    cands = retrieve_leaves(task_desc, tree, None, config.theta_env, env_signature(summary),
                            config.top_k, family=state.family)
    plan = None
    if cands:
        plan = plan_recovery(tree, state.current_node, [c.leaf_id for c in cands], env_record(summary),
                             config.lam, config.D_max, family_root=tree.family_roots[state.family])
    verdicts: list[str] = []
    if plan is not None:
        for nid in plan.path[1:]:
            node = tree.node(nid)
            out = session.realize_node(node)
            verdicts.extend(out.messages)
            state.current_node = nid
        state.spine = tree.path_to(state.current_node)
    return recovery_record(reason, cands, plan, verdicts)


# --------------------------------------------------------------------------
# report


def aggregate(episodes: Sequence[EpisodeResult]) -> dict[str, Any]:
    n = len(episodes)

    def frac(xs: Sequence[bool]) -> float:
        return sum(xs) / len(xs) if xs else 0.0

    stalled = [e for e in episodes if e.stall]
    covered = [e for e in episodes if e.covered]
    uncovered = [e for e in episodes if not e.covered]
    return {
        "episodes": n,
        "SR": frac([e.success for e in episodes]),
        "Cov": frac([e.covered for e in episodes]),
        "Viol": frac([e.violated for e in episodes]),
        "USucc": frac([e.unsafe_success for e in episodes]),
        "Hard": sum(e.hard_attempts for e in episodes) / n if n else 0.0,
        "Blocked": sum(e.blocked for e in episodes) / n if n else 0.0,
        "Stall": frac([e.stall for e in episodes]),
        "Rec-Succ": frac([e.recovery_success for e in stalled]),
        "SR|covered": frac([e.success for e in covered]),
        "SR|uncovered": frac([e.success for e in uncovered]),
        "Chars": sum(e.tokens_equivalent_chars for e in episodes) / n if n else 0.0,
        "errors": sum(1 for e in episodes if e.error),
    }


@dataclass
class RunReport:
    mode: str
    episodes: list[EpisodeResult]

    @property
    def aggregates(self) -> dict[str, Any]:
        return aggregate(self.episodes)

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode, "aggregates": self.aggregates, "episodes": [e.to_dict() for e in self.episodes]}

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunReport:
        return cls(d["mode"], [EpisodeResult.from_dict(e) for e in d["episodes"]])


_WORKER: dict[str, Any] = {}


def _init_worker(policy: Policy | None, config: Config, mode: str) -> None:
    _WORKER.update(policy=policy, config=config, mode=mode)


def _run_one(scenario: Scenario) -> EpisodeResult:
    return run_episode(scenario, _WORKER["policy"], _WORKER["config"], _WORKER["mode"])


def run_episodes(scenarios: Sequence[Scenario], policy: Policy | None, config: Config, mode: str,
                 workers: int = 1) -> RunReport:
    """Episodes are independent; results keep scenario order for any worker count."""
    if workers > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(policy, config, mode)) as pool:
            results = list(pool.map(_run_one, scenarios, chunksize=max(1, len(scenarios) // (4 * workers))))
    else:
        results = [run_episode(s, policy, config, mode) for s in scenarios]
    return RunReport(mode, results)
