"""Operator pipeline: distill a tree artifact from logs, run episodes,
evolve and audit artifacts. The service and CLI are thin layers over this."""

from __future__ import annotations

import glob as globmod
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .config import Config
from .embedding import HashingEmbedder
from .events import (
    StructuredContext,
    Trajectory,
    TrajectoryError,
    build_ctx,
    canonical_json,
    validate_trajectory,
)
from .gates.dsl import And, GateSyntaxError, PathMatches, parse_gate, to_text
from .gates.library import (
    Gate,
    GateLibrary,
    expr_rejects,
    gate_set_hash,
    library_from_json,
    library_to_json,
)
from .gates.synthesis import SynthesisError, default_global_gates, synthesize_gates
from .macros import extract_macros, span_actions, stability_test
from .miner import UnsafeCorpus, map_window_to_macros, mine_all, synthesize_node_gates
from .recovery import env_signature
from .router import FamilyPrototypes, prototypes_from_mapping, route
from .runtime import MODES, Policy, RunReport, fingerprint, gate_env, run_episodes
from .sim.scenarios import PROTOTYPES, Scenario
from .sim.state import SimState, replay
from .tree import GBTree, TreeError
from .tree import from_json as tree_from_json

log = logging.getLogger(__name__)

ARTIFACT_FORMAT = "gbt-artifact/1"


class PipelineError(RuntimeError):
    """A named invariant failed during a command."""


@dataclass
class Artifact:
    tree: GBTree
    global_gates: list[Gate]
    prototypes: list[FamilyPrototypes]
    unsafe_corpus: UnsafeCorpus
    benign: list[StructuredContext]
    windows: list[dict[str, Any]] = field(default_factory=list)
    successes: list[dict[str, Any]] = field(default_factory=list)
    build_report: dict[str, Any] = field(default_factory=dict)
    evolution_log: list[dict[str, Any]] = field(default_factory=list)
    history: list[dict[str, Any]] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def policy(self) -> Policy:
        return Policy(self.tree, list(self.global_gates), list(self.prototypes))

    def all_gates(self) -> list[Gate]:
        return list(self.global_gates) + self.tree.all_gates()

    def rejected_ids(self, env=None) -> list[str]:
        """Ids of recorded unsafe contexts rejected by some gate of the current set."""
        gates = self.all_gates()
        return sorted(c.ctx_id for c in self.unsafe_corpus.contexts() if any(expr_rejects(g.expr, c, env) for g in gates))

    def snapshot_history(self, note: str) -> None:
        self.history.append({
            "version": self.tree.version,
            "note": note,
            "safety_hash": gate_set_hash(self.all_gates()),
            "gate_ids": sorted(g.id for g in self.all_gates()),
            "rejected": self.rejected_ids(),
        })

    def to_json(self) -> dict[str, Any]:
        return {
            "format": ARTIFACT_FORMAT,
            "tree": self.tree.to_json(),
            "global_gates": library_to_json(self.global_gates),
            "prototypes": {fp.family_id: list(fp.prototypes) for fp in self.prototypes},
            "unsafe_corpus": self.unsafe_corpus.rows(),
            "benign": [c.to_dict() for c in self.benign],
            "windows": self.windows,
            "successes": self.successes,
            "build_report": self.build_report,
            "evolution_log": self.evolution_log,
            "history": self.history,
            "config": self.config,
        }

    def dumps(self) -> str:
        return canonical_json(self.to_json())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Artifact:
        if d.get("format") != ARTIFACT_FORMAT:
            raise PipelineError(f"artifact format: expected {ARTIFACT_FORMAT}, got {d.get('format')!r}")
        tree_d = d["tree"]
        tree = tree_from_json(tree_d, HashingEmbedder(int(tree_d.get("embed_dim", 256))))
        corpus = UnsafeCorpus()
        corpus.merge(d.get("unsafe_corpus") or ())
        return cls(
            tree=tree,
            global_gates=library_from_json(d.get("global_gates") or {}),
            prototypes=prototypes_from_mapping(d.get("prototypes") or {}),
            unsafe_corpus=corpus,
            benign=[StructuredContext.from_dict(c) for c in d.get("benign") or ()],
            windows=list(d.get("windows") or ()),
            successes=list(d.get("successes") or ()),
            build_report=dict(d.get("build_report") or {}),
            evolution_log=list(d.get("evolution_log") or ()),
            history=list(d.get("history") or ()),
            config=dict(d.get("config") or {}),
        )

    @classmethod
    def loads(cls, text: str) -> Artifact:
        return cls.from_json(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> Artifact:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def default_prototypes() -> list[FamilyPrototypes]:
    return prototypes_from_mapping(PROTOTYPES)


# --------------------------------------------------------------------------
# distill


def _existing_inputs(state: SimState, actions: Sequence[Any]) -> list[str]:
    """Files a span reads or edits that exist before it runs."""
    out = []
    for a in actions:
        if a.primitive_type in ("file_read", "file_edit"):
            p = a.args.get("path")
            if p and p in state.files and p not in out:
                out.append(p)
    return out


def _precondition(paths: Sequence[str]):
    terms = tuple(PathMatches("env.files", globmod.escape(p)) for p in paths)
    if not terms:
        return None
    return terms[0] if len(terms) == 1 else And(terms)


def _hard_contexts(traj: Trajectory, spans: Sequence[tuple[int, int]], cfg: Config) -> list[StructuredContext]:
    out = []
    for a in traj.actions():
        ctx = build_ctx(traj, a.index, cfg.H, spans, workspace_roots=cfg.workspace_roots,
                        sensitive_patterns=cfg.sensitive_patterns)
        if ctx.category != "none":
            out.append(ctx)
    return out


def distill(
    trajectories: Iterable[Trajectory],
    config: Config | None = None,
    *,
    prototypes: Sequence[FamilyPrototypes] | None = None,
    workers: int = 1,
) -> Artifact:
    """Logs to a gated tree artifact.

    Successful safe traces are inserted first so that unsafe traces meet an
    ungated tree and their risky macros become fresh nodes that can carry
    gates. Output depends only on the logs and the config.
    """
    cfg = config or Config()
    protos = list(prototypes) if prototypes is not None else default_prototypes()
    env = gate_env(cfg)
    tree = GBTree(HashingEmbedder(cfg.embed_dim))
    report: dict[str, Any] = {
        "trajectories": 0, "invalid": [], "unstable": [], "abstained": [], "inserted_success": 0,
        "inserted_unsafe": 0, "skipped_failed": 0, "windows": 0, "quarantined": [], "node_gates": 0,
        "global_gates": 0, "synthesis_failures": [], "warnings": [],
    }
    prepared = []
    for traj in sorted(trajectories, key=lambda t: t.id):
        report["trajectories"] += 1
        try:
            validate_trajectory(traj)
        except TrajectoryError as exc:
            report["invalid"].append({"id": traj.id, "error": str(exc)})
            continue
        stab = stability_test(traj, cfg.P, cfg.delta_stab)
        if not stab.stable:
            report["unstable"].append(traj.id)
            continue
        family = (traj.env or {}).get("family")
        if family is None:
            family = route(traj.task_desc, protos, cfg.T_fam, cfg.delta_fam, tree.embedder).family
            if family is None:
                report["abstained"].append(traj.id)
                continue
        macros = extract_macros(traj, fs_threshold=cfg.fs_magnitude_threshold, workspace_roots=cfg.workspace_roots,
                                sensitive_patterns=cfg.sensitive_patterns)
        prepared.append((traj, family, macros))
    if report["trajectories"] == 0:
        report["warnings"].append("no trajectories in logs")

    benign: list[StructuredContext] = []
    seen_benign: set[str] = set()
    for traj, _, macros in prepared:
        if traj.label == "safe":
            for ctx in _hard_contexts(traj, [m.span for m in macros], cfg):
                if ctx.ctx_id not in seen_benign:
                    seen_benign.add(ctx.ctx_id)
                    benign.append(ctx)

    successes: list[dict[str, Any]] = []
    for traj, family, macros in prepared:
        if traj.label != "safe":
            continue
        if not traj.success:
            report["skipped_failed"] += 1
            continue
        exemplars = [span_actions(traj, m.span) for m in macros]
        base = SimState.from_dict(traj.env["state"]) if traj.env and "state" in traj.env else None
        final = replay(base, traj.actions())[0] if base is not None else None
        rec = tree.insert_path(
            family, macros, True, theta_sig=cfg.theta_sig, theta_merge=cfg.theta_merge, exemplars=exemplars,
            env_signature=env_signature(final.env_summary()) if final is not None else None,
            task_desc=traj.task_desc,
        )
        report["inserted_success"] += 1
        if base is None:
            continue
        state = base
        steps = []
        for nid, m, acts in zip(rec["path"], macros, exemplars):
            node = tree.node(nid)
            if node.precondition is None:
                tree.set_precondition(nid, _precondition(_existing_inputs(state, acts)))
            steps.append({"description": m.description, "actions": [a.to_dict() for a in acts]})
            state = replay(state, acts)[0]
        successes.append({
            "id": traj.id, "family": family, "task_desc": traj.task_desc, "path": rec["path"], "steps": steps,
            "initial_state": traj.env["state"], "final_fingerprint": fingerprint(state),
        })

    unsafe = [(t, f, m) for t, f, m in prepared if t.label == "unsafe"]
    mined = mine_all([(t, [m.span for m in ms]) for t, _, ms in unsafe], H=cfg.H, workspace_roots=cfg.workspace_roots,
                     sensitive_patterns=cfg.sensitive_patterns, workers=workers)
    corpus = UnsafeCorpus()
    windows: list[dict[str, Any]] = []
    window_ctxs: list[StructuredContext] = []
    for (traj, family, macros), result in zip(unsafe, mined):
        rec = tree.insert_path(family, macros, False, theta_sig=cfg.theta_sig, theta_merge=cfg.theta_merge,
                               exemplars=[span_actions(traj, m.span) for m in macros])
        report["inserted_unsafe"] += 1
        if result.quarantined:
            report["quarantined"].append({"id": traj.id, "reason": result.quarantined})
            continue
        spans = [m.span for m in macros]
        for w in result.windows:
            first, last = map_window_to_macros((w.start_index, w.end_index), spans)
            u_nodes = rec["path"][first : last + 1]
            for pos in range(first, last + 1):
                lo, hi = spans[pos]
                positives = [c for c, a in zip(w.contexts, _window_actions(traj, w)) if lo <= a <= hi
                             and c.category != "none"]
                if not positives:
                    continue
                nid = rec["path"][pos]
                res = synthesize_node_gates(positives, benign, cfg.eps_benign_node, nid, env)
                if res.gates:
                    if tree.attach_gates(nid, res.gates):
                        report["node_gates"] += len(res.gates)
                if res.uncovered:
                    report["synthesis_failures"].append({"trajectory": traj.id, "node": nid,
                                                         "uncovered": [c.ctx_id for c in res.uncovered]})
            for c in w.contexts:
                corpus.add(c, traj.id, (w.start_index, w.end_index))
                if c.category != "none":
                    window_ctxs.append(c)
            windows.append({**w.to_dict(), "nodes": u_nodes, "contexts": [c.ctx_id for c in w.contexts]})
            report["windows"] += 1

    library = GateLibrary(default_global_gates(), eps_benign=cfg.eps_benign_global)
    library.register_probe(corpus.contexts())
    pending = [c for c in window_ctxs if not library.rejects(c, env)]
    uniq = list({c.ctx_id: c for c in pending}.values())
    if uniq:
        try:
            res = synthesize_gates(uniq, benign, cfg.eps_benign_global, scope="global", env=env)
        except SynthesisError as exc:  # pragma: no cover - uniq is non-empty
            report["synthesis_failures"].append({"scope": "global", "error": str(exc)})
        else:
            for g in res.gates:
                if library.add(g, env).accepted:
                    report["global_gates"] += 1
            if res.uncovered:
                report["synthesis_failures"].append({"scope": "global", "uncovered": [c.ctx_id for c in res.uncovered]})
    tree.verify()
    report["nodes"] = len(tree.nodes)
    report["families"] = sorted(tree.family_roots)
    art = Artifact(tree, list(library.snapshot()), protos, corpus, benign, windows, successes, report,
                   config=cfg.to_dict())
    art.snapshot_history("distill")
    return art


def _window_actions(traj: Trajectory, w) -> list[int]:
    return [a.index for a in traj.actions() if w.start_index <= a.index <= w.end_index]


def load_logs(logs_dir: str | Path) -> list[Trajectory]:
    from .events import load_trajectories

    return load_trajectories(logs_dir)


# --------------------------------------------------------------------------
# run


def run(artifact: Artifact | None, scenarios: Sequence[Scenario], config: Config, mode: str,
        workers: int = 1) -> RunReport:
    if mode not in MODES:
        raise PipelineError(f"unknown mode {mode!r}")
    policy = artifact.policy() if artifact is not None else None
    if policy is None and mode != "native":
        raise PipelineError(f"mode {mode} needs an artifact")
    return run_episodes(scenarios, policy, config, mode, workers)


# --------------------------------------------------------------------------
# audit


def _check(name: str, fn) -> dict[str, Any]:
    try:
        detail = fn()
    except (PipelineError, TreeError, GateSyntaxError, ValueError, KeyError) as exc:
        return {"invariant": name, "ok": False, "detail": f"{type(exc).__name__}: {exc}"}
    return {"invariant": name, "ok": True, "detail": detail}


def _gate_texts(raw: Mapping[str, Any]) -> list[tuple[str, str]]:
    out = [(g["id"], g["expr"]) for g in (raw.get("global_gates") or {}).get("gates", ())]
    for node in raw["tree"]["nodes"]:
        out.extend((g["id"], g["expr"]) for g in node.get("local_gates", ()))
    return out


def audit(raw: Mapping[str, Any], previous: Mapping[str, Any] | None = None,
          probe: Sequence[StructuredContext] = ()) -> dict[str, Any]:
    """Invariant audit over a raw artifact document (and optionally its predecessor)."""
    checks = []

    def roundtrip():
        for gid, text in _gate_texts(raw):
            try:
                expr = parse_gate(text)
            except GateSyntaxError as exc:
                raise PipelineError(f"gate {gid} does not parse: {exc}") from None
            if to_text(expr) != text or parse_gate(to_text(expr)) != expr:
                raise PipelineError(f"gate {gid} does not round-trip")
        return f"{len(_gate_texts(raw))} gates"

    checks.append(_check("gate_roundtrip", roundtrip))
    if not checks[-1]["ok"]:
        return {"ok": False, "checks": checks}
    art = Artifact.from_json(raw)

    def acyclic():
        art.tree.verify()
        return f"{len(art.tree.nodes)} nodes"

    def no_gated_merge():
        for rec in art.tree.audit_log:
            for nid, ngates in rec.get("merged", ()):
                if ngates:
                    raise PipelineError(f"merge into gated node {nid} at version {rec['version']}")
        return "none"

    env = gate_env(Config.from_dict(art.config)) if art.config else None
    probe_ctxs = list(art.unsafe_corpus.contexts()) + list(probe)

    def rejected_now(a: Artifact) -> set[str]:
        gates = a.all_gates()
        return {c.ctx_id for c in probe_ctxs if any(expr_rejects(g.expr, c, env) for g in gates)}

    now = rejected_now(art)

    def non_readmission():
        for h in art.history:
            lost = set(h["rejected"]) - now
            if lost:
                raise PipelineError(f"re-admitted {sorted(lost)[:3]} rejected at version {h['version']}")
        return f"{len(now)} of {len(probe_ctxs)} probe contexts rejected"

    checks += [_check("acyclicity", acyclic), _check("no_merge_into_gated", no_gated_merge),
               _check("unsafe_non_readmission", non_readmission)]

    if previous is not None:
        def expansion():
            prev = Artifact.from_json(previous)
            lost = rejected_now(prev) - now
            if lost:
                raise PipelineError(f"S_sys shrank: {sorted(lost)[:3]}")
            gone = {g.id for g in prev.all_gates()} - {g.id for g in art.all_gates()}
            if gone:
                raise PipelineError(f"gates removed: {sorted(gone)[:3]}")
            changed = [g.id for g in prev.all_gates()
                       if any(h.id == g.id and to_text(h.expr) != to_text(g.expr) for h in art.all_gates())]
            for gid in changed:
                old = next(g for g in prev.all_gates() if g.id == gid)
                new = next(g for g in art.all_gates() if g.id == gid)
                for c in probe_ctxs:
                    if expr_rejects(old.expr, c, env) and not expr_rejects(new.expr, c, env):
                        raise PipelineError(f"gate {gid} weakened on {c.ctx_id}")
            return f"{len(now)} rejected now, was {len(rejected_now(prev))}"

        checks.append(_check("s_sys_expansion", expansion))
    return {"ok": all(c["ok"] for c in checks), "checks": checks}


def gate_test_report(gates: Sequence[Gate], unsafe: Sequence[StructuredContext], benign: Sequence[StructuredContext],
                     config: Config | None = None) -> list[dict[str, Any]]:
    from .gates.library import gate_test

    env = gate_env(config or Config())
    return [o.__dict__ for o in gate_test(gates, unsafe, benign, env)]


# --------------------------------------------------------------------------
# evolve


def evolve(
    artifact: Artifact,
    failures: Sequence[Mapping[str, Any]],
    config: Config,
    *,
    diagnoser=None,
    proposals: Sequence[Any] = (),
) -> tuple[Artifact, list[dict[str, Any]]]:
    """One evolution round over failure records; repairs are applied one at a
    time against the latest accepted tree. Returns the new artifact and the
    repair log. The input artifact is not modified."""
    from .evolution import (
        EvolutionError,
        RegressionInputs,
        append_episode_stats,
        apply_repair,
        propose_repair,
    )

    art = Artifact.loads(artifact.dumps())
    env = gate_env(config)
    before = set(art.rejected_ids(env))
    contexts = {row["ctx_id"]: StructuredContext.from_dict(row["ctx"]) for row in art.unsafe_corpus.rows()}
    inputs = RegressionInputs(art.successes, art.windows, contexts, art.global_gates)
    entries: list[dict[str, Any]] = []
    ordered = sorted(failures, key=lambda e: str(e.get("episode_id", "")))
    append_episode_stats(art.tree, ordered)
    todo: list[tuple[str, Any]] = []
    for ep in ordered:
        eid = str(ep.get("episode_id", ""))
        try:
            prop = propose_repair(art.tree, ep, config, diagnoser)
        except EvolutionError as exc:
            entries.append({"episode": eid, "proposal": None, "outcome": {"accepted": False, "reason": str(exc)}})
            continue
        if prop is None:
            entries.append({"episode": eid, "proposal": None,
                            "outcome": {"accepted": False, "reason": "no diagnosis or analog"}})
            continue
        todo.append((eid, prop))
    todo.extend((getattr(p, "episode_id", ""), p) for p in proposals)
    for eid, prop in todo:
        if prop.action == "add_child":
            prop = _refresh(art.tree, prop, config)
        outcome = apply_repair(art.tree, prop, inputs, config, env)
        if outcome.accepted:
            art.tree = outcome.tree
        entries.append({"episode": eid, "proposal": prop.to_dict(), "outcome": outcome.to_dict()})
    accepted = sum(1 for e in entries if e["outcome"]["accepted"])
    art.tree.note("evolve", failures=len(failures), accepted=accepted)
    after = set(art.rejected_ids(env))
    if before - after:
        raise PipelineError(f"unsafe non-re-admission: {sorted(before - after)[:3]} re-admitted by evolution")
    art.evolution_log.append({"version": art.tree.version, "entries": entries, "readmitted": 0})
    art.snapshot_history("evolve")
    return art, entries


def _refresh(tree: GBTree, prop, config: Config):
    """An earlier accepted repair may already have given the target an
    equivalent child; turn a duplicate import into a reuse."""
    from dataclasses import replace

    from .embedding import cosine

    head = prop.payload[0]
    q = tree.embed(head.description)
    for cid in tree.node(prop.target_node).children:
        child = tree.node(cid)
        if child.sigma_disc == head.sigma_disc and cosine(q, tree.embed(child.description)) >= config.theta_high:
            return replace(prop, action="reuse_child", child_id=cid, payload=())
    return prop
