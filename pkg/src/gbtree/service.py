"""HTTP service over the pipeline. Every endpoint is a pure function of its
request body; artifacts and reports travel as JSON documents."""

from __future__ import annotations

from typing import Any, Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .config import Config, ConfigError
from .events import StructuredContext, Trajectory
from .gates.library import library_from_json
from .pipeline import Artifact, PipelineError, audit, distill, evolve, gate_test_report, run
from .router import RoutingError, prototypes_from_mapping, route
from .runtime import gate_env
from .sim.scenarios import generate_logs, generate_scenarios, load_profile
from .traverser import allowed
from .tree import MacroNode

Mode = Literal["native", "guardrail-only", "gbt-basic", "gbt-se"]


class ConfigBody(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)

    def cfg(self) -> Config:
        try:
            return Config.from_dict(self.config)
        except (ConfigError, TypeError) as exc:
            raise HTTPException(422, f"config: {exc}") from None


class DistillRequest(ConfigBody):
    logs: list[dict[str, Any]]
    prototypes: dict[str, list[str]] | None = None
    workers: int = 1


class DistillResponse(BaseModel):
    artifact: dict[str, Any]
    build_report: dict[str, Any]


class ScenarioSpec(BaseModel):
    seed: int = 0
    profile: str = "mixed"
    n: int = 100


class RunRequest(ConfigBody):
    artifact: dict[str, Any] | None = None
    scenarios: ScenarioSpec = Field(default_factory=ScenarioSpec)
    mode: Mode = "gbt-se"
    workers: int = 1


class RunResponse(BaseModel):
    mode: str
    aggregates: dict[str, Any]
    episodes: list[dict[str, Any]]


class EvolveRequest(ConfigBody):
    artifact: dict[str, Any]
    failures: list[dict[str, Any]]


class EvolveResponse(BaseModel):
    artifact: dict[str, Any]
    entries: list[dict[str, Any]]
    version: int


class AuditRequest(BaseModel):
    artifact: dict[str, Any]
    previous: dict[str, Any] | None = None
    probe: list[dict[str, Any]] = Field(default_factory=list)


class AuditResponse(BaseModel):
    ok: bool
    checks: list[dict[str, Any]]


class GateTestRequest(ConfigBody):
    gates: dict[str, Any] | list[dict[str, Any]]
    unsafe: list[dict[str, Any]] = Field(default_factory=list)
    benign: list[dict[str, Any]] = Field(default_factory=list)


class AllowedRequest(ConfigBody):
    ctx: dict[str, Any]
    global_gates: dict[str, Any] = Field(default_factory=dict)
    node_gates: dict[str, Any] = Field(default_factory=dict)


class AllowedResponse(BaseModel):
    allowed: bool
    gate_id: str | None = None
    msg: str | None = None


class RouteRequest(ConfigBody):
    task_desc: str
    prototypes: dict[str, list[str]]


class SimulateRequest(ScenarioSpec):
    pass


def _artifact(doc: dict[str, Any]) -> Artifact:
    try:
        return Artifact.from_json(doc)
    except (PipelineError, KeyError, ValueError) as exc:
        raise HTTPException(422, f"artifact: {exc}") from None


def _ctxs(rows: list[dict[str, Any]]) -> list[StructuredContext]:
    return [StructuredContext.from_dict(r.get("ctx", r)) for r in rows]


def create_app() -> FastAPI:
    app = FastAPI(title="gbtree")

    @app.get("/health")
    def health() -> dict[str, str]:
        return {"status": "ok"}

    @app.post("/distill", response_model=DistillResponse)
    def distill_ep(req: DistillRequest) -> DistillResponse:
        cfg = req.cfg()
        try:
            logs = [Trajectory.from_dict(t) for t in req.logs]
        except (KeyError, ValueError, TypeError) as exc:
            raise HTTPException(422, f"logs: {exc}") from None
        protos = prototypes_from_mapping(req.prototypes) if req.prototypes else None
        art = distill(logs, cfg, prototypes=protos, workers=req.workers)
        return DistillResponse(artifact=art.to_json(), build_report=art.build_report)

    @app.post("/run", response_model=RunResponse)
    def run_ep(req: RunRequest) -> RunResponse:
        cfg = req.cfg()
        art = _artifact(req.artifact) if req.artifact is not None else None
        try:
            profile = load_profile(req.scenarios.profile)
        except (OSError, ValueError) as exc:
            raise HTTPException(422, f"profile: {exc}") from None
        scenarios = generate_scenarios(req.scenarios.seed, profile, req.scenarios.n)
        try:
            report = run(art, scenarios, cfg, req.mode, req.workers)
        except PipelineError as exc:
            raise HTTPException(422, str(exc)) from None
        return RunResponse(**report.to_dict())

    @app.post("/evolve", response_model=EvolveResponse)
    def evolve_ep(req: EvolveRequest) -> EvolveResponse:
        cfg = req.cfg()
        art = _artifact(req.artifact)
        try:
            new, entries = evolve(art, req.failures, cfg)
        except PipelineError as exc:
            raise HTTPException(409, str(exc)) from None
        return EvolveResponse(artifact=new.to_json(), entries=entries, version=new.tree.version)

    @app.post("/audit", response_model=AuditResponse)
    def audit_ep(req: AuditRequest) -> AuditResponse:
        try:
            out = audit(req.artifact, req.previous, _ctxs(req.probe))
        except (KeyError, PipelineError) as exc:
            out = {"ok": False, "checks": [{"invariant": "artifact_format", "ok": False, "detail": str(exc)}]}
        return AuditResponse(**out)

    @app.post("/gate-test")
    def gate_test_ep(req: GateTestRequest) -> dict[str, Any]:
        try:
            gates = library_from_json(req.gates)
        except ValueError as exc:
            raise HTTPException(422, f"gates: {exc}") from None
        rows = gate_test_report(gates, _ctxs(req.unsafe), _ctxs(req.benign), req.cfg())
        return {"gates": rows}

    @app.post("/allowed", response_model=AllowedResponse)
    def allowed_ep(req: AllowedRequest) -> AllowedResponse:
        ctx = StructuredContext.from_dict(req.ctx)
        node = MacroNode(-1, None, "request", local_gates=library_from_json(req.node_gates)) if req.node_gates else None
        ok, verdict = allowed(ctx, node, library_from_json(req.global_gates), gate_env(req.cfg()))
        if ok:
            return AllowedResponse(allowed=True)
        return AllowedResponse(allowed=False, gate_id=verdict.gate_id, msg=verdict.msg)

    @app.post("/route")
    def route_ep(req: RouteRequest) -> dict[str, Any]:
        cfg = req.cfg()
        try:
            dec = route(req.task_desc, prototypes_from_mapping(req.prototypes), cfg.T_fam, cfg.delta_fam)
        except RoutingError as exc:
            raise HTTPException(422, str(exc)) from None
        return {"family": dec.family, "p_max": dec.p_max, "abstained": dec.abstained,
                "probabilities": dict(dec.probabilities)}

    @app.post("/simulate")
    def simulate_ep(req: SimulateRequest) -> dict[str, Any]:
        logs = generate_logs(req.seed, load_profile(req.profile), req.n)
        return {"logs": [t.to_dict() for t in logs]}

    return app


app = create_app()
