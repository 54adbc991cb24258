"""Trajectories, primitive events, structured contexts and risk classification.

Everything here is a pure function of its inputs: no filesystem or network
access, canonicalization is lexical only.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence
from urllib.parse import urlsplit


class TrajectoryError(ValueError):
    """A trajectory document violates the event-model invariants."""


class ClassificationError(ValueError):
    """Unknown primitive type; usually means the log schema drifted."""


class CanonicalizationError(ValueError):
    pass


FAMILIES = ("file_ops", "process", "network", "browser", "interpreter")

CATEGORIES = ("write_delete", "proc_spawn", "net_send", "sensitive_read", "none")

RISK_BY_CATEGORY = {
    "write_delete": 2,
    "proc_spawn": 3,
    "net_send": 3,
    "sensitive_read": 2,
    "none": 0,
}

DELTA_TYPES = (
    "fs_create",
    "fs_modify",
    "fs_delete",
    "proc_start",
    "proc_end",
    "domain_change",
    "form_submit",
    "test_invocation",
)

DELTA_NAMESPACE = {
    "fs_create": "path",
    "fs_modify": "path",
    "fs_delete": "path",
    "proc_start": "process",
    "proc_end": "process",
    "domain_change": "url",
    "form_submit": "url",
    "test_invocation": "process",
}


@dataclass(frozen=True)
class PrimitiveSpec:
    family: str
    category: str  # category when not a sensitive read
    resource_key: str
    namespace: str
    coarse_op: str


PRIMITIVES: dict[str, PrimitiveSpec] = {
    "file_read": PrimitiveSpec("file_ops", "none", "path", "path", "read"),
    "file_write": PrimitiveSpec("file_ops", "write_delete", "path", "path", "write"),
    "file_edit": PrimitiveSpec("file_ops", "write_delete", "path", "path", "write"),
    "file_delete": PrimitiveSpec("file_ops", "write_delete", "path", "path", "delete"),
    "proc_spawn": PrimitiveSpec("process", "proc_spawn", "cmd", "process", "spawn"),
    "code_exec": PrimitiveSpec("interpreter", "proc_spawn", "code", "process", "exec"),
    "net_send": PrimitiveSpec("network", "net_send", "url", "url", "send"),
    "browse_nav": PrimitiveSpec("browser", "none", "url", "url", "navigate"),
    "browse_fill": PrimitiveSpec("browser", "none", "url", "url", "fill"),
    "browse_submit": PrimitiveSpec("browser", "net_send", "url", "url", "send"),
}

PATH_KEYS = frozenset({"path", "source", "dest"})
PAYLOAD_KEYS = frozenset({"content", "code", "value", "payload"})
DEFAULT_PORTS = {"http": 80, "https": 443, "ftp": 21, "ws": 80, "wss": 443}


def primitive_spec(primitive_type: str) -> PrimitiveSpec:
    try:
        return PRIMITIVES[primitive_type]
    except KeyError:
        raise ClassificationError(f"unknown primitive type {primitive_type!r}") from None


def register_primitive(name: str, spec: PrimitiveSpec) -> None:
    """Extend the closed primitive vocabulary (config hook)."""
    if spec.family not in FAMILIES:
        raise ValueError(f"unknown tool family {spec.family!r}")
    if spec.category not in CATEGORIES:
        raise ValueError(f"unknown category {spec.category!r}")
    PRIMITIVES[name] = spec


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ObservableDelta:
    delta_type: str
    resource: str
    magnitude: int = 0

    def __post_init__(self) -> None:
        if self.delta_type not in DELTA_TYPES:
            raise TrajectoryError(f"unknown delta type {self.delta_type!r}")
        if self.magnitude < 0:
            raise TrajectoryError("delta magnitude must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return {"delta_type": self.delta_type, "resource": self.resource, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ObservableDelta:
        return cls(d["delta_type"], d["resource"], int(d.get("magnitude", 0)))


@dataclass(frozen=True)
class Event:
    index: int
    kind: str  # "action" | "observation"
    primitive_type: str
    tool_family: str
    args: Mapping[str, str] = field(default_factory=dict)
    deltas: tuple[ObservableDelta, ...] = ()
    verdicts: tuple[str, ...] = ()

    @property
    def is_action(self) -> bool:
        return self.kind == "action"

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "kind": self.kind,
            "primitive_type": self.primitive_type,
            "tool_family": self.tool_family,
            "args": {k: self.args[k] for k in sorted(self.args)},
            "deltas": [d.to_dict() for d in self.deltas],
            "verdicts": list(self.verdicts),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Event:
        return cls(
            index=int(d["index"]),
            kind=d["kind"],
            primitive_type=d["primitive_type"],
            tool_family=d["tool_family"],
            args={str(k): str(v) for k, v in (d.get("args") or {}).items()},
            deltas=tuple(ObservableDelta.from_dict(x) for x in d.get("deltas") or ()),
            verdicts=tuple(d.get("verdicts") or ()),
        )


@dataclass(frozen=True)
class Trajectory:
    id: str
    task_desc: str
    events: tuple[Event, ...]
    label: str = "safe"
    success: bool = False
    env: Mapping[str, Any] | None = None  # initial sandbox snapshot, when known

    def __post_init__(self) -> None:
        validate_trajectory(self)

    def actions(self) -> list[Event]:
        return [e for e in self.events if e.is_action]

    def position(self, event_index: int) -> int:
        for pos, ev in enumerate(self.events):
            if ev.index == event_index:
                return pos
        raise IndexError(f"event index {event_index} not in trajectory {self.id}")

    def event(self, event_index: int) -> Event:
        return self.events[self.position(event_index)]

    def observation_for(self, action: Event) -> Event | None:
        pos = self.position(action.index)
        if pos + 1 < len(self.events) and self.events[pos + 1].kind == "observation":
            return self.events[pos + 1]
        return None

    def action_deltas(self, action: Event) -> tuple[ObservableDelta, ...]:
        obs = self.observation_for(action)
        return action.deltas + (obs.deltas if obs is not None else ())

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "task_desc": self.task_desc,
            "label": self.label,
            "success": self.success,
            "events": [e.to_dict() for e in self.events],
        }
        if self.env is not None:
            out["env"] = self.env
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Trajectory:
        return cls(
            id=str(d["id"]),
            task_desc=d.get("task_desc", ""),
            events=tuple(Event.from_dict(e) for e in d.get("events") or ()),
            label=d.get("label", "safe"),
            success=bool(d.get("success", False)),
            env=d.get("env"),
        )


def validate_trajectory(traj: Trajectory) -> None:
    if traj.label not in ("safe", "unsafe"):
        raise TrajectoryError(f"{traj.id}: label must be safe|unsafe, got {traj.label!r}")
    prev = None
    prev_kind = None
    for ev in traj.events:
        if ev.kind not in ("action", "observation"):
            raise TrajectoryError(f"{traj.id}: bad event kind {ev.kind!r}")
        if prev is not None and ev.index <= prev:
            raise TrajectoryError(f"{traj.id}: event indices must strictly increase")
        if ev.kind == "observation" and prev_kind != "action":
            raise TrajectoryError(f"{traj.id}: observation {ev.index} not paired with an action")
        if ev.verdicts and not ev.is_action:
            raise TrajectoryError(f"{traj.id}: verdicts on non-action event {ev.index}")
        prev, prev_kind = ev.index, ev.kind
    has_verdict = any(ev.verdicts for ev in traj.events)
    if has_verdict != (traj.label == "unsafe"):
        raise TrajectoryError(
            f"{traj.id}: label {traj.label!r} inconsistent with monitor verdicts"
        )


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dump_trajectory(traj: Trajectory, path: str | Path) -> None:
    Path(path).write_text(canonical_json(traj.to_dict()) + "\n", encoding="utf-8")


def load_trajectories(logs_dir: str | Path) -> list[Trajectory]:
    """Load every ``*.json`` trajectory in a directory, ordered by id."""
    out = []
    for p in sorted(Path(logs_dir).glob("*.json")):
        out.append(Trajectory.from_dict(json.loads(p.read_text(encoding="utf-8"))))
    return sorted(out, key=lambda t: t.id)


# --------------------------------------------------------------------------
# canonicalization


def canonical_path(raw: str, cwd: str = "/") -> str:
    if not raw.startswith("/"):
        raw = cwd.rstrip("/") + "/" + raw
    parts: list[str] = []
    for seg in raw.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            if parts:
                parts.pop()
            continue
        parts.append(seg)
    return "/" + "/".join(parts)


def path_under(path: str, root: str) -> bool:
    root = root.rstrip("/") or "/"
    if root == "/":
        return True
    return path == root or path.startswith(root + "/")


@dataclass(frozen=True)
class UrlParts:
    scheme: str
    domain: str
    port: int
    path: str


def parse_url(raw: str) -> UrlParts:
    try:
        parts = urlsplit(raw.strip())
        port = parts.port
    except ValueError as exc:
        raise CanonicalizationError(f"malformed URL {raw!r}: {exc}") from None
    scheme = parts.scheme.lower()
    host = (parts.hostname or "").lower().rstrip(".")
    if not scheme or not host:
        raise CanonicalizationError(f"malformed URL {raw!r}: scheme and host required")
    if port is None:
        if scheme not in DEFAULT_PORTS:
            raise CanonicalizationError(f"malformed URL {raw!r}: no port for scheme {scheme}")
        port = DEFAULT_PORTS[scheme]
    path = canonical_path(parts.path or "/")
    if parts.query:
        path = f"{path}?{parts.query}"
    return UrlParts(scheme, host, port, path)


def canonical_url(raw: str) -> str:
    u = parse_url(raw)
    return f"{u.scheme}://{u.domain}:{u.port}{u.path}"


def canonical_command(raw: str) -> str:
    return " ".join(raw.split())


def canonicalize_resource(
    raw: str,
    namespace: str,
    workspace_roots: Sequence[str] = (),
    cwd: str | None = None,
) -> tuple[str, bool]:
    """Return ``(canonical, outside_root)`` for a raw resource string.

    ``outside_root`` is only meaningful for paths; URLs and processes always
    report False.
    """
    if not raw:
        raise CanonicalizationError("empty resource")
    if namespace == "path":
        base = cwd or (workspace_roots[0] if workspace_roots else "/")
        canon = canonical_path(raw, base)
        roots = [canonical_path(r) for r in workspace_roots]
        return canon, not any(path_under(canon, r) for r in roots)
    if namespace == "url":
        return canonical_url(raw), False
    if namespace == "process":
        return canonical_command(raw), False
    raise CanonicalizationError(f"unknown namespace {namespace!r}")


def short_hash(text: str, n: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:n]


# --------------------------------------------------------------------------
# risk


@dataclass(frozen=True)
class RiskClass:
    is_hard: bool
    category: str
    risk_level: int


def matches_sensitive(resource: str, patterns: Iterable[str]) -> bool:
    # fnmatch's "*" crosses "/", so "/secrets/*" covers the whole subtree
    return any(fnmatch.fnmatchcase(resource, p) for p in patterns)


def classify_hard(
    primitive_type: str,
    canonical_args: Mapping[str, str],
    sensitive_patterns: Sequence[str] = (),
) -> RiskClass:
    spec = primitive_spec(primitive_type)
    category = spec.category
    if category == "none" and spec.namespace == "path":
        path = canonical_args.get("path")
        if path is not None and matches_sensitive(path, sensitive_patterns):
            category = "sensitive_read"
    return RiskClass(category != "none", category, RISK_BY_CATEGORY[category])


# --------------------------------------------------------------------------
# structured context


@dataclass(frozen=True)
class HistoryRecord:
    primitive_type: str
    resource: str
    coarse_op: str
    category: str

    def to_dict(self) -> dict[str, str]:
        return {
            "type": self.primitive_type,
            "resource": self.resource,
            "coarse_op": self.coarse_op,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> HistoryRecord:
        return cls(d["type"], d["resource"], d["coarse_op"], d["category"])


@dataclass(frozen=True)
class StructuredContext:
    primitive_type: str
    tool_family: str
    category: str
    risk_level: int
    canonical_args: Mapping[str, str]
    workspace_roots: tuple[str, ...]
    cwd: str
    net_dest: tuple[str, int, str] | None = None  # (domain, port, scheme)
    proc_meta: tuple[str, str] | None = None  # (executable, argv digest)
    payload_meta: tuple[int, str] | None = None  # (length, content hash)
    recent_hard_history: tuple[HistoryRecord, ...] = ()

    @property
    def resource(self) -> str | None:
        return self.canonical_args.get(primitive_spec(self.primitive_type).resource_key)

    def to_dict(self) -> dict[str, Any]:
        return {
            "primitive_type": self.primitive_type,
            "tool_family": self.tool_family,
            "category": self.category,
            "risk_level": self.risk_level,
            "canonical_args": {k: self.canonical_args[k] for k in sorted(self.canonical_args)},
            "workspace_roots": list(self.workspace_roots),
            "cwd": self.cwd,
            "net_dest": None
            if self.net_dest is None
            else {"domain": self.net_dest[0], "port": self.net_dest[1], "scheme": self.net_dest[2]},
            "proc_meta": None
            if self.proc_meta is None
            else {"executable": self.proc_meta[0], "argv_digest": self.proc_meta[1]},
            "payload_meta": None
            if self.payload_meta is None
            else {"length": self.payload_meta[0], "content_hash": self.payload_meta[1]},
            "recent_hard_history": [r.to_dict() for r in self.recent_hard_history],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StructuredContext:
        nd, pm, pl = d.get("net_dest"), d.get("proc_meta"), d.get("payload_meta")
        return cls(
            primitive_type=d["primitive_type"],
            tool_family=d["tool_family"],
            category=d["category"],
            risk_level=int(d["risk_level"]),
            canonical_args=dict(d.get("canonical_args") or {}),
            workspace_roots=tuple(d.get("workspace_roots") or ()),
            cwd=d.get("cwd", "/"),
            net_dest=None if nd is None else (nd["domain"], int(nd["port"]), nd["scheme"]),
            proc_meta=None if pm is None else (pm["executable"], pm["argv_digest"]),
            payload_meta=None if pl is None else (int(pl["length"]), pl["content_hash"]),
            recent_hard_history=tuple(HistoryRecord.from_dict(r) for r in d.get("recent_hard_history") or ()),
        )

    @property
    def ctx_id(self) -> str:
        return short_hash(canonical_json(self.to_dict()))

    def record(self) -> dict[str, Any]:
        """Flattened field-path view used by gate expressions."""
        rec: dict[str, Any] = {
            "primitive_type": self.primitive_type,
            "tool_family": self.tool_family,
            "category": self.category,
            "risk_level": str(self.risk_level),
            "cwd": self.cwd,
            "workspace_roots": list(self.workspace_roots),
        }
        if self.resource is not None:
            rec["resource"] = self.resource
        for k, v in self.canonical_args.items():
            rec[f"args.{k}"] = v
        if self.net_dest is not None:
            rec["net_dest.domain"], rec["net_dest.port"], rec["net_dest.scheme"] = (
                self.net_dest[0],
                str(self.net_dest[1]),
                self.net_dest[2],
            )
        if self.proc_meta is not None:
            rec["proc_meta.executable"], rec["proc_meta.argv_digest"] = self.proc_meta
        if self.payload_meta is not None:
            rec["payload_meta.length"] = str(self.payload_meta[0])
            rec["payload_meta.content_hash"] = self.payload_meta[1]
        return rec


def canonical_args_for(
    primitive_type: str,
    args: Mapping[str, str],
    workspace_roots: Sequence[str],
    cwd: str,
) -> tuple[dict[str, str], tuple[str, int, str] | None, tuple[str, str] | None, tuple[int, str] | None]:
    """Canonicalize raw action arguments.

    Payload-bearing arguments never enter the context verbatim; they are
    reduced to ``(length, content hash)``.
    """
    spec = primitive_spec(primitive_type)
    out: dict[str, str] = {}
    net_dest = proc_meta = payload_meta = None
    for key in sorted(args):
        raw = args[key]
        if key in PAYLOAD_KEYS:
            payload_meta = (len(raw), short_hash(raw))
            continue
        if key in ("payload_hash", "payload_len"):
            continue
        if key in PATH_KEYS:
            out[key] = canonicalize_resource(raw, "path", workspace_roots, cwd)[0]
        elif key == "url":
            u = parse_url(raw)
            out["url"] = f"{u.scheme}://{u.domain}:{u.port}{u.path}"
            out["domain"], out["scheme"], out["port"] = u.domain, u.scheme, str(u.port)
            net_dest = (u.domain, u.port, u.scheme)
        elif key == "cmd":
            cmd = canonical_command(raw)
            out["cmd"] = cmd
            exe = cmd.split(" ")[0] if cmd else ""
            out["executable"] = canonical_path(exe, cwd) if "/" in exe else exe
            proc_meta = (out["executable"], short_hash(cmd))
        else:
            out[key] = str(raw)
    if "payload_hash" in args:
        payload_meta = (int(args.get("payload_len", "0")), args["payload_hash"])
    if spec.resource_key == "code" and "code" in args:
        out["code"] = f"sha:{short_hash(args['code'])}"
        proc_meta = ("interpreter", short_hash(args["code"]))
    return out, net_dest, proc_meta, payload_meta


def make_ctx(
    action: Event,
    workspace_roots: Sequence[str],
    cwd: str,
    sensitive_patterns: Sequence[str] = (),
    history: Sequence[HistoryRecord] = (),
) -> StructuredContext:
    spec = primitive_spec(action.primitive_type)
    cargs, net_dest, proc_meta, payload_meta = canonical_args_for(
        action.primitive_type, action.args, workspace_roots, cwd
    )
    risk = classify_hard(action.primitive_type, cargs, sensitive_patterns)
    return StructuredContext(
        primitive_type=action.primitive_type,
        tool_family=spec.family,
        category=risk.category,
        risk_level=risk.risk_level,
        canonical_args=cargs,
        workspace_roots=tuple(canonical_path(r) for r in workspace_roots),
        cwd=canonical_path(cwd),
        net_dest=net_dest,
        proc_meta=proc_meta,
        payload_meta=payload_meta,
        recent_hard_history=tuple(history),
    )


def history_record(ctx: StructuredContext) -> HistoryRecord:
    spec = primitive_spec(ctx.primitive_type)
    return HistoryRecord(ctx.primitive_type, ctx.resource or "", spec.coarse_op, ctx.category)


def build_ctx(
    trajectory: Trajectory,
    event_index: int,
    H: int = 4,
    spans: Sequence[tuple[int, int]] | None = None,
    *,
    workspace_roots: Sequence[str] = ("/work",),
    cwd: str | None = None,
    sensitive_patterns: Sequence[str] = (),
) -> StructuredContext:
    """Build the structured context for the action at ``event_index``.

    History holds the ``H`` most recent hard actions before the event inside
    the same macro span (whole trajectory when ``spans`` is None), most
    recent last.
    """
    try:
        action = trajectory.event(event_index)
    except IndexError:
        raise IndexError(f"event index {event_index} out of range for {trajectory.id}") from None
    if not action.is_action:
        raise ValueError(f"event {event_index} is not an action")
    cwd = cwd or (workspace_roots[0] if workspace_roots else "/")
    lo = None
    if spans:
        for start, end in spans:
            if start <= event_index <= end:
                lo = start
                break
    prior: list[HistoryRecord] = []
    for ev in trajectory.events:
        if ev.index >= event_index:
            break
        if not ev.is_action or (lo is not None and ev.index < lo):
            continue
        ctx = make_ctx(ev, workspace_roots, cwd, sensitive_patterns)
        if ctx.category != "none":
            prior.append(history_record(ctx))
    history = prior[-H:] if H > 0 else []
    return make_ctx(action, workspace_roots, cwd, sensitive_patterns, history)
