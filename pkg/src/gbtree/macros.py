"""Delta-anchored segmentation of trajectories into macros, behavior
signatures, template descriptions and the abstraction-stability test."""

from __future__ import annotations

import math
import posixpath
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Callable, Mapping, Protocol, Sequence
from urllib.parse import urlsplit

from .embedding import l2_normalize
from .events import (
    DELTA_TYPES,
    FAMILIES,
    PRIMITIVES,
    Event,
    ObservableDelta,
    RiskClass,
    Trajectory,
    canonical_args_for,
    canonical_json,
    classify_hard,
    short_hash,
)

FS_DELTAS = frozenset({"fs_create", "fs_modify", "fs_delete"})
DEFAULT_FS_THRESHOLD = 200

Span = tuple[int, int]  # (first action index, last action index), inclusive
SigmaDisc = tuple[tuple[tuple[str, int], ...], tuple[str, ...], bool, tuple[str, ...]]


class SummarizerError(RuntimeError):
    pass


class Summarizer(Protocol):
    def summarize(self, events: Sequence[Event], deltas: Sequence[ObservableDelta]) -> Mapping[str, Any]:
        """Return {macro_desc, macro_tags, resources, hard_touch}."""
        ...


Segmenter = Callable[[Trajectory, int], list[Span]]


@dataclass(frozen=True)
class MacroSpan:
    trajectory_id: str
    start_index: int
    end_index: int
    description: str
    tags: tuple[str, ...]
    risk: RiskClass
    sigma_disc: SigmaDisc
    sigma_cont: tuple[float, ...]
    degraded: bool = False

    @property
    def env_context_ref(self) -> tuple[str, int, int]:
        return (self.trajectory_id, self.start_index, self.end_index)

    @property
    def span(self) -> Span:
        return (self.start_index, self.end_index)


@dataclass(frozen=True)
class StabilityReport:
    boundary_sets: tuple[frozenset[int], ...]
    pairwise_jaccard_min: float
    stable: bool


# --------------------------------------------------------------------------
# segmentation


def _is_test(traj: Trajectory, ev: Event) -> bool:
    return any(d.delta_type == "test_invocation" for d in traj.action_deltas(ev))


def segment(trajectory: Trajectory, fs_threshold: int = DEFAULT_FS_THRESHOLD) -> list[Span]:
    """Split the action events into contiguous spans.

    A boundary opens before action ``i`` on a tool-family switch, a
    domain_change delta at ``i``, either side of a test invocation, when the
    span's cumulative fs magnitude would pass ``fs_threshold``, or on a
    proc_start while the span has not started a process yet. Several triggers
    at one index still open one boundary.
    """
    actions = trajectory.actions()
    if not actions:
        return []
    spans: list[Span] = []
    start = actions[0]
    fs_total = 0
    span_has_proc = False
    prev = None
    for ev in actions:
        deltas = trajectory.action_deltas(ev)
        fs_mag = sum(d.magnitude for d in deltas if d.delta_type in FS_DELTAS)
        has_proc = any(d.delta_type == "proc_start" for d in deltas)
        if prev is not None:
            cut = (
                ev.tool_family != prev.tool_family
                or any(d.delta_type == "domain_change" for d in deltas)
                or _is_test(trajectory, ev)
                or _is_test(trajectory, prev)
                or (fs_mag > 0 and fs_total + fs_mag > fs_threshold)
                or (has_proc and not span_has_proc)
            )
            if cut:
                spans.append((start.index, prev.index))
                start, fs_total, span_has_proc = ev, 0, False
        fs_total += fs_mag
        span_has_proc = span_has_proc or has_proc
        prev = ev
    spans.append((start.index, prev.index))
    return spans


def span_actions(trajectory: Trajectory, span: Span) -> list[Event]:
    return [e for e in trajectory.actions() if span[0] <= e.index <= span[1]]


def span_events(trajectory: Trajectory, span: Span) -> list[Event]:
    """Actions in the span together with their paired observations."""
    out = []
    for ev in span_actions(trajectory, span):
        out.append(ev)
        obs = trajectory.observation_for(ev)
        if obs is not None:
            out.append(obs)
    return out


def span_deltas(trajectory: Trajectory, span: Span) -> list[ObservableDelta]:
    out: list[ObservableDelta] = []
    for ev in span_actions(trajectory, span):
        out.extend(trajectory.action_deltas(ev))
    return out


# --------------------------------------------------------------------------
# signatures


def _risk(ev: Event, roots: Sequence[str], patterns: Sequence[str]) -> RiskClass:
    cwd = roots[0] if roots else "/"
    cargs = canonical_args_for(ev.primitive_type, ev.args, roots, cwd)[0]
    return classify_hard(ev.primitive_type, cargs, patterns)


def signature(
    span: Span,
    trajectory: Trajectory,
    *,
    workspace_roots: Sequence[str] = ("/work",),
    sensitive_patterns: Sequence[str] = (),
) -> tuple[SigmaDisc, tuple[float, ...]]:
    acts = span_actions(trajectory, span)
    deltas = span_deltas(trajectory, span)
    fam = Counter(e.tool_family for e in acts)
    namespaces = sorted({PRIMITIVES[e.primitive_type].namespace for e in acts})
    hard = any(_risk(e, workspace_roots, sensitive_patterns).is_hard for e in acts)
    dtypes = sorted({d.delta_type for d in deltas})
    disc: SigmaDisc = (tuple(sorted(fam.items())), tuple(namespaces), hard, tuple(dtypes))
    dcount = Counter(d.delta_type for d in deltas)
    magnitude = sum(d.magnitude for d in deltas if d.delta_type in FS_DELTAS)
    raw = [float(fam.get(f, 0)) for f in FAMILIES]
    raw.append(math.log1p(magnitude))
    raw.extend(float(dcount.get(t, 0)) for t in DELTA_TYPES)
    return disc, l2_normalize(raw)


def span_risk(span: Span, trajectory: Trajectory, *, workspace_roots=("/work",), sensitive_patterns=()) -> RiskClass:
    best = RiskClass(False, "none", 0)
    for e in span_actions(trajectory, span):
        r = _risk(e, workspace_roots, sensitive_patterns)
        if r.risk_level > best.risk_level:
            best = r
    return best


# --------------------------------------------------------------------------
# descriptions


def _short(resource: str) -> str:
    if resource.startswith("/"):
        return posixpath.basename(resource) or resource
    return resource


def _phrase(ev: Event, deltas: Sequence[ObservableDelta]) -> tuple[str, str]:
    a = ev.args
    p = ev.primitive_type
    if any(d.delta_type == "test_invocation" for d in deltas):
        return "run", "tests"
    if p in ("file_write", "file_edit"):
        return "modify", _short(a.get("path", "file"))
    if p == "file_delete":
        return "delete", _short(a.get("path", "file"))
    if p == "file_read":
        return "read", _short(a.get("path", "file"))
    if p == "proc_spawn":
        return "run", (a.get("cmd", "process").split() or ["process"])[0]
    if p == "code_exec":
        return "execute", "code"
    parts = urlsplit(a.get("url", ""))
    host = (parts.hostname or "site") + (parts.path if parts.path not in ("", "/") else "")
    if p == "net_send":
        return "send data to", (parts.hostname or "site")
    if p == "browse_nav":
        return "open", host
    if p == "browse_fill":
        return "fill form on", host
    if p == "browse_submit":
        return "submit form on", host
    return p, "?"


class TemplateSummarizer:
    """Reference summarizer: a fixed template over primitive types and resources.

    ``events`` holds the span's actions and their observations; each
    observation's deltas are credited to the action before it.
    """

    def summarize(self, events: Sequence[Event], deltas: Sequence[ObservableDelta]) -> dict[str, Any]:
        paired: list[tuple[Event, list[ObservableDelta]]] = []
        for ev in events:
            if ev.is_action:
                paired.append((ev, list(ev.deltas)))
            elif paired:
                paired[-1][1].extend(ev.deltas)
        phrases: list[tuple[str, list[str]]] = []
        resources: set[str] = set()
        for ev, own in paired:
            verb, obj = _phrase(ev, own)
            if phrases and phrases[-1][0] == verb:
                if obj not in phrases[-1][1]:
                    phrases[-1][1].append(obj)
            else:
                phrases.append((verb, [obj]))
            resources.update(v for k, v in ev.args.items() if k in ("path", "url", "cmd"))
        parts = []
        for verb, objs in phrases:
            if len(objs) > 2:
                parts.append(f"{verb} {len(objs)} items ({objs[0]}, ...)")
            else:
                parts.append(f"{verb} {' and '.join(objs)}")
        tags = {ev.tool_family for ev, _ in paired}
        if ("run", ["tests"]) in phrases:
            tags.add("test")
        return {
            "macro_desc": "; ".join(parts),
            "macro_tags": sorted(tags),
            "resources": sorted(resources),
            "hard_touch": None,
        }


def describe(
    events: Sequence[Event],
    deltas: Sequence[ObservableDelta],
    summarizer: Summarizer,
    hard_touch: bool,
) -> tuple[str, tuple[str, ...], bool, bool]:
    """Return (description, tags, hard_touch, degraded).

    ``hard_touch`` always comes from the logs; whatever the summarizer says
    about it is ignored.
    """
    for _ in range(2):
        try:
            out = summarizer.summarize(events, deltas)
            desc = str(out.get("macro_desc") or "").strip()
            if desc:
                return desc, tuple(out.get("macro_tags") or ()), hard_touch, False
        except SummarizerError:
            pass
    key = canonical_json([e.to_dict() for e in events])  # placeholder stays deterministic
    return f"macro@{short_hash(key, 8)}", (), hard_touch, True


# --------------------------------------------------------------------------
# stability


def jaccard(a: frozenset[int], b: frozenset[int]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def stability_test(
    trajectory: Trajectory,
    P: int = 5,
    delta_stab: float = 0.9,
    segmenter: Segmenter | None = None,
) -> StabilityReport:
    """Boundary-set Jaccard across P perturbations plus the unperturbed run.

    With the deterministic segmenter every run yields the same boundaries,
    so the test passes trivially.
    """
    seg = segmenter or (lambda t, _p: segment(t))
    sets = tuple(frozenset(s for s, _ in seg(trajectory, p)) for p in range(P + 1))
    jmin = min((jaccard(a, b) for a, b in combinations(sets, 2)), default=1.0)
    return StabilityReport(sets, jmin, jmin >= delta_stab)


# --------------------------------------------------------------------------
# extraction


def extract_macros(
    trajectory: Trajectory,
    summarizer: Summarizer | None = None,
    *,
    fs_threshold: int = DEFAULT_FS_THRESHOLD,
    workspace_roots: Sequence[str] = ("/work",),
    sensitive_patterns: Sequence[str] = (),
) -> list[MacroSpan]:
    summarizer = summarizer or TemplateSummarizer()
    out = []
    for span in segment(trajectory, fs_threshold):
        evs = span_events(trajectory, span)
        deltas = span_deltas(trajectory, span)
        disc, cont = signature(span, trajectory, workspace_roots=workspace_roots, sensitive_patterns=sensitive_patterns)
        desc, tags, _, degraded = describe(evs, deltas, summarizer, disc[2])
        risk = span_risk(span, trajectory, workspace_roots=workspace_roots, sensitive_patterns=sensitive_patterns)
        out.append(MacroSpan(trajectory.id, span[0], span[1], desc, tags, risk, disc, cont, degraded))
    return out
