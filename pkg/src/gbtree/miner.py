"""Replay shrinking of unsafe trajectories to minimal violating windows,
window-to-macro mapping, the append-only unsafe corpus, and node-local gate
synthesis."""

from __future__ import annotations

import json
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

from .events import Event, StructuredContext, Trajectory, build_ctx, canonical_json
from .gates.dsl import EvalEnv
from .gates.synthesis import SynthesisResult, synthesize_gates
from .sim.state import SimState, apply, checkpoint, restore


class MiningError(RuntimeError):
    """Verdict did not reproduce under replay; the trajectory is quarantined."""


VerdictKey = tuple[str, int]  # (verdict id, triggering event index)


class Replayer(Protocol):
    def verdicts(self, actions: Sequence[Event]) -> list[VerdictKey]:
        """Replay ``actions`` from the trajectory's base checkpoint."""
        ...


class SimReplayer:
    """Replays windows against the simulator, starting from the trajectory's
    initial snapshot each time."""

    def __init__(self, base: SimState) -> None:
        self._base = checkpoint(base)

    @classmethod
    def for_trajectory(cls, traj: Trajectory) -> SimReplayer:
        if not traj.env or "state" not in traj.env:
            raise MiningError(f"{traj.id}: no initial snapshot to replay from")
        return cls(SimState.from_dict(traj.env["state"]))

    def verdicts(self, actions: Sequence[Event]) -> list[VerdictKey]:
        state = restore(self._base)
        out: list[VerdictKey] = []
        for a in actions:
            state, _, vs = apply(state, a)
            out.extend((v.verdict_id, v.triggering_event_index) for v in vs)
        return out


@dataclass(frozen=True)
class UnsafeWindow:
    trajectory_id: str
    start_index: int
    end_index: int
    verdict_ids: tuple[str, ...]
    contexts: tuple[StructuredContext, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory_id": self.trajectory_id,
            "start_index": self.start_index,
            "end_index": self.end_index,
            "verdict_ids": list(self.verdict_ids),
        }


def first_verdicts(traj: Trajectory) -> list[VerdictKey]:
    """Every logged verdict in trajectory order."""
    return [(v, ev.index) for ev in traj.actions() for v in ev.verdicts]


def shrink_window(traj: Trajectory, replayer: Replayer, target: VerdictKey | None = None) -> tuple[int, int]:
    """Shortest contiguous window of actions (as positions) that reproduces ``target``.

    The earliest violating prefix end is found by binary search; the start is
    then the largest position whose window still reproduces the verdict,
    scanning right to left. Both boundary-removal probes are checked.
    """
    acts = traj.actions()
    if target is None:
        logged = first_verdicts(traj)
        if not logged:
            raise MiningError(f"{traj.id}: no verdict to shrink")
        target = logged[0]

    def fires(lo: int, hi: int) -> bool:
        return target in replayer.verdicts(acts[lo : hi + 1])

    n = len(acts)
    if n == 0 or not fires(0, n - 1):
        raise MiningError(f"{traj.id}: verdict {target[0]} does not reproduce under replay")
    lo, hi = 0, n - 1
    while lo < hi:  # earliest t1 with prefix [0..t1] violating
        mid = (lo + hi) // 2
        if fires(0, mid):
            hi = mid
        else:
            lo = mid + 1
    t1 = lo
    t0 = next(s for s in range(t1, -1, -1) if fires(s, t1))
    if t0 < t1 and fires(t0 + 1, t1):
        raise MiningError(f"{traj.id}: window start not minimal")
    if t1 > t0 and fires(t0, t1 - 1):
        raise MiningError(f"{traj.id}: window end not minimal")
    return t0, t1


def brute_force_window(traj: Trajectory, replayer: Replayer, target: VerdictKey) -> tuple[int, int] | None:
    """Reference oracle: scan every contiguous window, keep the shortest (earliest on ties)."""
    acts = traj.actions()
    best = None
    for i in range(len(acts)):
        for j in range(i, len(acts)):
            if target in replayer.verdicts(acts[i : j + 1]):
                if best is None or (j - i, i) < (best[1] - best[0], best[0]):
                    best = (i, j)
                break
    return best


def map_window_to_macros(window: tuple[int, int], spans: Sequence[tuple[int, int]]) -> tuple[int, int]:
    """Minimal contiguous range of span positions covering event indices [start, end]."""
    start, end = window
    first = next(i for i, (s, e) in enumerate(spans) if s <= start <= e or start < s)
    last = max(i for i, (s, _) in enumerate(spans) if s <= end)
    return first, max(first, last)


@dataclass
class MinedTrajectory:
    trajectory_id: str
    windows: list[UnsafeWindow] = field(default_factory=list)
    quarantined: str | None = None


def mine_trajectory(
    traj: Trajectory,
    spans: Sequence[tuple[int, int]],
    *,
    H: int = 4,
    workspace_roots: Sequence[str] = ("/work",),
    sensitive_patterns: Sequence[str] = (),
    replayer: Replayer | None = None,
) -> MinedTrajectory:
    """Shrink the first verdict, then later distinct verdicts in a second pass."""
    out = MinedTrajectory(traj.id)
    try:
        rep = replayer or SimReplayer.for_trajectory(traj)
        acts = traj.actions()
        seen: set[tuple[int, int]] = set()
        for target in first_verdicts(traj):
            t0, t1 = shrink_window(traj, rep, target)
            if (t0, t1) in seen:
                continue
            seen.add((t0, t1))
            ctxs = tuple(
                build_ctx(traj, a.index, H, spans, workspace_roots=workspace_roots, sensitive_patterns=sensitive_patterns)
                for a in acts[t0 : t1 + 1]
            )
            out.windows.append(UnsafeWindow(traj.id, acts[t0].index, acts[t1].index, (target[0],), ctxs))
    except MiningError as exc:
        out.windows = []
        out.quarantined = str(exc)
    return out


def _mine_one(args: tuple[Trajectory, list[tuple[int, int]], int, tuple[str, ...], tuple[str, ...]]) -> MinedTrajectory:
    traj, spans, H, roots, patterns = args
    return mine_trajectory(traj, spans, H=H, workspace_roots=roots, sensitive_patterns=patterns)


def mine_all(
    items: Sequence[tuple[Trajectory, Sequence[tuple[int, int]]]],
    *,
    H: int = 4,
    workspace_roots: Sequence[str] = ("/work",),
    sensitive_patterns: Sequence[str] = (),
    workers: int = 1,
) -> list[MinedTrajectory]:
    jobs = [(t, list(s), H, tuple(workspace_roots), tuple(sensitive_patterns)) for t, s in items]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_mine_one, jobs))
    return [_mine_one(j) for j in jobs]


class UnsafeCorpus:
    """Append-only store of violating contexts with provenance."""

    def __init__(self) -> None:
        self._rows: list[dict[str, Any]] = []
        self._ids: set[str] = set()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._rows)

    def add(self, ctx: StructuredContext, trajectory_id: str, window: tuple[int, int]) -> bool:
        with self._lock:
            if ctx.ctx_id in self._ids:
                return False
            self._ids.add(ctx.ctx_id)
            self._rows.append({"ctx": ctx.to_dict(), "ctx_id": ctx.ctx_id, "trajectory_id": trajectory_id,
                               "window": list(window)})
            return True

    def contexts(self) -> list[StructuredContext]:
        return [StructuredContext.from_dict(r["ctx"]) for r in self._rows]

    def ids(self) -> frozenset[str]:
        return frozenset(self._ids)

    def rows(self) -> list[dict[str, Any]]:
        return list(self._rows)

    def dumps(self) -> str:
        return canonical_json(self._rows)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> UnsafeCorpus:
        corpus = cls()
        for row in json.loads(Path(path).read_text(encoding="utf-8")):
            corpus.add(StructuredContext.from_dict(row["ctx"]), row["trajectory_id"], tuple(row["window"]))
        return corpus

    def merge(self, other: Iterable[dict[str, Any]]) -> None:
        for row in other:
            self.add(StructuredContext.from_dict(row["ctx"]), row["trajectory_id"], tuple(row["window"]))


def synthesize_node_gates(
    contexts: Sequence[StructuredContext],
    benign_corpus: Sequence[StructuredContext],
    eps_node: float,
    node_id: int,
    env: EvalEnv | None = None,
) -> SynthesisResult:
    """Node-local gates covering the hard contexts of a window inside one macro."""
    hard = [c for c in contexts if c.category != "none"]
    return synthesize_gates(hard or list(contexts), benign_corpus, eps_node, scope=f"node:{node_id}", env=env)
