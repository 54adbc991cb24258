"""Command-line client. Reads and writes files; all work happens in the
service, either at ``--server`` or in-process."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, load_config
from .events import canonical_json, dump_trajectory, load_trajectories

MODES = ("native", "guardrail-only", "gbt-basic", "gbt-se")


class Client:
    """Posts JSON to the service; exits nonzero on any HTTP error."""

    def __init__(self, server: str | None) -> None:
        if server:
            import httpx

            self._http = httpx.Client(base_url=server, timeout=None)
        else:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import app

            self._http = TestClient(app)

    def post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        resp = self._http.post(path, json=body)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail")
            except ValueError:
                detail = resp.text
            raise SystemExit(f"error: {path}: {detail}")
        return resp.json()


def _read(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _write(path: str | None, doc: Any) -> None:
    text = canonical_json(doc) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _config(args: argparse.Namespace) -> dict[str, Any]:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError, ValueError) as exc:
        raise SystemExit(f"error: config: {exc}") from None
    d = cfg.to_dict()
    if args.workers is not None:
        d["workers"] = args.workers
    return d


def _workers(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    return args.workers if args.workers is not None else int(cfg.get("workers", 1))


def cmd_distill(args: argparse.Namespace, client: Client) -> int:
    cfg = _config(args)
    logs = [t.to_dict() for t in load_trajectories(args.logs)]
    body: dict[str, Any] = {"logs": logs, "config": cfg, "workers": _workers(args, cfg)}
    if args.prototypes:
        body["prototypes"] = _read(args.prototypes)
    out = client.post("/distill", body)
    _write(args.output, out["artifact"])
    rep = out["build_report"]
    for w in rep.get("warnings", ()):
        print(f"warning: {w}", file=sys.stderr)
    print(f"distilled {rep['trajectories']} trajectories: {rep.get('nodes', 0)} nodes, "
          f"{rep['node_gates']} node gates, {rep['global_gates']} synthesized global gates", file=sys.stderr)
    return 0


def _failures(doc: Any) -> list[dict[str, Any]]:
    episodes = doc.get("episodes", doc) if isinstance(doc, dict) else doc
    return [e for e in episodes if e.get("covered") and not e.get("success")]


def cmd_evolve(args: argparse.Namespace, client: Client) -> int:
    cfg = _config(args)
    out = client.post("/evolve", {"artifact": _read(args.artifact), "failures": _failures(_read(args.failures)),
                                  "config": cfg})
    _write(args.output, out["artifact"])
    accepted = sum(1 for e in out["entries"] if e["outcome"]["accepted"])
    for e in out["entries"]:
        if not e["outcome"]["accepted"]:
            print(f"rejected {e['episode']}: {e['outcome']['reason']}", file=sys.stderr)
    print(f"version {out['version']}: {accepted} of {len(out['entries'])} repairs accepted", file=sys.stderr)
    return 0


def cmd_run(args: argparse.Namespace, client: Client) -> int:
    cfg = _config(args)
    body: dict[str, Any] = {
        "artifact": _read(args.artifact) if args.artifact else None,
        "scenarios": {"seed": args.seed, "profile": args.profile, "n": args.n},
        "mode": args.mode,
        "workers": _workers(args, cfg),
        "config": cfg,
    }
    out = client.post("/run", body)
    _write(args.output, out)
    agg = out["aggregates"]
    print(" ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()), file=sys.stderr)
    return 1 if agg.get("errors") else 0


def cmd_audit(args: argparse.Namespace, client: Client) -> int:
    body: dict[str, Any] = {"artifact": _read(args.artifact)}
    if args.previous:
        body["previous"] = _read(args.previous)
    if args.probe:
        body["probe"] = _read(args.probe)
    out = client.post("/audit", body)
    for c in out["checks"]:
        print(f"{'ok  ' if c['ok'] else 'FAIL'} {c['invariant']}: {c['detail']}")
    return 0 if out["ok"] else 2


def cmd_gate_test(args: argparse.Namespace, client: Client) -> int:
    cfg = _config(args)
    gates = _read(args.gates)
    unsafe: Any = []
    benign: Any = []
    if isinstance(gates, dict) and gates.get("format"):  # a whole artifact; its own corpora are the defaults
        unsafe, benign = gates["unsafe_corpus"], gates["benign"]
        gates = gates["global_gates"]
    if args.unsafe:
        unsafe = _read(args.unsafe)
    if args.benign:
        benign = _read(args.benign)
    out = client.post("/gate-test", {"gates": gates, "unsafe": unsafe, "benign": benign, "config": cfg})
    _write(args.output, out)
    return 0


def cmd_simulate(args: argparse.Namespace, client: Client) -> int:
    from .events import Trajectory

    out = client.post("/simulate", {"seed": args.seed, "profile": args.profile, "n": args.n})
    dest = Path(args.output)
    dest.mkdir(parents=True, exist_ok=True)
    for t in out["logs"]:
        dump_trajectory(Trajectory.from_dict(t), dest / f"{t['id']}.json")
    print(f"wrote {len(out['logs'])} trajectories to {dest}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--mode", choices=MODES, default="gbt-se")
    common.add_argument("--server", help="service base URL; in-process when omitted")

    p = argparse.ArgumentParser(prog="gbtree", description="Gated behavior tree tooling")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", parents=[common], help="build a tree artifact from trajectory logs")
    d.add_argument("logs", help="directory of trajectory JSON files")
    d.add_argument("-o", "--output", default="-")
    d.add_argument("--prototypes", help="JSON {family: [prototype task descriptions]}")
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("evolve", parents=[common], help="repair covered failures from a run report")
    e.add_argument("artifact")
    e.add_argument("failures", help="run report or list of episode records")
    e.add_argument("-o", "--output", default="-")
    e.set_defaults(fn=cmd_evolve)

    r = sub.add_parser("run", parents=[common], help="run simulated episodes and report")
    r.add_argument("artifact", nargs="?", help="artifact (not needed for --mode native)")
    r.add_argument("--profile", default="mixed")
    r.add_argument("-n", type=int, default=100)
    r.add_argument("-o", "--output", default="-")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("audit", parents=[common], help="check artifact invariants")
    a.add_argument("artifact")
    a.add_argument("--previous", help="earlier artifact version")
    a.add_argument("--probe", help="extra probe contexts (JSON list)")
    a.set_defaults(fn=cmd_audit)

    g = sub.add_parser("gate-test", parents=[common], help="evaluate a gate file against corpora")
    g.add_argument("gates", help="gate library JSON or an artifact")
    g.add_argument("--unsafe")
    g.add_argument("--benign")
    g.add_argument("-o", "--output", default="-")
    g.set_defaults(fn=cmd_gate_test)

    s = sub.add_parser("simulate", parents=[common], help="write simulated trajectory logs")
    s.add_argument("--profile", default="mixed")
    s.add_argument("-n", type=int, default=200)
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(fn=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args, Client(args.server))


if __name__ == "__main__":
    raise SystemExit(main())
