"""Synthetic lab families for self-evolution tests.

Each cluster k has a logged path A-B-C, a logged analog A'-B'-C, and an
unlogged variant A-B'-C whose middle step is only a fragile match for B.
"""

from __future__ import annotations

from gbtree.embedding import HashingEmbedder
from dataclasses import replace

from gbtree.sim.scenarios import RISKY, A, Step, Variant, make_scenario, native_trajectory

WORDS = ("alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima mike november oscar papa "
         "quebec romeo sierra tango uniform victor whiskey xray yankee zulu").split()
TASK_WORDS = ("ledger billing audit sales intake archive backup status payroll inventory roster budget "
              "forecast invoice").split()


def send_desc(host: str) -> str:
    return f"send data to {host}.example.com"


def fragile_pairs(theta_low: float = 0.70, theta_high: float = 0.78, n: int = 10, dim: int = 256):
    """Disjoint host pairs whose send descriptions fall in the fragile band."""
    emb = HashingEmbedder(dim)
    used: set[str] = set()
    out = []
    for i, a in enumerate(WORDS):
        for b in WORDS[i + 1 :]:
            if a in used or b in used:
                continue
            c = emb.similarity(send_desc(a), send_desc(b))
            if theta_low + 0.01 <= c < theta_high - 0.01:
                out.append((a, b, c))
                used |= {a, b}
                break
        if len(out) == n:
            break
    return out


def _variant(k: int, name: str, first: str, host: str, task: str) -> Variant:
    return Variant(
        f"lab{k}", name, task,
        {f"/work/lab{k}/{first}.txt": "old", f"/work/lab{k}/notes.md": "# notes"},
        (Step(f"edit-{first}", (A("file_write", path=f"/work/lab{k}/{first}.txt", lines="3"),)),
         Step(f"send-{host}", (A("net_send", url=f"https://{host}.example.com/upload", payload=f"batch {k}"),)),
         Step("notes", (A("file_write", path=f"/work/lab{k}/notes.md", lines="1"),))),
    )


def cluster(k: int, pair: tuple[str, str, float]):
    """(logged variant, analog variant, unlogged failing variant, task description)."""
    b, b2, _ = pair
    task = f"{TASK_WORDS[k % len(TASK_WORDS)]} run {k}: update the files and upload the batch"
    v0 = _variant(k, "base", f"intake{k}", b, task)
    v2 = _variant(k, "analog", f"summary{k}", b2, task)
    v1 = _variant(k, "shifted", f"intake{k}", b2, task)
    return v0, v2, v1, task


def lab_world(n_clusters: int = 10, logs_per_variant: int = 5, failures_per_cluster: int = 5):
    pairs = fragile_pairs(n=n_clusters)
    logs, failing, protos = [], {}, {}
    for k, pair in enumerate(pairs):
        v0, v2, v1, task = cluster(k, pair)
        for i in range(logs_per_variant):
            logs.append(native_trajectory(make_scenario(v0, i, f"lab{k}-v0-{i}")))
            logs.append(native_trajectory(make_scenario(v2, i, f"lab{k}-v2-{i}")))
        risky = replace(v0, name="risky", plan=(v0.plan[0], *RISKY["install-helper"], *v0.plan[1:]))
        logs.append(native_trajectory(make_scenario(risky, 0, f"lab{k}-risky")))
        failing[f"lab{k}"] = [make_scenario(v1, 100 + i, f"lab{k}-v1-{i}") for i in range(failures_per_cluster)]
        protos[f"lab{k}"] = [task, f"{task} again"]
    return logs, failing, protos, pairs
