"""Selection score over children and the context clustering it conditions on."""

from __future__ import annotations

import posixpath
from dataclasses import dataclass
from typing import Any, Mapping

from .events import StructuredContext, canonical_json, short_hash

UNSEEN_PRIOR = 0.5


@dataclass(frozen=True)
class ClusterKey:
    resource_family: str
    risk_level: int
    disc_bucket: str

    def __str__(self) -> str:
        return f"{self.resource_family}|{self.risk_level}|{self.disc_bucket}"


def coarse_resource(ctx: StructuredContext | None) -> str:
    if ctx is None or not ctx.resource:
        return "-"
    if ctx.net_dest is not None:
        return ctx.net_dest[0]
    if ctx.proc_meta is not None:
        return posixpath.basename(ctx.proc_meta[0])
    parts = [p for p in ctx.resource.split("/") if p]
    return "/" + "/".join(parts[:2]) if ctx.resource.startswith("/") else ctx.resource


def disc_bucket(sigma_disc: Any) -> str:
    if sigma_disc is None:
        return "none"
    families, _ns, hard, _dt = sigma_disc
    return short_hash(canonical_json([[f for f, _ in families], bool(hard)]), 8)


def cluster_key(ctx: StructuredContext | None, sigma_disc: Any) -> ClusterKey:
    return ClusterKey(coarse_resource(ctx), 0 if ctx is None else ctx.risk_level, disc_bucket(sigma_disc))


def success_rate(stats: Mapping[int, Mapping[str, list[int]]], child_id: int, cluster: str) -> float:
    """Add-one smoothed success rate; an unseen cluster gets the 0.5 prior."""
    counts = stats.get(child_id, {}).get(cluster)
    if counts is None:
        return UNSEEN_PRIOR
    s, n = counts
    return (s + 1) / (n + 2)


def selection_score(similarity: float, rate: float, alpha: float = 1.0, beta: float = 0.5) -> float:
    return alpha * similarity + beta * rate
