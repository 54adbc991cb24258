"""Prototype-similarity family routing with abstention and drift re-rooting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .embedding import HashingEmbedder, cosine


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class FamilyPrototypes:
    family_id: str
    prototypes: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 2 <= len(self.prototypes) <= 8:
            raise RoutingError(f"family {self.family_id}: need 2-8 prototypes, got {len(self.prototypes)}")


@dataclass(frozen=True)
class RoutingDecision:
    family: str | None
    p_max: float
    abstained: bool
    probabilities: Mapping[str, float]


def softmax(scores: Sequence[float], temperature: float) -> list[float]:
    top = max(scores)
    exps = [math.exp((s - top) / temperature) for s in scores]
    z = sum(exps)
    return [e / z for e in exps]


def family_scores(text: str, prototype_sets: Sequence[FamilyPrototypes], embedder: HashingEmbedder) -> dict[str, float]:
    q = embedder.embed(text)
    return {
        fp.family_id: max(cosine(q, embedder.embed(p)) for p in fp.prototypes)
        for fp in sorted(prototype_sets, key=lambda f: f.family_id)
    }


def probabilities_from_scores(scores: Mapping[str, float], T_fam: float) -> dict[str, float]:
    fams = sorted(scores)
    probs = softmax([scores[f] for f in fams], T_fam)
    return dict(zip(fams, probs))


def decide(probs: Mapping[str, float], delta_fam: float) -> RoutingDecision:
    if not probs:
        raise RoutingError("no families configured")
    fam = min(probs, key=lambda f: (-probs[f], f))
    p_max = probs[fam]
    if p_max < delta_fam:
        return RoutingDecision(None, p_max, True, dict(probs))
    return RoutingDecision(fam, p_max, False, dict(probs))


def route(
    task_desc: str,
    prototype_sets: Sequence[FamilyPrototypes],
    T_fam: float = 0.05,
    delta_fam: float = 0.55,
    embedder: HashingEmbedder | None = None,
) -> RoutingDecision:
    """Softmax over best-prototype cosine per family; abstain below ``delta_fam``.

    Ties on probability go to the lexicographically smallest family id.
    """
    if not prototype_sets:
        raise RoutingError("no families configured")
    scores = family_scores(task_desc, prototype_sets, embedder or HashingEmbedder())
    return decide(probabilities_from_scores(scores, T_fam), delta_fam)


@dataclass(frozen=True)
class RerootDecision:
    reroot: bool
    new_family: str | None = None
    p_new: float = 0.0
    p_current: float = 0.0


def reroot_from_probs(current: str, probs: Mapping[str, float], delta_switch: float, delta_fam: float) -> RerootDecision:
    p_cur = probs.get(current, 0.0)
    others = [f for f in probs if f != current]
    if not others:
        return RerootDecision(False, p_current=p_cur)
    best = min(others, key=lambda f: (-probs[f], f))
    p_new = probs[best]
    # small epsilon keeps margins given as exact decimals (0.80 - 0.70) on the right side
    if p_new - p_cur >= delta_switch - 1e-12 and p_new >= delta_fam:
        return RerootDecision(True, best, p_new, p_cur)
    return RerootDecision(False, None, p_new, p_cur)


def maybe_reroot(
    current_family: str,
    current_summary: str,
    prototype_sets: Sequence[FamilyPrototypes],
    delta_switch: float = 0.10,
    delta_fam: float = 0.55,
    T_fam: float = 0.05,
    embedder: HashingEmbedder | None = None,
) -> RerootDecision:
    """Re-anchor to another family root when it beats the current one by a margin.

    Only the anchor moves; the tree and gates are untouched, so acyclicity
    holds trivially.
    """
    scores = family_scores(current_summary, prototype_sets, embedder or HashingEmbedder())
    return reroot_from_probs(current_family, probabilities_from_scores(scores, T_fam), delta_switch, delta_fam)


def load_prototypes(path: str | Path) -> list[FamilyPrototypes]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return prototypes_from_mapping(data)


def prototypes_from_mapping(data: Mapping[str, Sequence[str]]) -> list[FamilyPrototypes]:
    return [FamilyPrototypes(str(k), tuple(v)) for k, v in sorted(data.items())]
