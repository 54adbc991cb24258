"""Text embedding port and the feature-hashed reference embedder."""

from __future__ import annotations

import hashlib
import math
import operator
from functools import lru_cache
from typing import Protocol, Sequence


class Embedder(Protocol):
    def embed(self, text: str) -> tuple[float, ...]: ...


def _bucket(token: str, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "big")
    sign = 1.0 if (value >> 63) & 1 == 0 else -1.0
    return value % dim, sign


def l2_normalize(values: Sequence[float]) -> tuple[float, ...]:
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0.0:
        return tuple(0.0 for _ in values)
    return tuple(v / norm for v in values)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    dot = sum(map(operator.mul, a, b))
    na = math.sqrt(sum(map(operator.mul, a, a)))
    nb = math.sqrt(sum(map(operator.mul, b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # clamp float drift so thresholds like ">= 1.0" behave
    return max(-1.0, min(1.0, dot / (na * nb)))


class HashingEmbedder:
    """Character-trigram feature hashing into a fixed-width unit vector.

    Text is lowercased and whitespace-collapsed, padded with a boundary
    marker, and every trigram is hashed (blake2b, so stable across
    processes) into ``dim`` signed buckets.
    """

    def __init__(self, dim: int = 256) -> None:
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._cached = lru_cache(maxsize=8192)(self._embed)

    def embed(self, text: str) -> tuple[float, ...]:
        return self._cached(text)

    def similarity(self, a: str, b: str) -> float:
        return cosine(self.embed(a), self.embed(b))

    def _embed(self, text: str) -> tuple[float, ...]:
        norm = " ".join(text.lower().split())
        vec = [0.0] * self.dim
        if not norm:
            return tuple(vec)
        padded = f"#{norm}#"
        for i in range(len(padded) - 2):
            idx, sign = _bucket(padded[i : i + 3], self.dim)
            vec[idx] += sign
        return l2_normalize(vec)
