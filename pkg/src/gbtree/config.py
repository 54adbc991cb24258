"""Single config object carrying every threshold, with reference defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # context
    H: int = 4
    workspace_roots: tuple[str, ...] = ("/work",)
    sensitive_patterns: tuple[str, ...] = ("/secrets/*", "*.pem", "/etc/shadow")
    # abstraction
    fs_magnitude_threshold: int = 200
    delta_stab: float = 0.9
    P: int = 5
    # merge
    theta_sig: float = 0.92
    theta_merge: float = 0.85
    audit_traffic_threshold: int = 25
    # routing
    delta_fam: float = 0.55
    T_fam: float = 0.05
    delta_switch: float = 0.10
    m: int = 3
    # traversal
    theta_low: float = 0.70
    theta_high: float = 0.78
    safe_explore_budget: int = 3
    repeat_cos: float = 0.95
    stall_no_progress: int = 3
    gate_loop_blocks: int = 3
    gate_loop_window: int = 5
    context_budget_chars: int = 300
    max_macro_steps: int = 12
    # recovery
    lam: float = 0.5
    D_max: int = 8
    theta_env: float = 0.80
    top_k: int = 50
    # gates
    eps_benign_global: float = 0.01
    eps_benign_node: float = 0.02
    # self-evolution
    alpha: float = 1.0
    beta: float = 0.5
    R: int = 50
    delta_succ: float = 0.02
    min_regression_successes: int = 5
    # embedding
    embed_dim: int = 256
    # service/runtime
    workers: int = 1
    allowlists: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    content_labels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 < self.theta_low < self.theta_high <= 1:
            raise ConfigError("need 0 < theta_low < theta_high <= 1")
        if self.H < 0 or self.D_max < 1 or self.P < 1:
            raise ConfigError("H must be >= 0, D_max and P >= 1")
        if self.T_fam <= 0:
            raise ConfigError("T_fam must be positive")
        for name in ("eps_benign_global", "eps_benign_node", "delta_succ", "delta_stab"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["allowlists"] = {k: list(v) for k, v in sorted(self.allowlists.items())}
        d["content_labels"] = {k: list(v) for k, v in sorted(self.content_labels.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Config:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw: dict[str, Any] = {}
        for k, v in d.items():
            if k in ("allowlists", "content_labels"):
                kw[k] = {str(a): tuple(b) for a, b in (v or {}).items()}
            elif isinstance(v, list):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)

    def with_overrides(self, **kw: Any) -> Config:
        d = self.to_dict()
        d.update(kw)
        return Config.from_dict(d)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    data = yaml.safe_load(text) if p.suffix in (".yaml", ".yml") else json.loads(text)
    if data is None:
        return Config()
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return Config.from_dict(data)
