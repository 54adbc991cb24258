"""Gated behavior trees: distill agent trajectories into a tree of macros
with deterministic pre-execution safety gates, steer episodes along it, and
repair it from covered failures without relaxing any gate."""

from .config import Config, load_config
from .pipeline import Artifact, audit, distill, evolve, run

__version__ = "0.1.0"

__all__ = ["Artifact", "Config", "audit", "distill", "evolve", "load_config", "run"]
