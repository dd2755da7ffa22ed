"""Deterministic kill-chain attack/defense simulator and dark-region disk scanner."""

from __future__ import annotations

from .kernels import BACKEND
from .scenario import RunReport, Scenario, canonical, load, parse, replay, run, score

__all__ = ["BACKEND", "RunReport", "Scenario", "canonical", "load", "parse", "replay", "run", "score"]
__version__ = "0.1.0"
