"""Scalar design objective and the hard FLOP-budget feasibility gate.

The score balances accuracy against model cost:

    score = 20 * log10(a^kappa / (p^beta * c^gamma))

with ``a`` the test accuracy in percent, ``p`` the parameter count in
millions and ``c`` the FLOP count in billions. Exponents default to
kappa=2, beta=gamma=0.5 and are configurable. Feasibility is a closed
interval: a FLOP count passes when it deviates from the budget by at most
``tolerance`` (default 5% of 100M).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ObjectiveParams:
    kappa: float = 2.0
    beta: float = 0.5
    gamma: float = 0.5
    budget_flops: int = 100_000_000
    tolerance: float = 0.05

    def __post_init__(self):
        if self.kappa <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("exponents must be strictly positive")
        if self.budget_flops <= 0:
            raise ValueError("budget_flops must be positive")
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must lie in (0, 1)")


@dataclass(frozen=True)
class Metrics:
    accuracy_pct: float
    params_millions: float
    flops_billions: float

    def __post_init__(self):
        if self.accuracy_pct <= 0 or self.accuracy_pct > 100:
            raise ValueError(f"accuracy_pct must lie in (0, 100], got {self.accuracy_pct}")
        if self.params_millions <= 0 or self.flops_billions <= 0:
            raise ValueError("params_millions and flops_billions must be strictly positive")


def netscore(m: Metrics, o: ObjectiveParams = ObjectiveParams()) -> float:
    """Score in decibel-like units; higher is better."""
    return 20.0 * (
        o.kappa * math.log10(m.accuracy_pct)
        - o.beta * math.log10(m.params_millions)
        - o.gamma * math.log10(m.flops_billions)
    )


def indicator(flops: int, o: ObjectiveParams = ObjectiveParams()) -> bool:
    """True iff |flops - budget| <= tolerance * budget (boundary included)."""
    if flops <= 0:
        raise ValueError("flops must be positive")
    return abs(flops - o.budget_flops) <= o.tolerance * o.budget_flops


def rank(
    candidates: list[tuple[str, Metrics, bool]],
    o: ObjectiveParams = ObjectiveParams(),
) -> list[tuple[str, float, bool]]:
    """Total deterministic order over (id, metrics, feasible) entries.

    Feasible entries strictly dominate infeasible ones; within a group the
    order is descending score, ties broken by ascending id.
    """
    if not candidates:
        raise ValueError("rank needs at least one candidate")
    scored = [(cid, netscore(m, o), feasible) for cid, m, feasible in candidates]
    return sorted(scored, key=lambda e: (not e[2], -e[1], e[0]))
