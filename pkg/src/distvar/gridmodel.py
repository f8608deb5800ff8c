"""Linearized DistFlow evaluation and the inverter capability circle."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .feeder import FeederGraph, GridMatrices


class InfeasibleOperatingPoint(ValueError):
    """Requested operating point lies outside the apparent-power circle."""


@dataclass(frozen=True)
class GridCase:
    p: np.ndarray
    q: np.ndarray
    v0: float
    mu: np.ndarray

    def __post_init__(self):
        n = len(self.p)
        if len(self.q) != n or len(self.mu) != n:
            raise ValueError("p, q and mu must have the same length")
        if not self.v0 > 0:
            raise ValueError(f"v0 must be positive, got {self.v0}")
        if np.any(np.asarray(self.mu) <= 0):
            raise ValueError("desired voltages must be positive")


@dataclass(frozen=True)
class InverterSpec:
    s_bar: float
    p_tilde: float

    def __post_init__(self):
        if not self.s_bar > 0:
            raise ValueError(f"rated apparent power must be positive, got {self.s_bar}")
        if self.p_tilde < 0:
            raise ValueError(f"measured active output must be >= 0, got {self.p_tilde}")


@dataclass(frozen=True)
class CurtailmentResult:
    p_out: float
    delta: float


def nodal_voltages(m: GridMatrices, c: GridCase) -> np.ndarray:
    if len(c.p) != m.n:
        raise ValueError(f"dimension mismatch: case has {len(c.p)} nodes, network has {m.n}")
    return m.R @ c.p + m.X @ c.q + c.v0


def branch_flows(g: FeederGraph, p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lossless line flows ``(P, Q)``, indexed like ``g.lines`` (by child node).

    The flow into node ``j`` equals minus the total injection of ``j``'s
    subtree.
    """
    n = g.node_count
    if len(p) != n or len(q) != n:
        raise ValueError(f"dimension mismatch: expected {n} injections")
    P = -np.asarray(p, dtype=float).copy()
    Qf = -np.asarray(q, dtype=float).copy()
    children = g.children()
    order = []
    stack = [0]
    while stack:
        u = stack.pop()
        order.append(u)
        stack.extend(children[u])
    for u in reversed(order):
        if u == 0:
            continue
        for c in children[u]:
            P[u - 1] += P[c - 1]
            Qf[u - 1] += Qf[c - 1]
    return P, Qf


def reactive_capability(inv: InverterSpec) -> float:
    if inv.p_tilde > inv.s_bar:
        raise InfeasibleOperatingPoint(
            f"active output {inv.p_tilde} W exceeds rated apparent power {inv.s_bar} VA"
        )
    return math.sqrt(inv.s_bar**2 - inv.p_tilde**2)


def apply_var_priority(s_bar: float, q_cmd: float, p_avail: float) -> CurtailmentResult:
    """Keep the reactive command and curtail active power to stay on the circle."""
    if abs(q_cmd) > s_bar:
        raise InfeasibleOperatingPoint(f"reactive command {q_cmd} var exceeds rating {s_bar} VA")
    if p_avail < 0:
        raise ValueError(f"available active power must be >= 0, got {p_avail}")
    if p_avail * p_avail + q_cmd * q_cmd <= s_bar * s_bar:
        return CurtailmentResult(p_out=p_avail, delta=0.0)
    p_out = math.sqrt(max(s_bar * s_bar - q_cmd * q_cmd, 0.0))
    return CurtailmentResult(p_out=p_out, delta=p_avail - p_out)
