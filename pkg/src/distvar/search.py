"""Find the constant broadcast offset that steers an attacker's own q."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .agents import AttackSpec, SimState, advance, start_simulation, step_round
from .scenario import SimulationConfig

log = logging.getLogger(__name__)

DEFAULT_START = 1500
# offset magnitudes tried, in units of lambda, before bisection
SCAN = tuple(float(s * 10.0**e) for e in range(-1, 9) for s in (1.0, 2.0, 5.0))


class OffsetSearchError(RuntimeError):
    def __init__(self, msg: str, best_offset: float, best_q: float):
        super().__init__(msg)
        self.best_offset = best_offset
        self.best_q = best_q


class _Hit(Exception):
    def __init__(self, offset: float):
        self.offset = offset


@dataclass(frozen=True)
class OffsetSearchResult:
    node: int
    target_q: float
    offset: float
    achieved_q: float
    converged: bool
    evaluations: int


class _Evaluator:
    def __init__(self, cfg: SimulationConfig, node: int, start: int):
        self.cfg = cfg
        self.node = node
        self.start = start
        m = cfg.matrices()
        st = start_simulation(m, cfg.feeder, cfg.p, cfg.bounds(), cfg.v0, cfg.mu, None)
        while st.k < start - 1:
            step_round(st)
        self._pre = st
        self.calls = 0
        self.seen: dict[float, tuple[float, bool]] = {}

    def run(self, offset: float) -> SimState:
        st = self._pre.snapshot()
        st.attack = AttackSpec(self.node, self.start, offset_up=offset, offset_lo=0.0)
        st.trace.attack = st.attack
        advance(st, self.cfg.stop_rule())
        return st

    def q_after(self, offset: float) -> float:
        if offset not in self.seen:
            self.calls += 1
            st = self.run(offset)
            self.seen[offset] = (float(st.trace.final.q[self.node - 1]), st.trace.stop_reason == "converged")
        return self.seen[offset][0]


def search_attack_offset(
    cfg: SimulationConfig,
    node: int,
    target_q: float = 0.0,
    q_tol: float = 1.0,
    start_iteration: int | None = None,
) -> OffsetSearchResult:
    """Scan then bisect the ``theta_up`` offset so the attacker's converged q hits ``target_q``.

    The lower-block offset stays zero; an equal offset on both blocks
    cancels in every update. ``q_tol`` is in vars.
    """
    if not 1 <= node <= cfg.n:
        raise ValueError(f"unknown node {node}")
    if start_iteration is None:
        start_iteration = cfg.attack.start_iteration if cfg.attack is not None else DEFAULT_START
    ev = _Evaluator(cfg, node, start_iteration)

    def f(a: float) -> float:
        return ev.q_after(a) - target_q

    def result(a: float) -> OffsetSearchResult:
        q, ok = ev.seen[a]
        return OffsetSearchResult(node, target_q, a, q, ok, ev.calls)

    f0 = f(0.0)
    if abs(f0) <= q_tol:
        return result(0.0)

    bracket = None
    prev = 0.0
    for mag in SCAN:
        for a in (mag, -mag):
            if np.sign(f(a)) != np.sign(f0):
                bracket = (float(np.copysign(prev, a)), a)
                break
        if bracket:
            break
        prev = mag
    if bracket is None:
        best = min(ev.seen, key=lambda a: abs(ev.seen[a][0] - target_q))
        raise OffsetSearchError(
            f"target q={target_q} var at node {node} not reachable for |offset| <= {SCAN[-1]:g}",
            best, ev.seen[best][0])

    def g(a: float) -> float:
        r = f(a)
        if abs(r) <= q_tol:
            raise _Hit(a)
        return r

    lo, hi = sorted(bracket)
    try:
        a_star = brentq(g, lo, hi, xtol=1e-9, rtol=1e-12, maxiter=200)
    except _Hit as hit:
        a_star = hit.offset
    if abs(f(a_star)) > q_tol:
        log.warning("root search ended %.3g var from the target", f(a_star))
    return result(a_star)
