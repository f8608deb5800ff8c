"""Synchronous multi-agent simulation of the distributed dual solver.

Round ``k`` for every node ``i``:

1. read the messages sent in round ``k - 1`` by its two-hop neighbours,
   which carry ``theta(k)`` and ``lambda(k - 1)``;
2. update ``lambda_i(k)``, ``omega_i(k + 1)`` and ``theta_i(k + 1)``;
3. broadcast the new state (round-``k`` message);
4. recover ``q_i(k)`` from the ``lambda(k)`` values it has just received.

An attacker adds constant offsets to the ``theta`` and ``lambda`` values it
broadcasts from round ``start_iteration`` on. Honest nodes never see
anything but its messages, so their locally recovered ``q_i`` is what
their inverters actuate.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from operator import attrgetter
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .feeder import FeederGraph, GridMatrices, two_hop_neighbors
from .gridmodel import GridCase, nodal_voltages
from .optim import FluctuationMonitor, QpBounds, StopRule, momentum_next

if TYPE_CHECKING:
    from .scenario import SimulationConfig

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """A node did not receive the messages a synchronous round requires."""


@dataclass(slots=True)
class AgentState:
    """One node's local state. Treated as a value: updates build a new instance."""

    node: int
    p: float
    Q: float
    btilde_row: Mapping[int, float]
    lambda_up: float = 0.0
    lambda_lo: float = 0.0
    lambda_up_prev: float = 0.0
    lambda_lo_prev: float = 0.0
    theta_up: float = 0.0
    theta_lo: float = 0.0
    omega: float = 1.0
    q: float = 0.0

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(j for j in self.btilde_row if j != self.node)


@dataclass(slots=True)
class Message:
    sender: int
    iteration: int
    theta_up: float
    theta_lo: float
    lambda_up: float
    lambda_lo: float


@dataclass(frozen=True)
class AttackSpec:
    attacker: int
    start_iteration: int
    offset_up: float
    offset_lo: float = 0.0
    tamper_internal: bool = False

    def __post_init__(self):
        if self.start_iteration < 1:
            raise ValueError(f"start_iteration must be >= 1, got {self.start_iteration}")

    def active(self, node: int, k: int) -> bool:
        return node == self.attacker and k >= self.start_iteration


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    q: np.ndarray
    v: np.ndarray
    lambda_up: np.ndarray
    lambda_lo: np.ndarray
    theta_up: np.ndarray
    theta_lo: np.ndarray
    omega: np.ndarray


TRACE_FIELDS = ("q", "v", "lambda_up", "lambda_lo", "theta_up", "theta_lo", "omega")


@dataclass
class SimulationTrace:
    records: list[TraceRecord] = field(default_factory=list)
    converged_at: int | None = None
    stop_reason: str = "running"
    # first convergence before the attack started, when there is one
    pre_attack_converged_at: int | None = None
    attack: AttackSpec | None = None

    def __len__(self) -> int:
        return len(self.records)

    def array(self, name: str) -> np.ndarray:
        if name not in TRACE_FIELDS:
            raise KeyError(name)
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]


def init_agents(m: GridMatrices, g: FeederGraph, p: np.ndarray, b: QpBounds) -> list[AgentState]:
    n = g.node_count
    if len(p) != n or len(b.Q) != n or m.n != n:
        raise ValueError("dimension mismatch between network, injections and bounds")
    agents = []
    for i in range(1, n + 1):
        support = sorted(two_hop_neighbors(g, i) | {i})
        row = {j: float(m.Btilde[i - 1, j - 1]) for j in support}
        pi = float(p[i - 1])
        agents.append(AgentState(node=i, p=pi, Q=float(b.Q[i - 1]), btilde_row=row, q=-(m.xi * pi)))
    return agents


def broadcast(a: AgentState, atk: AttackSpec | None, k: int) -> Message:
    """Round-``k`` message: ``theta(k + 1)`` and ``lambda(k)`` of node ``a``."""
    tu, tl, lu, ll = a.theta_up, a.theta_lo, a.lambda_up, a.lambda_lo
    if atk is not None and atk.active(a.node, k):
        tu += atk.offset_up
        tl += atk.offset_lo
        lu += atk.offset_up
        ll += atk.offset_lo
    return Message(a.node, k, tu, tl, lu, ll)


def _missing(a: AgentState, inbox: Mapping[int, Message]) -> ProtocolError:
    j = next(j for j in a.btilde_row if j != a.node and j not in inbox)
    return ProtocolError(f"node {a.node} is missing the message from neighbour {j}")


# fsum is exact, so term order cannot change the result: agents agree bit for bit
# with the central kernel regardless of how their support is enumerated
def _theta_sum(a: AgentState, inbox: Mapping[int, Message], own: Message | AgentState) -> float:
    node = a.node
    try:
        return math.fsum([c * ((m := own if j == node else inbox[j]).theta_up - m.theta_lo)
                          for j, c in a.btilde_row.items()])
    except KeyError:
        raise _missing(a, inbox) from None


def _lambda_sum(a: AgentState, inbox: Mapping[int, Message], own: Message | AgentState) -> float:
    node = a.node
    try:
        return math.fsum([c * ((m := own if j == node else inbox[j]).lambda_up - m.lambda_lo)
                          for j, c in a.btilde_row.items()])
    except KeyError:
        raise _missing(a, inbox) from None


def local_update(
    a: AgentState,
    inbox: Mapping[int, Message],
    alpha: float,
    xi: float,
    own: Message | None = None,
) -> AgentState:
    """One projected FISTA step for node ``a``.

    ``inbox`` must hold one message per two-hop neighbour; extra messages
    are ignored. ``own`` replaces the node's true ``theta`` in the self
    term (used when an attacker also feeds itself the tampered values).
    """
    s = _theta_sum(a, inbox, a if own is None else own)
    xi_p = xi * a.p
    nu = a.theta_up - alpha * (s + xi_p + a.Q)
    nl = a.theta_lo - alpha * (-s - xi_p + a.Q)
    nu = nu if nu > 0.0 else 0.0
    nl = nl if nl > 0.0 else 0.0
    omega_next = momentum_next(a.omega)
    c = (a.omega - 1.0) / omega_next
    return AgentState(a.node, a.p, a.Q, a.btilde_row, nu, nl, a.lambda_up, a.lambda_lo,
                      nu + c * (nu - a.lambda_up), nl + c * (nl - a.lambda_lo), omega_next, a.q)



def local_reactive_power(a: AgentState, inbox: Mapping[int, Message], xi: float, own: Message | None = None) -> float:
    """``q_i`` as node ``i`` computes it from the lambdas it received."""
    return -_lambda_sum(a, inbox, a if own is None else own) - xi * a.p


@dataclass
class SimState:
    m: GridMatrices
    agents: list[AgentState]
    outbox: dict[int, Message]
    v0: float
    mu: np.ndarray
    attack: AttackSpec | None = None
    k: int = 0
    trace: SimulationTrace = field(default_factory=SimulationTrace)

    @cached_property
    def p(self) -> np.ndarray:
        return np.array([a.p for a in self.agents])

    def snapshot(self) -> SimState:
        return copy.deepcopy(self)


def start_simulation(
    m: GridMatrices,
    g: FeederGraph,
    p: np.ndarray,
    b: QpBounds,
    v0: float,
    mu: np.ndarray | None = None,
    attack: AttackSpec | None = None,
) -> SimState:
    agents = init_agents(m, g, np.asarray(p, dtype=float), b)
    if attack is not None and not 1 <= attack.attacker <= g.node_count:
        raise ValueError(f"attacker {attack.attacker} is not a node of the feeder")
    outbox = {a.node: broadcast(a, attack, 0) for a in agents}
    mu = np.full(g.node_count, float(v0)) if mu is None else np.asarray(mu, dtype=float)
    return SimState(m=m, agents=agents, outbox=outbox, v0=float(v0), mu=mu, attack=attack,
                    trace=SimulationTrace(attack=attack))


def _self_feed(st: SimState) -> int | None:
    """Node that consumes its own broadcast instead of its true state, if any."""
    atk = st.attack
    return atk.attacker if atk is not None and atk.tamper_internal else None


_RECORD = attrgetter("q", "lambda_up", "lambda_lo", "theta_up", "theta_lo", "omega")


def step_round(st: SimState) -> SimState:
    """Advance every agent by one synchronous round and append a trace record."""
    st.k += 1
    k = st.k
    alpha, xi = st.m.alpha, st.m.xi
    prev = st.outbox
    fed = _self_feed(st)
    updated = [local_update(a, prev, alpha, xi, prev[fed] if a.node == fed else None) for a in st.agents]
    outbox = {a.node: broadcast(a, st.attack, k) for a in updated}
    # the updated states are fresh objects owned by this round, so q is set in place
    for a in updated:
        a.q = local_reactive_power(a, outbox, xi, outbox[fed] if a.node == fed else None)
    st.agents = updated
    st.outbox = outbox

    cols = np.array([_RECORD(a) for a in st.agents]).T
    q = cols[0]
    v = nodal_voltages(st.m, GridCase(st.p, q, st.v0, st.mu))
    st.trace.records.append(TraceRecord(k, q, v, *cols[1:]))
    return st


def converged(trace: SimulationTrace | np.ndarray, tau: float, window: int) -> int | None:
    """First 1-based iteration at which ``|q(k) - q(k+1)| <= tau`` has held ``window`` times running."""
    if window < 1:
        raise ValueError("window must be >= 1")
    qs = trace.array("q") if isinstance(trace, SimulationTrace) else np.asarray(trace)
    run = 0
    for k in range(1, len(qs)):
        if np.max(np.abs(qs[k] - qs[k - 1]), initial=0.0) <= tau:
            run += 1
            if run >= window:
                return k + 1
        else:
            run = 0
    return None


def advance(st: SimState, stop: StopRule, monitor: FluctuationMonitor | None = None) -> SimulationTrace:
    """Run rounds until the stop rule fires after the attack start, or the cap.

    When an attack is configured the fluctuation window restarts at the
    attack round, so only post-attack rounds count towards convergence.
    """
    atk = st.attack
    monitor = monitor or FluctuationMonitor(stop.tau, stop.window)
    trace = st.trace
    while st.k < stop.max_iter:
        step_round(st)
        if atk is not None and st.k == atk.start_iteration:
            monitor.reset()
        if monitor.update(trace.records[-1].q):
            if atk is None or st.k >= atk.start_iteration:
                trace.converged_at = st.k
                trace.stop_reason = "converged"
                return trace
            if trace.pre_attack_converged_at is None:
                trace.pre_attack_converged_at = st.k
    trace.stop_reason = "iteration_cap"
    log.info("simulation stopped at the iteration cap (%d)", stop.max_iter)
    return trace


def run_simulation(cfg: SimulationConfig) -> SimulationTrace:
    m = cfg.matrices()
    st = start_simulation(m, cfg.feeder, cfg.p, cfg.bounds(), cfg.v0, cfg.mu, cfg.attack)
    return advance(st, cfg.stop_rule())
