"""Centralized QP oracle and the FISTA dual solver.

Block convention: ``up`` is the multiplier of ``q <= Q`` and ``lo`` the
multiplier of ``-q <= Q``. The stacking matrices ``C = [I, -I]^T`` and
``D = [I, I]^T`` never appear explicitly.

Every product with ``Btilde`` goes through :func:`exact_matvec`, which
sums each row with ``math.fsum``. The sum is then independent of term
order and of zero terms, so a node summing only over its two-hop
support reproduces the dense product bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .feeder import GridMatrices

log = logging.getLogger(__name__)

KVAR = 1e3


@dataclass(frozen=True)
class DualPoint:
    lambda_up: np.ndarray
    lambda_lo: np.ndarray

    def __post_init__(self):
        if np.any(self.lambda_up < 0) or np.any(self.lambda_lo < 0):
            raise ValueError("dual point must be componentwise nonnegative")

    @classmethod
    def zeros(cls, n: int) -> DualPoint:
        return cls(np.zeros(n), np.zeros(n))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.lambda_up, self.lambda_lo])


@dataclass(frozen=True)
class ExtrapolationPoint:
    theta_up: np.ndarray
    theta_lo: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.theta_up)) and np.all(np.isfinite(self.theta_lo))):
            raise ValueError("extrapolation point has non-finite entries")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.theta_up, self.theta_lo])


@dataclass(frozen=True)
class QpBounds:
    Q: np.ndarray

    def __post_init__(self):
        if np.any(self.Q < 0):
            raise ValueError("capability bounds must be nonnegative")


@dataclass(frozen=True)
class KktReport:
    primal_violation: float
    stationarity_residual: float
    comp_slack_up: float
    comp_slack_lo: float

    def worst(self) -> float:
        return max(self.primal_violation, self.stationarity_residual, self.comp_slack_up, self.comp_slack_lo)


@dataclass(frozen=True)
class StopRule:
    """Stop once ``max_i |q_i(k) - q_i(k+1)| <= tau`` for ``window`` steps in a row.

    ``tau`` is in vars. The default is 1e-4 kvar.
    """

    tau: float = 1e-4 * KVAR
    window: int = 1000
    max_iter: int = 50_000

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


class FluctuationMonitor:
    """Streaming form of the q-fluctuation stop rule."""

    def __init__(self, tau: float, window: int):
        self.tau = tau
        self.window = window
        self._last: np.ndarray | None = None
        self._run = 0

    def reset(self) -> None:
        self._last = None
        self._run = 0

    def update(self, q: np.ndarray) -> bool:
        if self._last is not None and np.max(np.abs(q - self._last), initial=0.0) <= self.tau:
            self._run += 1
        else:
            self._run = 0
        self._last = q
        return self._run >= self.window


def _check_dims(*arrays: np.ndarray) -> int:
    n = len(arrays[0])
    for a in arrays[1:]:
        if len(a) != n:
            raise ValueError(f"dimension mismatch: {len(a)} != {n}")
    return n


def exact_matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise correctly rounded ``M @ v``."""
    if M.shape[1] != len(v):
        raise ValueError(f"dimension mismatch: {M.shape} @ {len(v)}")
    return np.array([math.fsum(row * v) for row in M])


def primal_value(m: GridMatrices, p: np.ndarray, q: np.ndarray) -> float:
    _check_dims(m.X, p, q)
    r = m.R @ p + m.X @ q
    return 0.5 * float(r @ r)


def dual_value(m: GridMatrices, d: DualPoint, p: np.ndarray, b: QpBounds) -> float:
    """Negated Lagrange dual ``G(lam)``, the function minimized over ``lam >= 0``.

    The linear term is ``lam^T D Q``: substituting the stationary ``q``
    into the Lagrangian removes ``q`` entirely, so the printed
    ``lam^T C q`` form cannot be meant literally.
    """
    _check_dims(m.X, d.lambda_up, d.lambda_lo, p, b.Q)
    diff = d.lambda_up - d.lambda_lo
    quad = float(diff @ exact_matvec(m.Btilde, diff))
    return 0.5 * quad + m.xi * float(diff @ p) + float((d.lambda_up + d.lambda_lo) @ b.Q)


def dual_gradient(
    m: GridMatrices, t: ExtrapolationPoint, p: np.ndarray, b: QpBounds
) -> tuple[np.ndarray, np.ndarray]:
    _check_dims(m.X, t.theta_up, t.theta_lo, p, b.Q)
    s = exact_matvec(m.Btilde, t.theta_up - t.theta_lo)
    xi_p = m.xi * p
    return s + xi_p + b.Q, -s - xi_p + b.Q


def prox_project(h: np.ndarray) -> DualPoint:
    """Projection of the stacked ``[up; lo]`` vector onto the nonnegative orthant."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or len(h) % 2:
        raise ValueError("expected a stacked vector of even length")
    n = len(h) // 2
    lam = np.maximum(h, 0.0)
    return DualPoint(lam[:n], lam[n:])


def momentum_next(omega: float) -> float:
    if omega < 1:
        raise ValueError(f"momentum must be >= 1, got {omega}")
    return (1.0 + math.sqrt(1.0 + 4.0 * omega * omega)) / 2.0


def extrapolate(lam_k: DualPoint, lam_prev: DualPoint, omega_k: float, omega_next: float) -> ExtrapolationPoint:
    c = (omega_k - 1.0) / omega_next
    return ExtrapolationPoint(
        lam_k.lambda_up + c * (lam_k.lambda_up - lam_prev.lambda_up),
        lam_k.lambda_lo + c * (lam_k.lambda_lo - lam_prev.lambda_lo),
    )


def recover_q(m: GridMatrices, d: DualPoint, p: np.ndarray) -> np.ndarray:
    """Stationary primal point ``q = -Btilde (lam_up - lam_lo) - xi p``."""
    _check_dims(m.X, d.lambda_up, d.lambda_lo, p)
    return -exact_matvec(m.Btilde, d.lambda_up - d.lambda_lo) - m.xi * p


def default_step_size(m: GridMatrices) -> float:
    """``1 / L`` for the dual gradient; the stacked Hessian has top eigenvalue ``2 lambda_max(Btilde)``."""
    return 1.0 / (2.0 * float(np.linalg.eigvalsh(m.Btilde)[-1]))


@dataclass
class FistaHistory:
    lambda_up: list[np.ndarray] = field(default_factory=list)
    lambda_lo: list[np.ndarray] = field(default_factory=list)
    theta_up: list[np.ndarray] = field(default_factory=list)
    theta_lo: list[np.ndarray] = field(default_factory=list)
    omega: list[float] = field(default_factory=list)
    q: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.q)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v) for k, v in vars(self).items()}


@dataclass
class FistaResult:
    dual: DualPoint
    q: np.ndarray
    iterations: int
    converged: bool
    history: FistaHistory | None


def fista_solve(
    m: GridMatrices,
    p: np.ndarray,
    b: QpBounds,
    stop: StopRule = StopRule(),
    record_history: bool = False,
) -> FistaResult:
    """Projected FISTA on the dual, started from ``lam = theta = 0``, ``omega = 1``.

    History entry ``k - 1`` holds the state after iteration ``k``:
    ``lam(k)``, ``theta(k+1)``, ``omega(k+1)`` and ``q(k)``.
    """
    n = _check_dims(m.X, p, b.Q)
    p = np.asarray(p, dtype=float)
    Q = b.Q
    xi_p = m.xi * p
    alpha = m.alpha
    lu, ll = np.zeros(n), np.zeros(n)
    tu, tl = np.zeros(n), np.zeros(n)
    omega = 1.0
    q = -xi_p.copy()
    hist = FistaHistory() if record_history else None
    monitor = FluctuationMonitor(stop.tau, stop.window)
    converged = False
    k = 0
    while k < stop.max_iter:
        k += 1
        s = exact_matvec(m.Btilde, tu - tl)
        nu = np.maximum(tu - alpha * (s + xi_p + Q), 0.0)
        nl = np.maximum(tl - alpha * (-s - xi_p + Q), 0.0)
        omega_next = momentum_next(omega)
        c = (omega - 1.0) / omega_next
        tu = nu + c * (nu - lu)
        tl = nl + c * (nl - ll)
        lu, ll, omega = nu, nl, omega_next
        q = -exact_matvec(m.Btilde, lu - ll) - xi_p
        if hist is not None:
            hist.lambda_up.append(lu)
            hist.lambda_lo.append(ll)
            hist.theta_up.append(tu)
            hist.theta_lo.append(tl)
            hist.omega.append(omega)
            hist.q.append(q)
        if monitor.update(q):
            converged = True
            break
    if not converged and stop.max_iter > 0:
        log.warning("fista_solve hit the iteration cap (%d) without converging", stop.max_iter)
    return FistaResult(DualPoint(lu, ll), q, k, converged, hist)


def solve_centralized(
    m: GridMatrices,
    p: np.ndarray,
    b: QpBounds,
    tol: float = 1e-6,
    max_iter: int = 5_000_000,
) -> np.ndarray:
    """Minimize ``0.5 ||R p + X q||^2`` over the box ``|q| <= Q`` by projected gradient.

    Stops when the gradient mapping ``(q - clip(q - t grad)) / t`` has
    infinity norm at most ``tol`` (units of ``grad``, i.e. ohm^2 var).
    """
    _check_dims(m.X, p, b.Q)
    H = m.X @ m.X
    c = m.X @ (m.R @ np.asarray(p, dtype=float))
    t = 1.0 / float(np.linalg.eigvalsh(H)[-1])
    lo, hi = -b.Q, b.Q
    q = np.zeros(len(p))
    for _ in range(max_iter):
        q_next = np.clip(q - t * (H @ q + c), lo, hi)
        if np.max(np.abs(q - q_next), initial=0.0) <= tol * t:
            return q_next
        q = q_next
    raise RuntimeError("projected gradient did not reach tolerance")  # pragma: no cover


def kkt_residuals(m: GridMatrices, q: np.ndarray, d: DualPoint, p: np.ndarray, b: QpBounds) -> KktReport:
    _check_dims(m.X, q, d.lambda_up, d.lambda_lo, p, b.Q)
    Q = b.Q
    grad = m.X @ (m.R @ p + m.X @ q) + d.lambda_up - d.lambda_lo
    return KktReport(
        primal_violation=float(np.max(np.maximum(np.abs(q) - Q, 0.0), initial=0.0)),
        stationarity_residual=float(np.linalg.norm(grad)),
        comp_slack_up=float(np.max(np.abs(d.lambda_up * (q - Q)), initial=0.0)),
        comp_slack_lo=float(np.max(np.abs(d.lambda_lo * (-q - Q)), initial=0.0)),
    )
