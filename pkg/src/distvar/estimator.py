"""scikit-learn style wrapper: active-power injections in, reactive setpoints out."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .agents import AttackSpec, advance, start_simulation
from .feeder import FeederGraph, build_grid_matrices
from .gridmodel import InverterSpec, reactive_capability
from .optim import QpBounds, StopRule, fista_solve, solve_centralized

SOLVERS = ("distributed", "fista", "centralized")


class VarController(TransformerMixin, BaseEstimator):
    """Optimal inverter VAR dispatch on a homogeneous radial feeder.

    Each row of ``X`` is one operating point: the active injection ``p``
    (W) of nodes ``1..N``. ``transform`` returns the reactive setpoints
    ``q`` (var) minimizing ``0.5 ||R p + X q||^2`` under ``|q| <= Q``.

    Parameters
    ----------
    feeder : FeederGraph
        Network topology and line impedances.
    s_bar : float or array-like of shape (N,)
        Inverter ratings in VA.
    solver : {"distributed", "fista", "centralized"}
        ``distributed`` runs the two-hop agent simulation, ``fista`` the
        equivalent central dual iteration, ``centralized`` projected
        gradient on the primal box QP.
    alpha : float, optional
        Dual step size; defaults to ``1 / L``.
    tau, window, max_iter
        Stop rule of the dual solvers (``tau`` in var).
    attack : AttackSpec, optional
        Only used by the ``distributed`` solver.
    """

    def __init__(self, feeder: FeederGraph | None = None, s_bar=5000.0, solver: str = "distributed",
                 alpha: float | None = None, tau: float = 0.1, window: int = 1000, max_iter: int = 50_000,
                 v0: float = 220.0, attack: AttackSpec | None = None):
        self.feeder = feeder
        self.s_bar = s_bar
        self.solver = solver
        self.alpha = alpha
        self.tau = tau
        self.window = window
        self.max_iter = max_iter
        self.v0 = v0
        self.attack = attack

    def _bounds(self, p: np.ndarray) -> QpBounds:
        s = np.broadcast_to(np.asarray(self.s_bar, dtype=float), p.shape)
        return QpBounds(np.array([reactive_capability(InverterSpec(si, abs(pi))) for si, pi in zip(s, p)]))

    def _solve(self, p: np.ndarray) -> tuple[np.ndarray, int, bool]:
        b = self._bounds(p)
        stop = StopRule(self.tau, self.window, self.max_iter)
        if self.solver == "centralized":
            return solve_centralized(self.matrices_, p, b), 0, True
        if self.solver == "fista":
            res = fista_solve(self.matrices_, p, b, stop)
            return res.q, res.iterations, res.converged
        st = start_simulation(self.matrices_, self.feeder, p, b, self.v0, attack=self.attack)
        trace = advance(st, stop)
        return trace.final.q if len(trace) else -self.matrices_.xi * p, len(trace), trace.stop_reason == "converged"

    def _validate(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, ensure_2d=False, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if reset:
            if self.feeder is None:
                raise ValueError("VarController needs a feeder")
            if self.solver not in SOLVERS:
                raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
            self.n_features_in_ = self.feeder.node_count
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the feeder has {self.n_features_in_} nodes")
        return X

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        self.matrices_ = build_grid_matrices(self.feeder, step_override=self.alpha)
        out = [self._solve(row) for row in X]
        self.q_ = np.array([o[0] for o in out])
        self.n_iter_ = np.array([o[1] for o in out])
        self.converged_ = np.array([o[2] for o in out])
        return self

    def transform(self, X):
        check_is_fitted(self, "matrices_")
        X = self._validate(X, reset=False)
        return np.array([self._solve(row)[0] for row in X])

    predict = transform

    def voltages(self, X, q=None):
        """Nodal voltages ``R p + X q + v0`` for injections ``X`` and setpoints ``q``."""
        check_is_fitted(self, "matrices_")
        X = self._validate(X, reset=False)
        q = self.transform(X) if q is None else np.atleast_2d(q)
        m = self.matrices_
        return X @ m.R.T + q @ m.X.T + self.v0

    def score(self, X, y=None):
        """Negative mean squared voltage deviation from ``v0`` (higher is better)."""
        v = self.voltages(X)
        return -float(np.mean((v - self.v0) ** 2))
