"""Radial feeder topology and the LinDistFlow network matrices.

Edges are indexed by their child node, so row ``i - 1`` of the reduced
incidence matrix belongs to the line feeding node ``i``. With the
``+1`` parent / ``-1`` child convention, ``F = (-A)^-1`` is the 0/1 path
matrix: ``F[i, e] = 1`` iff line ``e`` lies between the substation and
node ``i``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

SUBSTATION = 0
HOMOGENEITY_RTOL = 1e-9


class FeederError(ValueError):
    """Invalid feeder description."""


class CycleError(FeederError):
    pass


class DisconnectedNodeError(FeederError):
    pass


class ImpedanceError(FeederError):
    pass


class DuplicateEdgeError(FeederError):
    pass


class UnknownNodeError(FeederError, KeyError):
    pass


class HomogeneityError(ValueError):
    """X^-1 R is not a multiple of the identity."""


@dataclass(frozen=True)
class Line:
    parent: int
    child: int
    r: float
    x: float


@dataclass(frozen=True)
class FeederGraph:
    """A validated radial feeder rooted at node 0.

    ``lines[i - 1]`` is the unique line whose child is node ``i``.
    """

    node_count: int
    lines: tuple[Line, ...]
    substation_id: int = SUBSTATION

    @property
    def parents(self) -> np.ndarray:
        return np.array([ln.parent for ln in self.lines], dtype=int)

    @property
    def r(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines], dtype=float)

    @property
    def x(self) -> np.ndarray:
        return np.array([ln.x for ln in self.lines], dtype=float)

    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n: [] for n in range(self.node_count + 1)}
        for ln in self.lines:
            out[ln.parent].append(ln.child)
        return out

    def adjacency(self) -> dict[int, set[int]]:
        adj: dict[int, set[int]] = {n: set() for n in range(self.node_count + 1)}
        for ln in self.lines:
            adj[ln.parent].add(ln.child)
            adj[ln.child].add(ln.parent)
        return adj


@dataclass(frozen=True)
class GridMatrices:
    R: np.ndarray
    X: np.ndarray
    B: np.ndarray
    Btilde: np.ndarray
    xi: float | None
    alpha: float
    A_reduced: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]


def make_feeder(
    edges: Sequence[tuple[int, int, float, float]],
    node_count: int | None = None,
    substation_id: int = SUBSTATION,
) -> FeederGraph:
    """Validate ``(parent, child, r, x)`` tuples and return a FeederGraph.

    Node ids must be ``0..N``; edge direction is taken from a traversal
    from the substation, so ``(child, parent)`` order is also accepted.
    """
    if substation_id != SUBSTATION:
        raise FeederError(f"substation must be node 0, got {substation_id}")
    if node_count is None:
        ids = {int(a) for e in edges for a in e[:2]}
        node_count = max(ids) if ids else 0
    if node_count < 1:
        raise FeederError("feeder needs at least one non-substation node")

    seen: set[tuple[int, int]] = set()
    adj: dict[int, list[tuple[int, float, float]]] = {n: [] for n in range(node_count + 1)}
    for e in edges:
        a, b, r, x = int(e[0]), int(e[1]), float(e[2]), float(e[3])
        for n in (a, b):
            if n not in adj:
                raise UnknownNodeError(f"edge ({a}, {b}) references unknown node {n}")
        if a == b:
            raise CycleError(f"self-loop at node {a}")
        if (a, b) in seen:
            raise DuplicateEdgeError(f"edge ({a}, {b}) listed twice")
        seen.add((a, b))
        if not (r > 0 and x > 0 and np.isfinite(r) and np.isfinite(x)):
            raise ImpedanceError(f"edge ({a}, {b}) needs r > 0 and x > 0, got r={r}, x={x}")
        adj[a].append((b, r, x))
        adj[b].append((a, r, x))

    parent_line: dict[int, Line] = {}
    visited = {SUBSTATION}
    queue = deque([SUBSTATION])
    while queue:
        u = queue.popleft()
        for v, r, x in adj[u]:
            if v in visited:
                if parent_line.get(u) is None or parent_line[u].parent != v:
                    raise CycleError(f"cycle through edge ({u}, {v})")
                continue
            visited.add(v)
            parent_line[v] = Line(u, v, r, x)
            queue.append(v)

    missing = sorted(set(range(1, node_count + 1)) - visited)
    if missing:
        raise DisconnectedNodeError(f"nodes not reachable from substation: {missing}")
    if len(seen) != node_count:
        # reachable and acyclic already imply N edges; kept as a guard
        raise CycleError(f"expected {node_count} edges for a tree, got {len(seen)}")

    lines = tuple(parent_line[i] for i in range(1, node_count + 1))
    return FeederGraph(node_count=node_count, lines=lines)


def parse_feeder(document: Mapping[str, Any]) -> FeederGraph:
    """Build a FeederGraph from the ``feeder`` section of a scenario.

    Expected keys: ``substation`` (must be 0), ``nodes`` (ids ``1..N``),
    ``edges`` as a list of ``{"parent", "child", "r", "x"}`` objects and an
    optional ``impedance_unit`` (``"ohm"`` or ``"kohm"``).
    """
    try:
        substation = int(document.get("substation", SUBSTATION))
        nodes = [int(n) for n in document["nodes"]]
        raw_edges = document["edges"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError(f"malformed feeder section: {exc!r}") from exc
    scale = {"ohm": 1.0, "kohm": 1e3}.get(document.get("impedance_unit", "ohm"))
    if scale is None:
        raise FeederError(f"unknown impedance_unit {document.get('impedance_unit')!r}")
    if substation != SUBSTATION:
        raise FeederError(f"substation must be node 0, got {substation}")
    if sorted(nodes) != list(range(1, len(nodes) + 1)):
        raise FeederError(f"nodes must be exactly 1..N, got {nodes}")

    edges = []
    for i, e in enumerate(raw_edges):
        try:
            edges.append((int(e["parent"]), int(e["child"]), float(e["r"]) * scale, float(e["x"]) * scale))
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"edge #{i}: {exc!r}") from exc
    return make_feeder(edges, node_count=len(nodes))


def reduced_incidence(g: FeederGraph) -> np.ndarray:
    n = g.node_count
    A = np.zeros((n, n))
    for ln in g.lines:
        A[ln.child - 1, ln.child - 1] = -1.0
        if ln.parent != SUBSTATION:
            A[ln.child - 1, ln.parent - 1] = 1.0
    return A


def _path_matrix(A: np.ndarray) -> np.ndarray:
    F = np.linalg.solve(-A, np.eye(A.shape[0]))
    # entries are integers for a tree; remove solver round-off
    F_int = np.rint(F)
    assert np.allclose(F, F_int, atol=1e-9), "reduced incidence is singular"
    return F_int


def build_grid_matrices(
    g: FeederGraph,
    step_override: float | None = None,
    homogeneous: bool = True,
) -> GridMatrices:
    """Return R, X, B, B~ and the coupling scalars for ``g``.

    ``B`` uses the closed-form tree inverse ``0.5 * A^T diag(1/x) A``,
    which equals ``X^-1`` and keeps entries outside the one-hop pattern
    exactly zero. ``Btilde`` inherits exact zeros outside two hops.
    With ``homogeneous=False`` the ratio ``xi`` is left as ``None``.
    """
    A = reduced_incidence(g)
    F = _path_matrix(A)
    R = 2.0 * F @ np.diag(g.r) @ F.T
    X = 2.0 * F @ np.diag(g.x) @ F.T
    B = 0.5 * A.T @ np.diag(1.0 / g.x) @ A
    Btilde = B @ B
    m = GridMatrices(R=R, X=X, B=B, Btilde=Btilde, xi=None, alpha=np.nan, A_reduced=A)
    xi = homogeneity_ratio(m) if homogeneous else None

    from .optim import default_step_size

    if step_override is not None:
        if not step_override > 0:
            raise ValueError(f"step size must be positive, got {step_override}")
        alpha = float(step_override)
    else:
        alpha = default_step_size(m)
    return replace(m, xi=xi, alpha=alpha)


def homogeneity_ratio(m: GridMatrices) -> float:
    """Scalar ``xi`` with ``X^-1 R = xi I``; raises HomogeneityError otherwise."""
    M = m.B @ m.R
    xi = float(np.mean(np.diag(M)))
    dev = np.max(np.abs(M - xi * np.eye(M.shape[0])))
    if dev > HOMOGENEITY_RTOL * abs(xi):
        raise HomogeneityError(f"network is not homogeneous: max |X^-1 R - xi I| = {dev:.3e} (xi={xi:.6g})")
    return xi


def two_hop_neighbors(g: FeederGraph, i: int) -> set[int]:
    """Non-substation nodes within two hops of ``i`` (paths may pass node 0)."""
    if not 1 <= i <= g.node_count:
        raise UnknownNodeError(f"unknown node {i}")
    adj = g.adjacency()
    one = adj[i]
    two = set().union(*(adj[j] for j in one)) if one else set()
    return (one | two) - {i, SUBSTATION}
