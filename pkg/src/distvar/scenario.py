"""Scenario documents: one JSON file describing a full case study.

Every quantity is converted to SI (W, var, VA, V, ohm) on load. A section
may declare kilo units through its ``unit`` key::

    {
      "name": "fig6_baseline",
      "feeder": {"substation": 0, "nodes": [1, 2],
                 "edges": [{"parent": 0, "child": 1, "r": 1.1, "x": 0.4}, ...]},
      "inverters": {"unit": "kVA", "s_bar": {"1": 5.0, "2": 5.0}},
      "loads": {"unit": "kW", "p": {"1": 3.6, "2": -4.0}},
      "voltage": {"unit": "V", "v0": 220.0, "mu": 220.0},
      "solver": {"tau": 1e-4, "tau_unit": "kvar", "window": 1000,
                 "max_iter": 50000, "alpha": null},
      "attack": {"attacker": 5, "start_iteration": 1500,
                 "offset_up": 3000.0, "offset_lo": 0.0, "tamper_internal": false},
      "output": {"trace": "trace.csv", "summary": "summary.json"}
    }

``inverters`` may also carry ``p_tilde`` (measured PV output, same unit as
``loads``); when absent it defaults to ``|p|``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .agents import AttackSpec
from .feeder import FeederError, FeederGraph, GridMatrices, build_grid_matrices, parse_feeder
from .gridmodel import InverterSpec, reactive_capability
from .optim import QpBounds, StopRule

POWER_UNITS = {"W": 1.0, "kW": 1e3}
APPARENT_UNITS = {"VA": 1.0, "kVA": 1e3}
REACTIVE_UNITS = {"var": 1.0, "kvar": 1e3}
VOLTAGE_UNITS = {"V": 1.0, "kV": 1e3}
KVAR_SCALE = REACTIVE_UNITS["kvar"]


class ScenarioError(ValueError):
    """Scenario document failed validation; message names the offending field."""


@dataclass(frozen=True)
class SolverSettings:
    tau: float = 0.1  # var
    window: int = 1000
    max_iter: int = 50_000
    alpha: float | None = None


@dataclass(frozen=True)
class OutputSettings:
    trace: str | None = None
    summary: str | None = None


@dataclass(frozen=True)
class SimulationConfig:
    feeder: FeederGraph
    s_bar: np.ndarray
    p: np.ndarray
    p_tilde: np.ndarray
    v0: float
    mu: np.ndarray
    solver: SolverSettings = SolverSettings()
    attack: AttackSpec | None = None
    output: OutputSettings = OutputSettings()
    name: str = "scenario"
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __eq__(self, other):
        if not isinstance(other, SimulationConfig):
            return NotImplemented
        return (
            self.feeder == other.feeder
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("s_bar", "p", "p_tilde", "mu"))
            and self.v0 == other.v0
            and self.solver == other.solver
            and self.attack == other.attack
            and self.output == other.output
            and self.name == other.name
        )

    @property
    def n(self) -> int:
        return self.feeder.node_count

    def matrices(self) -> GridMatrices:
        if "m" not in self._cache:
            self._cache["m"] = build_grid_matrices(self.feeder, step_override=self.solver.alpha)
        return self._cache["m"]

    def bounds(self) -> QpBounds:
        Q = np.array([reactive_capability(InverterSpec(s, pt)) for s, pt in zip(self.s_bar, self.p_tilde)])
        return QpBounds(Q)

    def stop_rule(self) -> StopRule:
        return StopRule(tau=self.solver.tau, window=self.solver.window, max_iter=self.solver.max_iter)

    def with_solver(self, **changes) -> SimulationConfig:
        return replace(self, solver=replace(self.solver, **changes), _cache={})

    def with_attack(self, attack: AttackSpec | None) -> SimulationConfig:
        return replace(self, attack=attack, _cache=dict(self._cache))


def _unit(section: Mapping[str, Any], table: dict[str, float], default: str, where: str, key: str = "unit") -> float:
    name = section.get(key, default)
    if name not in table:
        raise ScenarioError(f"{where}.{key}: unknown unit {name!r}, expected one of {sorted(table)}")
    return table[name]


def _per_node(value: Any, n: int, where: str) -> np.ndarray:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full(n, float(value))
    if isinstance(value, Mapping):
        keys = sorted(int(k) for k in value)
        if keys != list(range(1, n + 1)):
            raise ScenarioError(f"{where}: expected values for nodes 1..{n}, got {keys}")
        return np.array([float(value[str(i)] if str(i) in value else value[i]) for i in range(1, n + 1)])
    if isinstance(value, list):
        if len(value) != n:
            raise ScenarioError(f"{where}: expected {n} values, got {len(value)}")
        return np.array([float(v) for v in value])
    raise ScenarioError(f"{where}: expected a number, list or node map, got {type(value).__name__}")


def _section(doc: Mapping[str, Any], key: str, required: bool = True) -> Mapping[str, Any]:
    sec = doc.get(key)
    if sec is None:
        if required:
            raise ScenarioError(f"missing section {key!r}")
        return {}
    if not isinstance(sec, Mapping):
        raise ScenarioError(f"section {key!r} must be an object")
    return sec


def config_from_dict(doc: Mapping[str, Any]) -> SimulationConfig:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario must be a JSON object")
    try:
        feeder = parse_feeder(_section(doc, "feeder"))
    except FeederError as exc:
        raise ScenarioError(f"feeder: {exc}") from exc
    n = feeder.node_count

    try:
        inv = _section(doc, "inverters")
        loads = _section(doc, "loads")
        volt = _section(doc, "voltage")
        s_bar = _per_node(inv["s_bar"], n, "inverters.s_bar") * _unit(inv, APPARENT_UNITS, "VA", "inverters")
        p_scale = _unit(loads, POWER_UNITS, "W", "loads")
        p = _per_node(loads["p"], n, "loads.p") * p_scale
        if "p_tilde" in inv:
            p_tilde = _per_node(inv["p_tilde"], n, "inverters.p_tilde") * p_scale
        else:
            p_tilde = np.abs(p)
        v_scale = _unit(volt, VOLTAGE_UNITS, "V", "voltage")
        v0 = float(volt["v0"]) * v_scale
        mu = _per_node(volt.get("mu", volt["v0"]), n, "voltage.mu") * v_scale

        sol = _section(doc, "solver", required=False)
        tau = float(sol.get("tau", 1e-4)) * _unit(
            sol, REACTIVE_UNITS, "kvar", "solver", key="tau_unit")
        alpha = sol.get("alpha")
        solver = SolverSettings(
            tau=tau,
            window=int(sol.get("window", 1000)),
            max_iter=int(sol.get("max_iter", 50_000)),
            alpha=None if alpha is None else float(alpha),
        )

        attack = None
        if doc.get("attack") is not None:
            a = _section(doc, "attack")
            attack = AttackSpec(
                attacker=int(a["attacker"]),
                start_iteration=int(a["start_iteration"]),
                offset_up=float(a.get("offset_up", 0.0)),
                offset_lo=float(a.get("offset_lo", 0.0)),
                tamper_internal=bool(a.get("tamper_internal", False)),
            )
        out = _section(doc, "output", required=False)
        output = OutputSettings(trace=out.get("trace"), summary=out.get("summary"))
    except ScenarioError:
        raise
    except KeyError as exc:
        raise ScenarioError(f"missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc

    if not v0 > 0 or np.any(mu <= 0):
        raise ScenarioError("voltage: v0 and mu must be positive")
    if not np.array_equal(mu, np.full(n, v0)):
        raise ScenarioError("voltage.mu: the recast objective assumes mu equals v0 at every node")
    if np.any(s_bar <= 0):
        raise ScenarioError("inverters.s_bar: rated apparent power must be positive")
    if np.any(p_tilde < 0):
        raise ScenarioError("inverters.p_tilde: measured output must be nonnegative")
    bad = np.flatnonzero(p_tilde > s_bar)
    if len(bad):
        raise ScenarioError(f"inverters: node {int(bad[0]) + 1} active output exceeds its rating (infeasible operating point)")
    if solver.window < 1 or solver.max_iter < 0 or solver.tau < 0:
        raise ScenarioError("solver: need window >= 1, max_iter >= 0, tau >= 0")
    if solver.alpha is not None and not solver.alpha > 0:
        raise ScenarioError("solver.alpha must be positive")
    if attack is not None and not 1 <= attack.attacker <= n:
        raise ScenarioError(f"attack.attacker: unknown node {attack.attacker}")

    cfg = SimulationConfig(feeder=feeder, s_bar=s_bar, p=p, p_tilde=p_tilde, v0=v0, mu=mu,
                           solver=solver, attack=attack, output=output, name=str(doc.get("name", "scenario")))
    try:
        cfg.matrices()
    except ValueError as exc:
        raise ScenarioError(f"feeder: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> SimulationConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from exc
    return config_from_dict(doc)


def _node_map(values: np.ndarray) -> dict[str, float]:
    return {str(i + 1): float(v) for i, v in enumerate(values)}


def config_to_dict(cfg: SimulationConfig) -> dict[str, Any]:
    """Serialize in SI units; ``config_from_dict`` inverts this exactly."""
    doc: dict[str, Any] = {
        "name": cfg.name,
        "feeder": {
            "substation": 0,
            "nodes": list(range(1, cfg.n + 1)),
            "impedance_unit": "ohm",
            "edges": [{"parent": ln.parent, "child": ln.child, "r": ln.r, "x": ln.x} for ln in cfg.feeder.lines],
        },
        "inverters": {"unit": "VA", "s_bar": _node_map(cfg.s_bar), "p_tilde": _node_map(cfg.p_tilde)},
        "loads": {"unit": "W", "p": _node_map(cfg.p)},
        "voltage": {"unit": "V", "v0": cfg.v0, "mu": _node_map(cfg.mu)},
        "solver": {"tau": cfg.solver.tau, "tau_unit": "var", "window": cfg.solver.window,
                   "max_iter": cfg.solver.max_iter, "alpha": cfg.solver.alpha},
        "output": {"trace": cfg.output.trace, "summary": cfg.output.summary},
    }
    if cfg.attack is not None:
        a = cfg.attack
        doc["attack"] = {"attacker": a.attacker, "start_iteration": a.start_iteration, "offset_up": a.offset_up,
                         "offset_lo": a.offset_lo, "tamper_internal": a.tamper_internal}
    return doc


def dump_config(cfg: SimulationConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
