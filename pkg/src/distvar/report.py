"""Trace CSV files and run summaries."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

import numpy as np

from .agents import SimulationTrace, TraceRecord
from .gridmodel import InfeasibleOperatingPoint, apply_var_priority
from .optim import DualPoint, kkt_residuals
from .scenario import SimulationConfig

TRACE_COLUMNS = ("iteration", "node", "q_var", "v_volt", "lambda_up", "lambda_lo", "theta_up", "theta_lo", "omega")
_FIELD_OF = dict(zip(TRACE_COLUMNS[2:], ("q", "v", "lambda_up", "lambda_lo", "theta_up", "theta_lo", "omega")))


class TraceFormatError(ValueError):
    pass


def write_trace(trace: SimulationTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in trace.records:
            cols = [getattr(rec, f) for f in _FIELD_OF.values()]
            for i in range(len(rec.q)):
                w.writerow([rec.iteration, i + 1, *(repr(float(c[i])) for c in cols)])


def read_trace(path: str | Path) -> SimulationTrace:
    """Parse a trace CSV back into records; raises TraceFormatError on damage."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise TraceFormatError(f"{path}: {exc.strerror}") from exc
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise TraceFormatError(f"{path}: header must be {','.join(TRACE_COLUMNS)}")
    body = rows[1:]
    if not body:
        return SimulationTrace(stop_reason="unknown")
    try:
        data = np.array([[float(x) for x in r] for r in body])
    except ValueError as exc:
        raise TraceFormatError(f"{path}: non-numeric entry ({exc})") from exc
    if data.shape[1] != len(TRACE_COLUMNS):
        raise TraceFormatError(f"{path}: ragged rows")
    n = int(data[:, 1].max())
    if len(data) % n:
        raise TraceFormatError(f"{path}: truncated trace ({len(data)} rows is not a multiple of {n} nodes)")
    data = data.reshape(-1, n, len(TRACE_COLUMNS))
    iters = data[:, 0, 0]
    if not (np.all(data[:, :, 0] == iters[:, None]) and np.array_equal(data[0, :, 1], np.arange(1, n + 1))
            and np.all(data[:, :, 1] == data[0, :, 1]) and np.array_equal(iters, np.arange(1, len(iters) + 1))):
        raise TraceFormatError(f"{path}: rows out of order or iterations missing")
    trace = SimulationTrace(stop_reason="unknown")
    for blk in data:
        fields = {f: blk[:, 2 + j].copy() for j, f in enumerate(_FIELD_OF.values())}
        trace.records.append(TraceRecord(iteration=int(blk[0, 0]), **fields))
    return trace


def _settled_at(series: np.ndarray, tau: float, window: int, first: int = 1) -> int | None:
    run = 0
    for k in range(1, len(series)):
        if abs(series[k] - series[k - 1]) <= tau:
            run += 1
            if run >= window:
                return first + k
        else:
            run = 0
    return None


def summarize(trace: SimulationTrace, cfg: SimulationConfig | None = None) -> dict[str, Any]:
    """Plot-ready digest of a trace.

    Without ``cfg`` only trace-intrinsic values are reported. With it the
    summary adds voltage excursions from ``mu``, curtailment under
    reactive-power priority, KKT residuals and attack metadata.
    """
    out: dict[str, Any] = {"iterations": len(trace), "converged_at": trace.converged_at,
                           "stop_reason": trace.stop_reason}
    tau = cfg.solver.tau if cfg is not None else 0.1
    window = cfg.solver.window if cfg is not None else 1000
    if not len(trace):
        out["nodes"] = []
        return out
    q = trace.array("q")
    v = trace.array("v")
    n = q.shape[1]
    final = trace.final
    atk = cfg.attack if cfg is not None else trace.attack
    nodes = []
    for i in range(n):
        entry = {
            "node": i + 1,
            "q_var": float(final.q[i]),
            "v_volt": float(final.v[i]),
            "lambda_up": float(final.lambda_up[i]),
            "lambda_lo": float(final.lambda_lo[i]),
            "settled_at": _settled_at(q[:, i], tau, window),
        }
        if atk is not None and atk.start_iteration <= len(trace):
            s = atk.start_iteration - 1
            entry["settled_after_attack_at"] = _settled_at(q[s:, i], tau, window, first=s + 1)
        nodes.append(entry)
    out["nodes"] = nodes

    if cfg is None:
        return out

    b = cfg.bounds()
    m = cfg.matrices()
    dev = np.abs(v - cfg.mu[None, :])
    out["max_voltage_excursion_volt"] = float(dev.max())
    for i, entry in enumerate(nodes):
        entry["Q_var"] = float(b.Q[i])
        try:
            c = apply_var_priority(float(cfg.s_bar[i]), float(final.q[i]), float(cfg.p_tilde[i]))
            entry["p_out_w"], entry["curtailment_w"] = c.p_out, c.delta
        except InfeasibleOperatingPoint:
            entry["p_out_w"] = entry["curtailment_w"] = None
    kkt = kkt_residuals(m, final.q, DualPoint(final.lambda_up, final.lambda_lo), cfg.p, b)
    out["kkt"] = {k: float(getattr(kkt, k)) for k in ("primal_violation", "stationarity_residual",
                                                      "comp_slack_up", "comp_slack_lo")}
    if atk is not None:
        s = min(atk.start_iteration - 1, len(trace))
        pre, post = v[:s], v[s:]
        out["attack"] = {
            "attacker": atk.attacker, "start_iteration": atk.start_iteration,
            "offset_up": atk.offset_up, "offset_lo": atk.offset_lo, "tamper_internal": atk.tamper_internal,
            "pre_attack_converged_at": trace.pre_attack_converged_at,
            "pre_attack_voltage_band": [float(pre.min()), float(pre.max())] if len(pre) else None,
            "post_attack_voltage_band": [float(post.min()), float(post.max())] if len(post) else None,
        }
    else:
        out["attack"] = None
    return out


def write_summary(summary: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
