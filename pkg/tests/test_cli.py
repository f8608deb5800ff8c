import json

import numpy as np
import pytest

from distvar.agents import AttackSpec, run_simulation
from distvar.cli import bundled_scenario, main
from distvar.report import TRACE_COLUMNS, TraceFormatError, read_trace, summarize, write_trace
from distvar.scenario import ScenarioError, config_from_dict, config_to_dict, dump_config, load_config
from distvar.search import search_attack_offset


def small_doc(**over):
    doc = {
        "name": "tiny",
        "feeder": {"substation": 0, "nodes": [1, 2],
                   "edges": [{"parent": 0, "child": 1, "r": 1.1, "x": 0.4},
                             {"parent": 1, "child": 2, "r": 1.1, "x": 0.4}]},
        "inverters": {"unit": "kVA", "s_bar": 5},
        "loads": {"unit": "kW", "p": [1.0, -0.5]},
        "voltage": {"unit": "V", "v0": 220.0},
        "solver": {"window": 50},
    }
    doc.update(over)
    return doc


def write(tmp_path, doc, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestScenario:
    def test_units(self):
        cfg = config_from_dict(small_doc())
        assert np.array_equal(cfg.p, [1000.0, -500.0])
        assert np.array_equal(cfg.s_bar, [5000.0, 5000.0])
        assert np.array_equal(cfg.p_tilde, [1000.0, 500.0])
        assert cfg.solver.tau == pytest.approx(0.1)

    def test_node_map(self):
        cfg = config_from_dict(small_doc(loads={"p": {"2": 7.0, "1": 3.0}}))
        assert np.array_equal(cfg.p, [3.0, 7.0])

    @pytest.mark.parametrize("name", ["fig6_baseline", "fig6_attack"])
    def test_roundtrip(self, name, tmp_path):
        cfg = load_config(bundled_scenario(name))
        assert config_from_dict(config_to_dict(cfg)) == cfg
        dump_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_fig6_contents(self, fig6_cfg, fig6_attack_cfg):
        assert np.allclose(fig6_cfg.p, [3600, -4000, 2260, -2500, 4850, 3310, 2430])
        assert fig6_cfg.v0 == 220.0 and np.all(fig6_cfg.s_bar == 5000.0)
        assert fig6_attack_cfg.attack.attacker == 5 and fig6_attack_cfg.attack.start_iteration == 1500
        assert fig6_attack_cfg.attack.offset_lo == 0.0

    @pytest.mark.parametrize("patch, match", [
        ({"loads": {"p": [1.0]}}, "loads.p"),
        ({"inverters": {"unit": "MVA", "s_bar": 5}}, "unit"),
        ({"inverters": {"unit": "kVA", "s_bar": 0.5}}, "infeasible"),
        ({"voltage": {"v0": 220.0, "mu": 230.0}}, "mu"),
        ({"solver": {"window": 0}}, "window"),
        ({"attack": {"attacker": 9, "start_iteration": 5}}, "attacker"),
        ({"feeder": {"nodes": [1, 2], "edges": [{"parent": 0, "child": 1, "r": 1, "x": 1}]}}, "feeder"),
        ({"feeder": {"nodes": [1, 2], "edges": [{"parent": 0, "child": 1, "r": 1, "x": 1},
                                                {"parent": 1, "child": 2, "r": 3, "x": 1}]}}, "homogeneous"),
        ({"loads": None}, "loads"),
    ])
    def test_validation(self, patch, match):
        with pytest.raises(ScenarioError, match=match):
            config_from_dict(small_doc(**patch))

    def test_json_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"name": "x",\n  "feeder": }')
        with pytest.raises(ScenarioError, match="line 2 column"):
            load_config(path)


class TestTraceFiles:
    def test_row_count_and_columns(self, tmp_path, fig6_baseline_trace):
        path = tmp_path / "t.csv"
        write_trace(fig6_baseline_trace, path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(TRACE_COLUMNS)
        assert len(lines) - 1 == len(fig6_baseline_trace) * 7

    def test_read_back_exact(self, tmp_path, fig6_cfg):
        tr = run_simulation(fig6_cfg.with_solver(max_iter=25))
        write_trace(tr, tmp_path / "t.csv")
        back = read_trace(tmp_path / "t.csv")
        for f in ("q", "v", "lambda_up", "theta_lo", "omega"):
            assert np.array_equal(back.array(f), tr.array(f))

    def test_truncated(self, tmp_path, fig6_cfg):
        write_trace(run_simulation(fig6_cfg.with_solver(max_iter=3)), tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        (tmp_path / "cut.csv").write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(TraceFormatError, match="truncated"):
            read_trace(tmp_path / "cut.csv")
        (tmp_path / "hdr.csv").write_text("a,b\n")
        with pytest.raises(TraceFormatError, match="header"):
            read_trace(tmp_path / "hdr.csv")
        with pytest.raises(TraceFormatError):
            read_trace(tmp_path / "missing.csv")


class TestSummary:
    def test_zero_injection(self):
        cfg = config_from_dict(small_doc(loads={"p": [0.0, 0.0]}))
        s = summarize(run_simulation(cfg), cfg)
        assert s["stop_reason"] == "converged"
        for e in s["nodes"]:
            assert e["q_var"] == e["lambda_up"] == e["lambda_lo"] == e["curtailment_w"] == 0.0
            assert e["v_volt"] == 220.0
        assert s["max_voltage_excursion_volt"] == 0.0
        assert s["kkt"] == {"primal_violation": 0.0, "stationarity_residual": 0.0,
                            "comp_slack_up": 0.0, "comp_slack_lo": 0.0}

    def test_baseline_reports_convergence(self, fig6_baseline_trace, fig6_cfg):
        s = summarize(fig6_baseline_trace, fig6_cfg)
        assert s["converged_at"] == len(fig6_baseline_trace)
        assert all(e["settled_at"] is not None and e["settled_at"] <= s["converged_at"] for e in s["nodes"])
        assert s["attack"] is None
        # nodes 3 and 4 command about -Q, so their PV output gets curtailed where p_tilde^2 + Q^2 > s^2
        assert all(e["curtailment_w"] is None or e["curtailment_w"] >= 0 for e in s["nodes"])

    def test_attack_metadata(self, fig6_cfg):
        cfg = fig6_cfg.with_attack(AttackSpec(5, 50, 100.0)).with_solver(window=20)
        s = summarize(run_simulation(cfg), cfg)
        assert s["attack"]["start_iteration"] == 50 and s["attack"]["attacker"] == 5
        assert len(s["attack"]["pre_attack_voltage_band"]) == 2


class TestCli:
    def test_run_bundled(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["run", "fig6_baseline"]) == 0
        trace = tmp_path / "fig6_baseline_trace.csv"
        summary = json.loads((tmp_path / "fig6_baseline_summary.json").read_text())
        rows = trace.read_text().count("\n") - 1
        assert rows == summary["iterations"] * 7
        assert summary["stop_reason"] == "converged"
        assert "converged" in capsys.readouterr().out

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        src = str(bundled_scenario("fig6_baseline"))
        for t in (a, b):
            assert main(["run", src, "--trace", str(t), "--summary", str(tmp_path / "s.json")]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_malformed_no_outputs(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "bad.json").write_text("{ not json")
        assert main(["run", "bad.json"]) == 1
        assert "line 1" in capsys.readouterr().err
        assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.json"]

    def test_infeasible_inverter(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write(tmp_path, small_doc(loads={"unit": "kW", "p": [6.0, 0.0]}))
        assert main(["run", "s.json"]) == 1
        assert not (tmp_path / "tiny_trace.csv").exists()

    def test_cap_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write(tmp_path, small_doc())
        assert main(["run", "s.json", "--max-iter", "5"]) == 2
        assert (tmp_path / "tiny_trace.csv").read_text().count("\n") == 1 + 5 * 2

    def test_overrides(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write(tmp_path, small_doc())
        assert main(["run", "s.json", "--tau", "1e-3", "--window", "10", "--alpha", "0.001"]) == 0
        assert main(["run", "s.json", "--alpha", "-1"]) == 1

    def test_summarize(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        write(tmp_path, small_doc())
        assert main(["run", "s.json"]) == 0
        capsys.readouterr()
        assert main(["summarize", "tiny_trace.csv"]) == 0
        s = json.loads(capsys.readouterr().out)
        assert len(s["nodes"]) == 2
        assert main(["summarize", "tiny_trace.csv", "--scenario", "s.json", "-o", "out.json"]) == 0
        assert "kkt" in json.loads((tmp_path / "out.json").read_text())
        (tmp_path / "junk.csv").write_text("iteration,node\n")
        assert main(["summarize", "junk.csv"]) == 1

    def test_search_offset_noop_target(self, tmp_path, capsys):
        # target equal to the baseline value is met with zero offset
        cfg = config_from_dict(small_doc())
        q0 = run_simulation(cfg).final.q[0]
        res = search_attack_offset(cfg, 1, target_q=q0, start_iteration=60)
        assert res.offset == 0.0 and res.evaluations == 1
        path = write(tmp_path, small_doc())
        assert main(["search-offset", str(path), "--node", "1", "--target-q", str(q0 / 1e3), "--start", "60"]) == 0
        assert json.loads(capsys.readouterr().out)["offset_up"] == 0.0

    def test_search_offset_zero_offset_is_noop(self):
        cfg = config_from_dict(small_doc())
        base = run_simulation(cfg)
        atk = run_simulation(cfg.with_attack(AttackSpec(1, 60, 0.0, 0.0)))
        assert np.array_equal(base.final.q, atk.final.q)

    def test_search_offset_small_case(self):
        cfg = config_from_dict(small_doc())
        res = search_attack_offset(cfg, 1, target_q=0.0, q_tol=1.0, start_iteration=60)
        assert res.converged and abs(res.achieved_q) <= 1.0
        assert res.offset != 0.0

    def test_search_offset_bad_node(self):
        with pytest.raises(ValueError):
            search_attack_offset(config_from_dict(small_doc()), 3)
