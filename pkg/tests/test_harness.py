"""Harness tests: scenario files, closed loop, reports, emitters, CLI."""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pvmppt.cli import main as cli_main
from pvmppt.control import Mode
from pvmppt.converter import ConverterState, MeasurementNoise, duty_for_voltage, step_ode
from pvmppt.harness import (
    ScenarioError,
    ShadingPattern,
    BENCHMARK_LEVELS,
    BENCHMARK_PATTERNS,
    TRACE_HEADER,
    _PlantCurve,
    base_array_spec,
    build_reference_model,
    detect_pattern,
    emit_report,
    emit_trace,
    load_scenario,
    prune_violations,
    random_scenario,
    run_closed_loop,
    scenario_from_dict,
    benchmark_scenario,
)
from pvmppt.pvmodel import ArraySpec, ModuleCondition, sweep_curve

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def short_psc1(**overrides):
    scn = benchmark_scenario(1, onset_t=0.25, horizon=0.7, dt=2e-5)
    return replace(scn, **overrides) if overrides else scn


@pytest.fixture(scope="module")
def psc1_run():
    return run_closed_loop(short_psc1())


class TestShadingPattern:
    def test_parse_and_expand(self):
        pat = ShadingPattern.parse(["2-2-1", "1-3-1", "3-2-0"], BENCHMARK_LEVELS)
        grid = pat.expand(5)
        assert len(grid) == 3 and all(len(row) == 5 for row in grid)
        assert grid[0][0].irradiance == 0.9
        assert grid[0][2].irradiance == 0.6
        assert grid[0][4].irradiance == 0.3

    def test_degenerate_uniform_string(self):
        pat = ShadingPattern.parse(["5-0-0"], BENCHMARK_LEVELS)
        grid = pat.expand(5)
        assert all(c == ModuleCondition(0.9, 35.0) for c in grid[0])

    def test_count_sum_mismatch(self):
        pat = ShadingPattern.parse(["2-2-2"], BENCHMARK_LEVELS)
        with pytest.raises(ScenarioError, match="sum"):
            pat.expand(5)

    def test_bad_token(self):
        with pytest.raises(ScenarioError, match="dash-separated"):
            ShadingPattern.parse(["2-x-1"], BENCHMARK_LEVELS)

    def test_level_arity_mismatch(self):
        with pytest.raises(ScenarioError, match="levels"):
            ShadingPattern.parse(["2-3"], BENCHMARK_LEVELS)


class TestScenarioFiles:
    def test_load_benchmark_psc1(self):
        scn = load_scenario(SCENARIO_DIR / "benchmark_psc1.json")
        assert scn.n_series == 5 and scn.n_parallel == 3
        assert scn.sample_module == (0, 2)
        assert len(scn.events) == 2
        assert scn.events[1].pattern.as_strings() == list(BENCHMARK_PATTERNS[1])

    def test_missing_file(self):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario(SCENARIO_DIR / "nope.json")

    def test_empty_timeline_rejected(self):
        doc = json.loads((SCENARIO_DIR / "benchmark_psc1.json").read_text())
        doc["timeline"] = []
        with pytest.raises(ScenarioError, match="timeline"):
            scenario_from_dict(doc)

    def test_unsorted_timeline_rejected(self):
        doc = json.loads((SCENARIO_DIR / "benchmark_psc1.json").read_text())
        doc["timeline"] = list(reversed(doc["timeline"]))
        with pytest.raises(ScenarioError, match="sorted"):
            scenario_from_dict(doc)

    def test_missing_field_names_path(self):
        doc = json.loads((SCENARIO_DIR / "benchmark_psc1.json").read_text())
        del doc["array"]["n_series"]
        with pytest.raises(ScenarioError, match="array.n_series"):
            scenario_from_dict(doc)

    def test_bad_counts_rejected(self):
        doc = json.loads((SCENARIO_DIR / "benchmark_psc1.json").read_text())
        doc["timeline"][1]["pattern"] = ["2-2-2", "1-3-1", "3-2-0"]
        with pytest.raises(ScenarioError, match="sum"):
            scenario_from_dict(doc)


class TestReferenceModel:
    def test_homogeneous_identity(self, ref_3x5):
        assert ref_3x5.v_mpp_arr_sc == pytest.approx(5 * ref_3x5.v_mpp_mod_sc, rel=1e-12)

    def test_rho_negative_and_plausible(self, ref_3x5):
        assert -0.005 < ref_3x5.rho_arr < -0.002

    def test_rated_limits(self, ref_3x5):
        assert ref_3x5.v_oc_arr_rated == pytest.approx(5 * 29.7, rel=0.01)
        assert ref_3x5.i_sc_rated == pytest.approx(3 * 8.68, rel=0.01)


class TestStaticDetection:
    def test_uniform_not_psc(self, nd_module, ref_3x5):
        spec = ArraySpec.uniform(nd_module, 5, 3, sample_module=(0, 2))
        det = detect_pattern(spec, ref_3x5)
        assert det.is_psc is False

    def test_benchmark_patterns_all_detected(self, nd_module, ref_3x5):
        for k in range(1, 6):
            pat = ShadingPattern.parse(list(BENCHMARK_PATTERNS[k]), BENCHMARK_LEVELS)
            spec = ArraySpec(5, 3, nd_module, pat.expand(5), sample_module=(0, 2))
            det = detect_pattern(spec, ref_3x5, s_prior=1.0)
            assert det.is_psc is True, f"pattern {k} missed"


class TestClosedLoop:
    def test_uniform_only_scenario(self):
        scn = benchmark_scenario(1, dt=2e-5)
        scn = replace(scn, events=scn.events[:1], horizon_s=0.5, name="uniform")
        trace, report = run_closed_loop(scn)
        assert all(r.mode not in ("scan_up", "scan_down") for r in trace)
        e = report.events[0]
        assert e.detected is None  # no trigger ever fired
        # efficiency after P&O convergence (second half of the window)
        ts = np.array([r.t for r in trace])
        ps = np.array([r.p for r in trace])
        half = ts >= 0.25
        eff = np.trapezoid(ps[half], ts[half]) / (e.oracle_power * (ts[-1] - 0.25))
        assert eff > 0.99
        assert e.final_power <= e.oracle_power * 1.001

    def test_psc_onset_detects_scans_and_converges(self, psc1_run):
        trace, report = psc1_run
        e = report.events[1]
        assert e.detected is True
        assert e.detection_latency_s < 0.15
        assert e.scan_duration_s is not None and e.scan_duration_s < 0.07
        assert e.final_power >= 0.99 * e.oracle_power
        assert e.final_power <= e.oracle_power * 1.001
        assert 0.0 <= e.efficiency <= 1.02

    def test_pruning_replay_clean(self, nd_module, psc1_run):
        trace, report = psc1_run
        e = report.events[1]
        assert e.prunes  # the scan did prune
        spec = base_array_spec(short_psc1(), 1)
        curve = sweep_curve(spec, 0.01)
        assert prune_violations(curve, e.prunes) == []

    def test_scan_command_is_pure_ramp(self, psc1_run):
        # no hidden steps: consecutive scan-mode commands move by exactly
        # ramp_rate * adc_period
        trace, _ = psc1_run
        scn = short_psc1()
        dv = scn.controller.ramp_rate_v_per_s * scn.controller.adc_period_s
        deltas = []
        for a, b in zip(trace, trace[1:]):
            if a.mode in ("scan_up", "scan_down") and b.mode in ("scan_up", "scan_down"):
                deltas.append(abs(b.v_ref - a.v_ref))
        assert deltas
        moving = [d for d in deltas if d > 0.0]
        assert all(abs(d - dv) < 1e-9 for d in moving)

    def test_trace_cadence_and_modes(self, psc1_run):
        trace, _ = psc1_run
        scn = short_psc1()
        expected_rows = round(scn.horizon_s / scn.controller.adc_period_s)
        assert abs(len(trace) - expected_rows) <= 1
        assert {r.mode for r in trace} >= {"po", "scan_up", "scan_down"}

    def test_best_power_in_scan_rows(self, psc1_run):
        trace, _ = psc1_run
        scan_rows = [r for r in trace if r.mode == "scan_down"]
        assert scan_rows
        assert all(math.isfinite(r.p_e) and math.isfinite(r.v_e) for r in scan_rows)

    def test_determinism_bytes(self, tmp_path):
        traces, reports = [], []
        for run_idx in (0, 1):
            trace, report = run_closed_loop(short_psc1())
            tp = tmp_path / f"t{run_idx}.csv"
            rp = tmp_path / f"r{run_idx}.json"
            emit_trace(trace, tp)
            emit_report(report, rp)
            traces.append(tp.read_bytes())
            reports.append(rp.read_bytes())
        assert traces[0] == traces[1]
        assert reports[0] == reports[1]

    def test_noise_is_seeded_and_visible(self):
        noisy = short_psc1(noise=MeasurementNoise(v_amplitude=0.2, i_amplitude=0.02))
        t1, _ = run_closed_loop(noisy)
        t2, _ = run_closed_loop(noisy)
        t3, _ = run_closed_loop(replace(noisy, seed=99))
        assert [r.v_pv for r in t1] == [r.v_pv for r in t2]
        assert [r.v_pv for r in t1] != [r.v_pv for r in t3]

    def test_misaligned_adc_rejected(self):
        scn = short_psc1(dt_s=3e-5)  # 5e-4 / 3e-5 is not an integer
        with pytest.raises(ScenarioError, match="multiple"):
            run_closed_loop(scn)

    def test_inline_integrator_matches_step_ode(self, nd_module):
        # one ADC interval of the fast loop equals a step_ode sequence
        scn = short_psc1()
        spec = base_array_spec(scn, 0)
        plant = _PlantCurve(sweep_curve(spec, 0.01))
        trace, _ = run_closed_loop(scn)
        v0 = trace[0].v_pv
        cmd = trace[0].v_ref
        s = ConverterState(v_pv=v0, i_l=plant(v0), t=0.0)
        duty = duty_for_voltage(cmd, scn.converter.v_out)
        for _ in range(round(scn.controller.adc_period_s / scn.dt_s)):
            s = step_ode(s, duty, scn.dt_s, plant, scn.converter)
        assert trace[1].v_pv == pytest.approx(s.v_pv, abs=1e-9)


class TestEmitters:
    def test_header_and_rows(self, tmp_path, psc1_run):
        trace, _ = psc1_run
        path = tmp_path / "trace.csv"
        emit_trace(trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == TRACE_HEADER
        assert len(lines) == len(trace) + 1

    def test_empty_trace_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        emit_trace([], path)
        assert path.read_text() == TRACE_HEADER + "\n"

    def test_nan_best_serialized_empty(self, tmp_path, psc1_run):
        trace, _ = psc1_run
        path = tmp_path / "trace.csv"
        emit_trace(trace, path)
        first = path.read_text().splitlines()[1]
        assert first.endswith(",,")  # p_e and v_e empty in P&O mode

    def test_report_roundtrip(self, tmp_path, psc1_run):
        _, report = psc1_run
        path = tmp_path / "report.json"
        emit_report(report, path)
        doc = json.loads(path.read_text())
        assert doc["scenario"] == report.scenario
        assert len(doc["events"]) == 2
        e = doc["events"][1]
        for key in (
            "oracle_power_w",
            "final_power_w",
            "efficiency",
            "detected",
            "detection_latency_s",
            "scan_duration_s",
            "prunes",
        ):
            assert key in e
        assert 0.0 <= e["efficiency"] <= 1.02

    def test_unwritable_path_raises_with_context(self, psc1_run):
        trace, _ = psc1_run
        with pytest.raises(OSError, match="trace"):
            emit_trace(trace, "/nonexistent-dir/trace.csv")


class TestCorpusScenario:
    def test_random_scenarios_valid_and_deterministic(self):
        a = random_scenario(42, 3)
        b = random_scenario(42, 3)
        assert a == b
        a.validate()
        assert a.events[0].pattern.as_strings() == ["5-0-0"] * 3


class TestCli:
    def test_run_subcommand(self, tmp_path):
        out = tmp_path / "out"
        rc = cli_main(
            [
                "run",
                "--scenario",
                str(SCENARIO_DIR / "uniform_stc.json"),
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        assert (out / "trace.csv").exists()
        assert (out / "report.json").exists()

    def test_run_po_baseline_flag(self, tmp_path):
        out = tmp_path / "po"
        rc = cli_main(
            [
                "run",
                "--scenario",
                str(SCENARIO_DIR / "uniform_stc.json"),
                "--out",
                str(out),
                "--controller",
                "po",
            ]
        )
        assert rc == 0

    def test_sweep_subcommand(self, tmp_path):
        out = tmp_path / "curve.csv"
        rc = cli_main(
            [
                "sweep",
                "--scenario",
                str(SCENARIO_DIR / "benchmark_psc1.json"),
                "--event-index",
                "1",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "v,i,p"
        assert len(lines) > 1000

    def test_detect_subcommand(self, capsys):
        rc = cli_main(
            [
                "detect",
                "--scenario",
                str(SCENARIO_DIR / "benchmark_psc1.json"),
                "--event-index",
                "1",
                "--prior-irradiance",
                "1.0",
            ]
        )
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["psc"] is True

    def test_corpus_subcommand(self, tmp_path):
        out = tmp_path / "corpus.json"
        rc = cli_main(["corpus", "--count", "2", "--seed", "7", "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["events_total"] >= 2

    def test_invalid_scenario_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"name\": \"x\"}")
        rc = cli_main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 2
