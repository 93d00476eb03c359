"""Electrical model tests: calibration, composition, sweep, oracle."""

import random
import time

import numpy as np
import pytest

from pvmppt.pvmodel import (
    ND195R1S,
    ArraySpec,
    CalibrationError,
    ModuleCondition,
    ModuleDatasheet,
    ModuleParams,
    STC,
    ValidationError,
    array_current,
    array_current_batch,
    array_open_circuit_voltage,
    calibrate_module,
    local_maxima,
    module_current,
    module_mpp,
    module_open_circuit_voltage,
    module_voltage,
    oracle_gmpp,
    string_current,
    sweep_curve,
    uniform_array_current,
)

HS = ModuleCondition(1.0, 25.0)


def two_level_string(module, n_series, n_shaded, ir, t=25.0):
    ls = ModuleCondition(1.0 / ir, t)
    hs = ModuleCondition(1.0, t)
    grid = (tuple([hs] * (n_series - n_shaded) + [ls] * n_shaded),)
    return ArraySpec(n_series, 1, module, grid)


class TestCalibration:
    def test_nd195r1s_reproduces_datasheet(self, nd_module):
        i0 = module_current(nd_module, STC, 0.0)
        assert abs(i0 - 8.68) <= 0.005 * 8.68
        assert abs(module_current(nd_module, STC, 29.7)) <= 0.005 * 8.68
        i_mp = module_current(nd_module, STC, 23.6)
        assert abs(23.6 * i_mp - 195.0) <= 0.02 * 195.0
        assert abs(i_mp - 8.27) <= 0.02 * 8.27

    def test_mpp_derivative_vanishes(self, nd_module):
        v, _ = module_mpp(nd_module, STC)
        # the fitted curve peaks at the datasheet MPP voltage
        assert abs(v - 23.6) < 0.1

    def test_calibration_runtime(self):
        t0 = time.time()
        calibrate_module(ND195R1S)
        assert time.time() - t0 < 1.0

    def test_synthetic_round_trip(self):
        known = ModuleParams(
            i_pv_ref=8.0, i_o_ref=2e-8, ideality_a=1.3, r_s=0.25, r_sh=400.0, n_cells=42
        )
        voc = module_open_circuit_voltage(known, STC)
        isc = module_current(known, STC, 0.0)
        v_mp, p_mp = module_mpp(known, STC)
        ds = ModuleDatasheet(
            p_max=p_mp,
            v_oc=voc,
            i_sc=isc,
            v_mpp=v_mp,
            i_mpp=p_mp / v_mp,
            pmax_thermal_coeff=-0.0044,
            rho_mod=-0.0033,
            n_cells=42,
        )
        fitted = calibrate_module(ds)
        assert abs(module_current(fitted, STC, 0.0) - isc) <= 0.005 * isc
        assert abs(module_current(fitted, STC, voc)) <= 0.005 * isc
        assert abs(module_current(fitted, STC, v_mp) * v_mp - p_mp) <= 0.005 * p_mp
        assert abs(module_open_circuit_voltage(fitted, STC) - voc) <= 0.005 * voc

    def test_ideal_module_short_circuit_current_is_photocurrent(self):
        ideal = ModuleParams(
            i_pv_ref=8.5, i_o_ref=1e-8, ideality_a=1.2, r_s=0.0, r_sh=1e7, n_cells=42
        )
        assert module_current(ideal, STC, 0.0) == pytest.approx(8.5, rel=1e-9)

    def test_infeasible_datasheet_rejected(self):
        with pytest.raises(ValidationError):
            ModuleDatasheet(
                p_max=150.0,
                v_oc=29.7,
                i_sc=8.68,
                v_mpp=23.6,
                i_mpp=8.27,  # 195 W point on a 150 W plate
                pmax_thermal_coeff=-0.0044,
                rho_mod=-0.00329,
                n_cells=42,
            ).validate()

    def test_unfittable_curve_shape_raises(self):
        bad = ModuleDatasheet(
            p_max=240.8,
            v_oc=29.7,
            i_sc=8.68,
            v_mpp=28.0,
            i_mpp=8.6,
            pmax_thermal_coeff=-0.0044,
            rho_mod=-0.00329,
            n_cells=42,
        )
        with pytest.raises(CalibrationError) as err:
            calibrate_module(bad)
        assert err.value.residuals  # diagnostics carried

    def test_a_fixed_out_of_range(self):
        with pytest.raises(ValidationError):
            calibrate_module(ND195R1S, a_fixed=2.5)


class TestModuleOperations:
    def test_voltage_below_bypass_rejected(self, nd_module):
        with pytest.raises(ValidationError):
            module_current(nd_module, STC, -1.5)

    def test_dark_module_current_is_zero(self, nd_module):
        dark = ModuleCondition(0.0, 25.0)
        assert abs(module_current(nd_module, dark, 0.0)) < 1e-9

    def test_open_circuit_voltage(self, nd_module):
        assert module_voltage(nd_module, STC, 0.0) == pytest.approx(29.7, abs=0.2)

    def test_bypass_clamp_above_short_circuit(self, nd_module):
        assert module_voltage(nd_module, STC, 10.0) == -0.7

    def test_voltage_at_mpp_current(self, nd_module):
        assert module_voltage(nd_module, STC, 8.27) == pytest.approx(23.6, rel=0.02)

    def test_negative_current_rejected(self, nd_module):
        with pytest.raises(ValidationError):
            module_voltage(nd_module, STC, -0.1)

    def test_voltage_non_increasing_and_continuous(self):
        # finite shunt resistance bounds the worst-case slope, so the
        # sampled differences must respect |dv| <= di * (r_sh + r_s)
        p = ModuleParams(
            i_pv_ref=8.0, i_o_ref=2e-8, ideality_a=1.3, r_s=0.25, r_sh=400.0, n_cells=42
        )
        currents = np.linspace(0.0, 10.0, 4000)
        volts = [module_voltage(p, STC, float(i)) for i in currents]
        diffs = np.diff(volts)
        di = currents[1] - currents[0]
        assert np.all(diffs <= 1e-12)
        assert np.min(diffs) >= -di * (p.r_sh + p.r_s) - 1e-9

    def test_current_voltage_inverse_pair(self, nd_module):
        # absolute tolerance reflects conditioning: dv/di ~ r_sh in the
        # constant-current region amplifies the current solver tolerance
        for v in (0.0, 5.0, 15.0, 22.0, 27.0):
            i = module_current(nd_module, STC, v)
            assert module_voltage(nd_module, STC, i) == pytest.approx(v, abs=5e-4)


class TestStringAndArray:
    def test_open_circuit_string_blocked(self):
        exact = ModuleParams(
            i_pv_ref=8.0, i_o_ref=2e-8, ideality_a=1.3, r_s=0.25, r_sh=400.0, n_cells=42
        )
        spec = ArraySpec.uniform(exact, 5, 1)
        voc = module_open_circuit_voltage(exact, STC)
        assert string_current(spec, 0, 5 * voc) == 0.0
        assert string_current(spec, 0, 5 * voc + 10.0) == 0.0

    def test_uniform_string_at_mpp(self, nd_module):
        spec = ArraySpec.uniform(nd_module, 5, 1)
        assert string_current(spec, 0, 5 * 23.6) == pytest.approx(8.27, rel=0.02)

    def test_shaded_string_bypass_range(self, nd_module):
        # two shaded of four at half sun: just below the insolated pair's
        # MPP voltage the bypass diodes conduct the full insolated current
        spec = two_level_string(nd_module, 4, 2, 2.0)
        v = 2 * 23.6 - 0.7 * 2 - 1.0
        i_shaded_sc = module_current(nd_module, ModuleCondition(0.5, 25.0), 0.0)
        assert string_current(spec, 0, v) > i_shaded_sc

    def test_uniform_array_at_mpp(self, nd_module):
        spec = ArraySpec.uniform(nd_module, 5, 3)
        assert array_current(spec, 5 * 23.6) == pytest.approx(3 * 8.27, rel=0.02)

    def test_short_circuit_scales_with_irradiance(self, nd_module):
        cond = ModuleCondition(0.7, 25.0)
        spec = ArraySpec.uniform(nd_module, 5, 3, cond)
        assert array_current(spec, 0.0) == pytest.approx(3 * 8.68 * 0.7, rel=0.01)

    def test_negative_voltage_rejected(self, nd_module):
        spec = ArraySpec.uniform(nd_module, 5, 3)
        with pytest.raises(ValidationError):
            array_current(spec, -1.0)

    def test_array_current_monotone(self, nd_module):
        rnd = random.Random(3)
        levels = [ModuleCondition(rnd.uniform(0.2, 1.0), rnd.uniform(15, 45)) for _ in range(3)]
        grid = tuple(
            tuple(levels[rnd.randrange(3)] for _ in range(5)) for _ in range(3)
        )
        spec = ArraySpec(5, 3, nd_module, grid)
        voc = array_open_circuit_voltage(spec)
        vs = np.linspace(0.0, voc, 240)
        cur = [array_current(spec, float(v)) for v in vs]
        assert np.all(np.diff(cur) <= 1e-7)

    def test_uniform_matches_lumped_equivalent(self, nd_module):
        for s, t in ((1.0, 25.0), (0.6, 35.0), (0.25, 10.0)):
            cond = ModuleCondition(s, t)
            spec = ArraySpec.uniform(nd_module, 5, 3, cond)
            voc = array_open_circuit_voltage(spec)
            for v in np.linspace(0.0, voc * 0.999, 17):
                direct = uniform_array_current(nd_module, cond, 5, 3, float(v))
                composed = array_current(spec, float(v))
                assert composed == pytest.approx(direct, rel=1e-6, abs=1e-6)

    def test_batch_matches_scalar(self, nd_module):
        spec = two_level_string(nd_module, 4, 2, 2.0)
        voc = array_open_circuit_voltage(spec)
        vs = np.linspace(0.0, voc, 37)
        batch = array_current_batch(spec, vs)
        for v, ib in zip(vs, batch):
            assert abs(array_current(spec, float(v)) - ib) < 1e-4

    def test_aging_override_changes_curve(self, nd_module):
        aged = ModuleParams(
            i_pv_ref=nd_module.i_pv_ref * 0.9,
            i_o_ref=nd_module.i_o_ref,
            ideality_a=nd_module.ideality_a,
            r_s=nd_module.r_s,
            r_sh=nd_module.r_sh,
            n_cells=nd_module.n_cells,
        )
        base = ArraySpec.uniform(nd_module, 5, 1)
        spec = ArraySpec(
            5, 1, nd_module, base.conditions, overrides={(0, 2): aged}
        )
        assert array_current(spec, 60.0) < array_current(base, 60.0)


class TestSweepAndOracle:
    def test_uniform_curve_single_peak(self, nd_module):
        spec = ArraySpec.uniform(nd_module, 5, 3)
        curve = sweep_curve(spec, 0.01)
        peaks = local_maxima(curve)
        assert len(peaks) == 1
        v_star, p_star = oracle_gmpp(curve)
        assert v_star == pytest.approx(5 * 23.6, abs=2.5)
        assert p_star == pytest.approx(15 * 195.0, rel=0.02)

    def test_curve_invariants(self, nd_module):
        spec = two_level_string(nd_module, 4, 2, 2.0)
        curve = sweep_curve(spec, 0.01)
        assert np.all(np.diff(curve.v) > 0)
        assert curve.v[0] == 0.0
        assert curve.v[-1] == pytest.approx(array_open_circuit_voltage(spec), abs=1e-9)
        assert np.all(np.diff(curve.i) <= 1e-9)
        np.testing.assert_array_equal(curve.p, curve.v * curve.i)

    def test_two_level_string_has_two_peaks(self, nd_module):
        curve = sweep_curve(two_level_string(nd_module, 4, 2, 2.0), 0.01)
        assert len(local_maxima(curve)) == 2

    def test_dark_array_has_no_power(self, nd_module):
        dark = ModuleCondition(0.0, 25.0)
        curve = sweep_curve(ArraySpec.uniform(nd_module, 5, 3, dark), 0.01)
        assert curve.p.max() < 1e-6

    def test_v_step_validated(self, nd_module):
        spec = ArraySpec.uniform(nd_module, 5, 1)
        with pytest.raises(ValidationError):
            sweep_curve(spec, 0.06)
        with pytest.raises(ValidationError):
            sweep_curve(spec, 0.0)

    def test_low_ir_dominance_picks_upper_peak(self, nd_module):
        # three of four modules lightly shaded: the high-voltage peak wins
        curve = sweep_curve(two_level_string(nd_module, 4, 3, 1.3), 0.01)
        peaks = sorted(local_maxima(curve))
        assert len(peaks) == 2
        v_star, p_star = oracle_gmpp(curve)
        assert v_star == pytest.approx(peaks[1][0], abs=0.05)

    def test_oracle_golden_benchmark_psc3(self, nd_module):
        # frozen output of this oracle at 0.01 V resolution (determinism guard)
        from pvmppt.harness import ShadingPattern, BENCHMARK_LEVELS, BENCHMARK_PATTERNS

        pat = ShadingPattern.parse(list(BENCHMARK_PATTERNS[3]), BENCHMARK_LEVELS)
        spec = ArraySpec(5, 3, nd_module, pat.expand(5), sample_module=(0, 2))
        v_star, p_star = oracle_gmpp(sweep_curve(spec, 0.01))
        assert v_star == pytest.approx(119.450000, abs=1e-5)
        assert p_star == pytest.approx(886.675119, rel=1e-6)

    def test_oracle_empty_curve_rejected(self, nd_module):
        from pvmppt.pvmodel import PvCurve

        empty = PvCurve(np.array([]), np.array([]), np.array([]), 0.01)
        with pytest.raises(ValidationError):
            oracle_gmpp(empty)


@pytest.fixture(scope="module")
def grid_results(nd_module):
    rnd = random.Random(7)
    rows = []
    for _ in range(60):
        ns = rnd.randint(2, 8)
        n_sh = rnd.randint(1, ns - 1)
        ir = rnd.uniform(1.2, 10.0)
        spec = two_level_string(nd_module, ns, n_sh, ir)
        peaks = sorted(local_maxima(sweep_curve(spec, 0.01)))
        rows.append((ns, n_sh, ir, peaks))
    return rows


class TestPeakStructureProperties:
    """Randomized two-level grid: peak locations, bounds, separation."""

    def test_exactly_two_local_maxima(self, grid_results):
        assert all(len(p) == 2 for *_, p in grid_results)

    def test_upper_peak_location_bound(self, nd_module, grid_results):
        voc_hs = module_open_circuit_voltage(nd_module, HS)
        for ns, n_sh, ir, peaks in grid_results:
            v_mpp_sh, _ = module_mpp(nd_module, ModuleCondition(1.0 / ir, 25.0))
            v2 = peaks[1][0]
            n_in = ns - n_sh
            assert ns * v_mpp_sh < v2 < n_sh * v_mpp_sh + n_in * voc_hs

    def test_lower_peak_location(self, nd_module, grid_results):
        v_mpp_hs, _ = module_mpp(nd_module, HS)
        for ns, n_sh, ir, peaks in grid_results:
            predicted = (ns - n_sh) * v_mpp_hs - 0.7 * n_sh
            assert peaks[0][0] == pytest.approx(predicted, rel=0.05)

    def test_peak_separation_exceeds_module_mpp_voltage(self, nd_module, grid_results):
        v_mpp_hs, _ = module_mpp(nd_module, HS)
        for *_, peaks in grid_results:
            assert peaks[1][0] - peaks[0][0] > v_mpp_hs

    def test_dominance_high_k_low_ir(self, nd_module):
        # whenever the shaded/insolated ratio is high and the irradiance
        # ratio low, the upper-voltage peak is the global maximum
        for ns, n_sh in ((4, 3), (5, 4), (8, 6)):
            for ir in (1.2, 1.35, 1.5):
                curve = sweep_curve(two_level_string(nd_module, ns, n_sh, ir), 0.01)
                peaks = sorted(local_maxima(curve))
                v_star, _ = oracle_gmpp(curve)
                assert v_star == pytest.approx(peaks[-1][0], abs=0.05)
