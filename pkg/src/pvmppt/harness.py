"""Scenario ingestion, closed-loop simulation, metrics, and reports.

Couples the controller to the averaged converter and the array model,
recomputes the brute-force oracle at every shading event, and reduces
each run to per-event metrics (detection verdict and latency, scan
duration, final power vs. oracle, energy efficiency).
"""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import (
    ControllerConfig,
    ControllerState,
    DetectorConfig,
    Measurement,
    Mode,
    ReferenceModel,
    criteria_fired,
    compute_psi,
    controller_tick,
    make_controller_state,
    update_references,
)
from .converter import (
    ConverterParams,
    MeasurementNoise,
    TraceRecord,
    duty_for_voltage,
)
from .pvmodel import (
    ArraySpec,
    ModuleCondition,
    ModuleDatasheet,
    ModuleParams,
    PvCurve,
    ValidationError,
    calibrate_module,
    module_voltage,
    oracle_gmpp,
    string_current,
    sweep_curve,
)

TRACE_HEADER = "t,v_ref,duty,v_pv,i_pv,p,mode,p_e,v_e"

_trapz = getattr(np, "trapezoid", None) or np.trapz

# benchmark array: 3 strings of 5 modules, three (irradiance, temp) levels,
# patterns given as per-string level counts, sample module mid first string
BENCHMARK_LEVELS = ((0.9, 35.0), (0.6, 30.0), (0.3, 25.0))
BENCHMARK_PATTERNS = {
    1: ("2-2-1", "1-3-1", "3-2-0"),
    2: ("5-0-0", "3-1-1", "3-2-0"),
    3: ("0-1-4", "0-0-5", "1-1-3"),
    4: ("1-1-3", "1-1-3", "1-0-4"),
    5: ("1-1-3", "5-0-0", "4-0-1"),
}
BENCHMARK_SAMPLE = (0, 2)


class ScenarioError(ValueError):
    """Scenario file failed validation; message carries the field path."""


# ---------------------------------------------------------------------------
# scenario model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShadingPattern:
    """Per-string module counts over declared (irradiance, temperature) levels.

    ``counts[s][k]`` modules of string ``s`` sit at ``levels[k]``; levels
    are assigned to positions front to back in declared order."""

    counts: tuple[tuple[int, ...], ...]
    levels: tuple[ModuleCondition, ...]

    @classmethod
    def parse(
        cls, strings: list[str] | tuple[str, ...], levels, *, where: str = "pattern"
    ) -> "ShadingPattern":
        lv = tuple(
            c if isinstance(c, ModuleCondition) else ModuleCondition(float(c[0]), float(c[1]))
            for c in levels
        )
        counts = []
        for s, text in enumerate(strings):
            try:
                row = tuple(int(tok) for tok in str(text).split("-"))
            except ValueError as exc:
                raise ScenarioError(f"{where}[{s}]: not a dash-separated count string") from exc
            if len(row) != len(lv):
                raise ScenarioError(
                    f"{where}[{s}]: {len(row)} counts for {len(lv)} levels"
                )
            if any(n < 0 for n in row):
                raise ScenarioError(f"{where}[{s}]: negative count")
            counts.append(row)
        return cls(tuple(counts), lv)

    def expand(self, n_series: int) -> tuple[tuple[ModuleCondition, ...], ...]:
        grid = []
        for s, row in enumerate(self.counts):
            if sum(row) != n_series:
                raise ScenarioError(
                    f"pattern string {s}: counts sum to {sum(row)}, expected {n_series}"
                )
            positions: list[ModuleCondition] = []
            for level, n in zip(self.levels, row):
                positions.extend([level] * n)
            grid.append(tuple(positions))
        return tuple(grid)

    def as_strings(self) -> list[str]:
        return ["-".join(str(n) for n in row) for row in self.counts]


@dataclass(frozen=True)
class TimelineEvent:
    t: float
    pattern: ShadingPattern


@dataclass(frozen=True)
class Scenario:
    name: str
    n_series: int
    n_parallel: int
    sample_module: tuple[int, int]
    events: tuple[TimelineEvent, ...]
    horizon_s: float
    datasheet: ModuleDatasheet | None = None
    params: ModuleParams | None = None
    converter: ConverterParams = ConverterParams()
    controller: ControllerConfig = ControllerConfig()
    noise: MeasurementNoise = MeasurementNoise()
    seed: int = 0
    dt_s: float = 5e-6
    v_ref_start: float | None = None

    def validate(self) -> None:
        if not self.events:
            raise ScenarioError("timeline: must contain at least one event")
        times = [e.t for e in self.events]
        if times != sorted(times):
            raise ScenarioError("timeline: events must be time-sorted")
        if times[0] != 0.0:
            raise ScenarioError("timeline: first event must be at t = 0")
        if times[-1] >= self.horizon_s:
            raise ScenarioError("timeline: events must end before the horizon")
        if self.datasheet is None and self.params is None:
            raise ScenarioError("module: datasheet or params required")
        for k, e in enumerate(self.events):
            if len(e.pattern.counts) != self.n_parallel:
                raise ScenarioError(
                    f"timeline[{k}].pattern: {len(e.pattern.counts)} strings, "
                    f"expected {self.n_parallel}"
                )
            e.pattern.expand(self.n_series)


_CAL_CACHE: dict[ModuleDatasheet, ModuleParams] = {}


def resolve_module(scn: Scenario) -> ModuleParams:
    if scn.params is not None:
        return scn.params
    if scn.datasheet not in _CAL_CACHE:
        _CAL_CACHE[scn.datasheet] = calibrate_module(scn.datasheet)
    return _CAL_CACHE[scn.datasheet]


def base_array_spec(scn: Scenario, event_idx: int = 0) -> ArraySpec:
    module = resolve_module(scn)
    grid = scn.events[event_idx].pattern.expand(scn.n_series)
    return ArraySpec(
        n_series=scn.n_series,
        n_parallel=scn.n_parallel,
        module=module,
        conditions=grid,
        sample_module=scn.sample_module,
    )


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------


def _get(d: dict, key: str, where: str, required: bool = True, default=None):
    if key not in d:
        if required:
            raise ScenarioError(f"{where}.{key}: missing required field")
        return default
    return d[key]


def scenario_from_dict(doc: dict, name: str = "scenario") -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("root: expected a JSON object")
    arr = _get(doc, "array", "root")
    n_series = int(_get(arr, "n_series", "array"))
    n_parallel = int(_get(arr, "n_parallel", "array"))
    sample = tuple(int(x) for x in _get(arr, "sample_module", "array", False, [0, 0]))

    mod = _get(doc, "module", "root")
    datasheet = params = None
    if "datasheet" in mod:
        d = mod["datasheet"]
        datasheet = ModuleDatasheet(
            p_max=float(_get(d, "p_max_w", "module.datasheet")),
            v_oc=float(_get(d, "v_oc_v", "module.datasheet")),
            i_sc=float(_get(d, "i_sc_a", "module.datasheet")),
            v_mpp=float(_get(d, "v_mpp_v", "module.datasheet")),
            i_mpp=float(_get(d, "i_mpp_a", "module.datasheet")),
            pmax_thermal_coeff=float(
                _get(d, "pmax_thermal_coeff_frac_per_c", "module.datasheet", False, -0.0044)
            ),
            rho_mod=float(_get(d, "rho_mod_frac_per_c", "module.datasheet")),
            n_cells=int(_get(d, "n_cells", "module.datasheet")),
        )
    elif "params" in mod:
        p = mod["params"]
        params = ModuleParams(
            i_pv_ref=float(_get(p, "i_pv_ref_a", "module.params")),
            i_o_ref=float(_get(p, "i_o_ref_a", "module.params")),
            ideality_a=float(_get(p, "ideality_a", "module.params")),
            r_s=float(_get(p, "r_s_ohm", "module.params")),
            r_sh=float(_get(p, "r_sh_ohm", "module.params")),
            n_cells=int(_get(p, "n_cells", "module.params")),
            v_bypass=float(_get(p, "v_bypass_v", "module.params", False, -0.7)),
            rho_mod=float(_get(p, "rho_mod_frac_per_c", "module.params", False, -0.00329)),
        )
    else:
        raise ScenarioError("module: needs 'datasheet' or 'params'")

    default_levels = _get(doc, "levels", "root", False)
    timeline = _get(doc, "timeline", "root")
    if not isinstance(timeline, list) or not timeline:
        raise ScenarioError("timeline: must be a non-empty list")
    events = []
    for k, ev in enumerate(timeline):
        where = f"timeline[{k}]"
        t = float(_get(ev, "t_s", where))
        levels = ev.get("levels", default_levels)
        if levels is None:
            raise ScenarioError(f"{where}.levels: no levels declared here or at root")
        pattern = ShadingPattern.parse(
            _get(ev, "pattern", where), levels, where=f"{where}.pattern"
        )
        events.append(TimelineEvent(t=t, pattern=pattern))

    conv_doc = _get(doc, "converter", "root", False, {})
    converter = ConverterParams(
        r_l=float(conv_doc.get("r_l_ohm", 0.3)),
        l=float(conv_doc.get("l_h", 600e-6)),
        c_pv=float(conv_doc.get("c_pv_f", 100e-6)),
        v_out=float(conv_doc.get("v_out_v", 250.0)),
        f_sw=float(conv_doc.get("f_sw_hz", 20e3)),
    )

    ctl_doc = _get(doc, "controller", "root", False, {})
    det_doc = ctl_doc.get("detector", {})
    detector = DetectorConfig(
        psi_threshold=float(det_doc.get("psi_threshold", 0.001)),
        dv_arr_threshold=float(det_doc.get("dv_arr_threshold", 0.02)),
        dv_mod_threshold=float(det_doc.get("dv_mod_threshold", 0.02)),
        power_change_trigger=float(det_doc.get("power_change_trigger", 0.03)),
        periodic_trigger_s=float(det_doc.get("periodic_trigger_s", 5.0)),
        psi_probe_frac=float(det_doc.get("psi_probe_frac", 0.01)),
    )
    controller = ControllerConfig(
        detector=detector,
        po_period_s=float(ctl_doc.get("po_period_s", 0.02)),
        adc_period_s=float(ctl_doc.get("adc_period_s", 5e-4)),
        settle_s=float(ctl_doc.get("settle_s", 0.02)),
        ramp_rate_v_per_s=float(ctl_doc.get("ramp_rate_v_per_s", 4000.0)),
        po_step_v=float(ctl_doc.get("po_step_v", 1.0)),
        po_only=bool(ctl_doc.get("po_only", False)),
        v_cmd_max=converter.v_out,
    )

    noise_doc = _get(doc, "noise", "root", False, {})
    noise = MeasurementNoise(
        v_amplitude=float(noise_doc.get("v_amplitude_v", 0.0)),
        i_amplitude=float(noise_doc.get("i_amplitude_a", 0.0)),
    )

    scn = Scenario(
        name=str(doc.get("name", name)),
        n_series=n_series,
        n_parallel=n_parallel,
        sample_module=sample,
        events=tuple(events),
        horizon_s=float(_get(doc, "horizon_s", "root")),
        datasheet=datasheet,
        params=params,
        converter=converter,
        controller=controller,
        noise=noise,
        seed=int(doc.get("seed", 0)),
        dt_s=float(doc.get("dt_s", 5e-6)),
        v_ref_start=(
            float(doc["v_ref_start_v"]) if "v_ref_start_v" in doc else None
        ),
    )
    scn.validate()
    return scn


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(doc, name=path.stem)


# ---------------------------------------------------------------------------
# reference model construction
# ---------------------------------------------------------------------------


def build_reference_model(
    module: ModuleParams, n_series: int, n_parallel: int
) -> ReferenceModel:
    """Commission the controller references from the calibrated model.

    Probes the healthy array for its standard-condition MPP, the
    temperature slope of the MPP voltage, and the irradiance-correction
    table keyed by the MPP current ratio."""

    def mpp_at(cond: ModuleCondition) -> tuple[float, float]:
        spec = ArraySpec.uniform(module, n_series, n_parallel, cond)
        return oracle_gmpp(sweep_curve(spec, 0.02))

    v_sc, p_sc = mpp_at(ModuleCondition(1.0, 25.0))
    i_mpp_sc = p_sc / v_sc

    temps = (0.0, 25.0, 55.0)
    v_at_t = [mpp_at(ModuleCondition(1.0, t))[0] for t in temps]
    slope = np.polyfit(temps, v_at_t, 1)[0]
    rho = float(slope / v_sc)

    # residual-after-rho irradiance correction, one row per temperature
    t_rows = (0.0, 30.0, 60.0)
    s_grid = (0.07, 0.1, 0.14, 0.2, 0.3, 0.45, 0.65, 0.85, 1.0)
    ln_rows, dv_rows = [], []
    for t_row in t_rows:
        ln_ratios, dvs = [], []
        base = v_sc * (1.0 - abs(rho) * (t_row - 25.0))
        for s in s_grid:
            v_s, p_s = mpp_at(ModuleCondition(s, t_row))
            ln_ratios.append(math.log((p_s / v_s) / i_mpp_sc))
            dvs.append(v_s - base)
        order = np.argsort(ln_ratios)
        ln_rows.append(tuple(float(ln_ratios[j]) for j in order))
        dv_rows.append(tuple(float(dvs[j]) for j in order))

    stc = ModuleCondition(1.0, 25.0)
    from .pvmodel import module_current, module_open_circuit_voltage

    return ReferenceModel(
        v_mpp_arr_sc=v_sc,
        v_mpp_mod_sc=v_sc / n_series,
        rho_arr=rho,
        rho_mod=rho,
        v_oc_arr_rated=n_series * module_open_circuit_voltage(module, stc),
        i_sc_rated=n_parallel * module_current(module, stc, 0.0),
        i_mpp_arr_sc=i_mpp_sc,
        irr_t_rows=t_rows,
        irr_ln_ratio=tuple(ln_rows),
        irr_dv_arr=tuple(dv_rows),
    )


# ---------------------------------------------------------------------------
# static detection (criteria snapshot on the exact curve)
# ---------------------------------------------------------------------------


@dataclass
class StaticDetection:
    psi: float
    dv_arr_ratio: float
    dv_mod_ratio: float
    fired: tuple[bool, bool, bool]
    is_psc: bool
    v_rest: float
    v_mpp_arr_updated: float
    v_mpp_mod_updated: float

    def to_dict(self) -> dict:
        return {
            "psi_per_v": self.psi,
            "dv_arr_ratio": self.dv_arr_ratio,
            "dv_mod_ratio": self.dv_mod_ratio,
            "criteria_fired": list(self.fired),
            "psc": self.is_psc,
            "v_rest_v": self.v_rest,
            "v_mpp_arr_updated_v": self.v_mpp_arr_updated,
            "v_mpp_mod_updated_v": self.v_mpp_mod_updated,
        }


def _hill_climb(curve: PvCurve, v_start: float) -> float:
    """Local MPP voltage a P&O tracker starting at ``v_start`` settles on."""
    j = int(np.clip(np.searchsorted(curve.v, v_start), 1, len(curve.v) - 2))
    p = curve.p
    while 0 < j < len(p) - 1:
        if p[j + 1] > p[j]:
            j += 1
        elif p[j - 1] > p[j]:
            j -= 1
        else:
            break
    lo = curve.v[max(j - 1, 0)]
    hi = curve.v[min(j + 1, len(p) - 1)]
    from .solver import golden_section_max

    v_rest, _ = golden_section_max(lambda v: float(curve.power_at(v)), lo, hi, xtol=1e-3)
    return v_rest


def detect_pattern(
    spec: ArraySpec,
    ref: ReferenceModel,
    cfg: DetectorConfig = DetectorConfig(),
    s_prior: float | None = None,
    t_sample_override: float | None = None,
    curve: PvCurve | None = None,
) -> StaticDetection:
    """Evaluate the three detection criteria on the exact array curve.

    ``s_prior`` is the last known uniform irradiance fraction used for
    the reference irradiance correction (1.0 reproduces a shading onset
    from standard conditions); ``None`` assumes steady operation at the
    given pattern and reads the correction current off the curve itself.
    """
    if curve is None:
        curve = sweep_curve(spec, 0.01)
    s_idx, pos = spec.sample_module
    t_s = (
        t_sample_override
        if t_sample_override is not None
        else spec.conditions[s_idx][pos].temperature
    )

    v_start, _ = update_references(ref, t_s)
    v_rest = _hill_climb(curve, v_start)
    if s_prior is None:
        i_corr = float(curve.current_at(v_rest))
    else:
        i_corr = s_prior * ref.i_mpp_arr_sc
    v_arr_u, v_mod_u = update_references(ref, t_s, i_arr=i_corr)

    dv = cfg.probe_dv(v_arr_u)
    lo = (v_arr_u - dv, float(curve.power_at(v_arr_u - dv)))
    hi = (v_arr_u + dv, float(curve.power_at(v_arr_u + dv)))
    psi = compute_psi(lo, hi)

    dv_arr = (v_rest - v_arr_u) / v_arr_u
    i_str = string_current(spec, s_idx, v_arr_u)
    v_samp = module_voltage(
        spec.params_at(s_idx, pos), spec.conditions[s_idx][pos], i_str
    )
    dv_mod = (v_samp - v_mod_u) / v_mod_u

    fired = criteria_fired(psi, dv_arr, dv_mod, cfg)
    return StaticDetection(
        psi=float(psi),
        dv_arr_ratio=float(dv_arr),
        dv_mod_ratio=float(dv_mod),
        fired=fired,
        is_psc=any(fired),
        v_rest=float(v_rest),
        v_mpp_arr_updated=float(v_arr_u),
        v_mpp_mod_updated=float(v_mod_u),
    )


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass
class EventReport:
    index: int
    t_start: float
    t_end: float
    pattern: list[str]
    levels: list[list[float]]
    oracle_voltage: float
    oracle_power: float
    final_power: float
    efficiency: float
    detected: bool | None
    detection_latency_s: float | None
    psi: float | None
    dv_arr_ratio: float | None
    dv_mod_ratio: float | None
    scan_duration_s: float | None
    scan_ticks_up: int
    scan_ticks_down: int
    prunes: list[dict]
    v_e: float | None
    p_e: float | None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "t_start_s": self.t_start,
            "t_end_s": self.t_end,
            "pattern": self.pattern,
            "levels": self.levels,
            "oracle_voltage_v": self.oracle_voltage,
            "oracle_power_w": self.oracle_power,
            "final_power_w": self.final_power,
            "efficiency": self.efficiency,
            "detected": self.detected,
            "detection_latency_s": self.detection_latency_s,
            "psi_per_v": self.psi,
            "dv_arr_ratio": self.dv_arr_ratio,
            "dv_mod_ratio": self.dv_mod_ratio,
            "scan_duration_s": self.scan_duration_s,
            "scan_ticks_up": self.scan_ticks_up,
            "scan_ticks_down": self.scan_ticks_down,
            "prunes": self.prunes,
            "v_e_v": self.v_e,
            "p_e_w": self.p_e,
        }


@dataclass
class RunReport:
    scenario: str
    seed: int
    events: list[EventReport]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "events": [e.to_dict() for e in self.events],
        }


class _PlantCurve:
    """Uniform-grid current lookup for the integration inner loop."""

    __slots__ = ("ilist", "h", "n", "v_top")

    def __init__(self, curve: PvCurve, h: float = 0.01):
        voc = float(curve.v[-1])
        grid = np.arange(0.0, voc + 2 * h, h)
        vals = np.interp(grid, curve.v, curve.i, right=0.0)
        vals[grid >= voc] = 0.0
        self.ilist = vals.tolist()
        self.h = h
        self.n = len(self.ilist)
        self.v_top = (self.n - 2) * h

    def __call__(self, v: float) -> float:
        if v <= 0.0:
            return self.ilist[0]
        if v >= self.v_top:
            return 0.0
        x = v / self.h
        j = int(x)
        fr = x - j
        il = self.ilist
        return il[j] + (il[j + 1] - il[j]) * fr


_RAMP_MODES = (
    Mode.DETECT_SETTLE,
    Mode.DETECT_PROBE,
    Mode.SCAN_UP,
    Mode.SCAN_DOWN,
    Mode.SETTLE_TO_BEST,
)


def run_closed_loop(scn: Scenario) -> tuple[list[TraceRecord], RunReport]:
    """Simulate the full controller/converter/array loop over a scenario.

    Deterministic given the scenario seed.  The trace is sampled at the
    ADC cadence; the report is computed per shading-event window against
    the brute-force oracle of that window's curve."""
    scn.validate()
    module = resolve_module(scn)
    ref = build_reference_model(module, scn.n_series, scn.n_parallel)
    cfg = scn.controller
    conv = scn.converter
    dt = scn.dt_s
    adc = cfg.adc_period_s
    sub_per_tick = round(adc / dt)
    if abs(sub_per_tick * dt - adc) > 1e-12:
        raise ScenarioError("controller.adc_period_s must be a multiple of dt_s")
    n_ticks = round(scn.horizon_s / adc)

    noisy = scn.noise.v_amplitude > 0.0 or scn.noise.i_amplitude > 0.0
    rng = random.Random(scn.seed)

    # per-event plant data
    event_ticks = [round(e.t / adc) for e in scn.events]
    windows = []
    for k, e in enumerate(scn.events):
        grid = e.pattern.expand(scn.n_series)
        spec = ArraySpec(
            n_series=scn.n_series,
            n_parallel=scn.n_parallel,
            module=module,
            conditions=grid,
            sample_module=scn.sample_module,
        )
        curve = sweep_curve(spec, 0.01)
        v_star, p_star = oracle_gmpp(curve)
        windows.append(
            {
                "event": e,
                "spec": spec,
                "curve": curve,
                "plant": _PlantCurve(curve),
                "oracle": (v_star, p_star),
                "t_sample": grid[scn.sample_module[0]][scn.sample_module[1]].temperature,
                "tick_start": event_ticks[k],
                "tick_end": event_ticks[k + 1] if k + 1 < len(scn.events) else n_ticks,
            }
        )

    state = make_controller_state(ref, cfg, scn.v_ref_start)
    v = state.v_ref
    il = windows[0]["plant"](v)
    cmd_applied = state.v_ref

    inv_c = 1.0 / conv.c_pv
    inv_l = 1.0 / conv.l
    r_l = conv.r_l
    v_out = conv.v_out
    w_floor = (1.0 - 0.99) * v_out

    trace: list[TraceRecord] = []
    widx = 0
    cur = windows[0]["plant"]
    t_sample = windows[0]["t_sample"]
    spec_now = windows[0]["spec"]
    s_idx, pos = scn.sample_module

    for tick in range(n_ticks):
        if widx + 1 < len(windows) and tick >= windows[widx + 1]["tick_start"]:
            widx += 1
            cur = windows[widx]["plant"]
            t_sample = windows[widx]["t_sample"]
            spec_now = windows[widx]["spec"]
        t = tick * adc

        v_meas = v
        i_meas = cur(v)
        if noisy:
            v_meas += rng.uniform(-scn.noise.v_amplitude, scn.noise.v_amplitude)
            i_meas = max(i_meas + rng.uniform(-scn.noise.i_amplitude, scn.noise.i_amplitude), 0.0)
        if state.mode in (Mode.DETECT_SETTLE, Mode.DETECT_PROBE):
            i_str = string_current(spec_now, s_idx, max(v_meas, 0.0))
            v_samp = module_voltage(
                spec_now.params_at(s_idx, pos), spec_now.conditions[s_idx][pos], i_str
            )
        else:
            v_samp = math.nan
        m = Measurement(v=v_meas, i=i_meas, t=t, v_sample_mod=v_samp, t_sample_mod=t_sample)

        prev_cmd = cmd_applied
        new_ref, state = controller_tick(state, m, cfg, ref)
        slew = state.mode in _RAMP_MODES
        in_scan = state.mode in (Mode.SCAN_UP, Mode.SCAN_DOWN, Mode.SETTLE_TO_BEST)
        trace.append(
            TraceRecord(
                t=t,
                v_ref=new_ref,
                duty=duty_for_voltage(min(new_ref, v_out), v_out),
                v_pv=v_meas,
                i_pv=i_meas,
                p=v_meas * i_meas,
                mode=state.mode.value,
                p_e=state.best_p if in_scan else math.nan,
                v_e=state.best_v if in_scan else math.nan,
            )
        )
        cmd_applied = new_ref

        # integrate [t, t+adc): command slews linearly in ramp modes
        dcmd = (new_ref - prev_cmd) / sub_per_tick if slew else 0.0
        base = prev_cmd if slew else new_ref
        for k in range(sub_per_tick):
            cmd_mid = base + dcmd * (k + 0.5)
            w = cmd_mid if cmd_mid > w_floor else w_floor
            k1v = (cur(v) - il) * inv_c
            k1i = (v - r_l * il - w) * inv_l
            v2 = v + 0.5 * dt * k1v
            i2 = il + 0.5 * dt * k1i
            k2v = (cur(v2) - i2) * inv_c
            k2i = (v2 - r_l * i2 - w) * inv_l
            v3 = v + 0.5 * dt * k2v
            i3 = il + 0.5 * dt * k2i
            k3v = (cur(v3) - i3) * inv_c
            k3i = (v3 - r_l * i3 - w) * inv_l
            v4 = v + dt * k3v
            i4 = il + dt * k3i
            k4v = (cur(v4) - i4) * inv_c
            k4i = (v4 - r_l * i4 - w) * inv_l
            v += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            il += dt / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
            if il < 0.0:
                il = 0.0
            if v < 0.0:
                v = 0.0

    report = _build_report(scn, windows, trace, state, adc)
    return trace, report


def _build_report(scn, windows, trace, state: ControllerState, adc: float) -> RunReport:
    events = []
    for k, w in enumerate(windows):
        t0 = w["tick_start"] * adc
        t1 = w["tick_end"] * adc
        rows = trace[w["tick_start"] : w["tick_end"]]
        ts = np.array([r.t for r in rows])
        ps = np.array([r.p for r in rows])
        v_star, p_star = w["oracle"]
        eff = float(_trapz(ps, ts) / (p_star * (t1 - t0))) if len(rows) > 1 else 0.0

        tail = max(3 * scn.controller.po_period_s, 0.06)
        tail = min(tail, 0.5 * (t1 - t0))
        tail_mask = ts >= t1 - tail
        final_power = float(ps[tail_mask].mean()) if tail_mask.any() else float("nan")

        det = next((d for d in state.detections if t0 <= d.t < t1), None)
        ep = next((e for e in state.episodes if t0 <= e.t_start < t1), None)
        events.append(
            EventReport(
                index=k,
                t_start=t0,
                t_end=t1,
                pattern=w["event"].pattern.as_strings(),
                levels=[[c.irradiance, c.temperature] for c in w["event"].pattern.levels],
                oracle_voltage=v_star,
                oracle_power=p_star,
                final_power=final_power,
                efficiency=eff,
                detected=det.is_psc if det else None,
                detection_latency_s=det.t - t0 if det else None,
                psi=det.psi if det else None,
                dv_arr_ratio=det.dv_arr_ratio if det else None,
                dv_mod_ratio=det.dv_mod_ratio if det else None,
                scan_duration_s=(
                    ep.scan_duration_s if ep and math.isfinite(ep.t_arrived) else None
                ),
                scan_ticks_up=ep.ticks_up if ep else 0,
                scan_ticks_down=ep.ticks_down if ep else 0,
                prunes=[
                    {"kind": p.kind, "t_s": p.t, "v_v": p.v, "i_a": p.i, "p_e_w": p.p_e}
                    for p in (ep.prunes if ep else [])
                ],
                v_e=ep.v_e if ep else None,
                p_e=ep.p_e if ep else None,
            )
        )
    return RunReport(scenario=scn.name, seed=scn.seed, events=events)


def prune_violations(curve: PvCurve, prunes: list[dict], rel_tol: float = 1e-6) -> list[dict]:
    """Replay pruning decisions against the oracle curve.

    Returns the prune events whose skipped voltage region contains a
    true power above the incumbent best at prune time."""
    bad = []
    for p in prunes:
        if p["kind"] == "up":
            mask = curve.v > p["v_v"]
        else:
            mask = curve.v < p["v_v"]
        if not mask.any():
            continue
        skipped_max = float(curve.p[mask].max())
        if skipped_max > p["p_e_w"] * (1.0 + rel_tol):
            bad.append({**p, "skipped_max_w": skipped_max})
    return bad


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return format(x, ".10g")


def emit_trace(trace: list[TraceRecord], path: str | Path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            fh.write(TRACE_HEADER + "\n")
            for r in trace:
                fh.write(
                    ",".join(
                        (
                            _fmt(r.t),
                            _fmt(r.v_ref),
                            _fmt(r.duty),
                            _fmt(r.v_pv),
                            _fmt(r.i_pv),
                            _fmt(r.p),
                            r.mode,
                            _fmt(r.p_e),
                            _fmt(r.v_e),
                        )
                    )
                    + "\n"
                )
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def emit_report(report: RunReport, path: str | Path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# canonical scenarios and randomized corpus
# ---------------------------------------------------------------------------


def benchmark_scenario(
    pattern_no: int,
    onset_t: float = 0.3,
    horizon: float = 0.9,
    po_only: bool = False,
    dt: float = 2e-5,
    prior_pattern: tuple[str, ...] | None = None,
) -> Scenario:
    """Shading onset scenario: uniform standard start, one benchmark pattern."""
    from .pvmodel import ND195R1S

    start_levels = ((1.0, 25.0), (0.6, 25.0), (0.3, 25.0))
    start = ShadingPattern.parse(["5-0-0"] * 3, start_levels)
    events = [TimelineEvent(0.0, start)]
    if prior_pattern is not None:
        events.append(
            TimelineEvent(onset_t, ShadingPattern.parse(list(prior_pattern), BENCHMARK_LEVELS))
        )
        onset_t = onset_t + 0.45
        horizon = max(horizon, onset_t + 0.5)
    events.append(
        TimelineEvent(
            onset_t, ShadingPattern.parse(list(BENCHMARK_PATTERNS[pattern_no]), BENCHMARK_LEVELS)
        )
    )
    return Scenario(
        name=f"benchmark-psc{pattern_no}" + ("-po" if po_only else ""),
        n_series=5,
        n_parallel=3,
        sample_module=BENCHMARK_SAMPLE,
        events=tuple(events),
        horizon_s=horizon,
        datasheet=ND195R1S,
        seed=0,
        dt_s=dt,
        controller=ControllerConfig(po_only=po_only),
    )


def random_scenario(seed: int, index: int) -> Scenario:
    """One randomized corpus scenario on the 3x5 reference array."""
    from .pvmodel import ND195R1S

    rnd = random.Random((seed << 20) ^ index)
    s0 = rnd.uniform(0.5, 1.0)
    t0 = rnd.uniform(15.0, 45.0)
    start = ShadingPattern.parse(
        ["5-0-0"] * 3, ((s0, t0), (s0, t0), (s0, t0))
    )
    events = [TimelineEvent(0.0, start)]
    n_psc = rnd.choice((1, 1, 2))
    t = 0.4
    for _ in range(n_psc):
        s1 = rnd.uniform(0.55, 1.0)
        s2 = max(s1 * rnd.uniform(0.35, 0.9), 0.1)
        s3 = max(s1 * rnd.uniform(0.1, 0.6), 0.1)
        levels = (
            (s1, t0 + rnd.uniform(0.0, 10.0)),
            (s2, t0 + rnd.uniform(0.0, 6.0)),
            (s3, t0),
        )
        strings = []
        for _s in range(3):
            n1 = rnd.randint(0, 5)
            n2 = rnd.randint(0, 5 - n1)
            n3 = 5 - n1 - n2
            strings.append(f"{n1}-{n2}-{n3}")
        events.append(TimelineEvent(round(t, 4), ShadingPattern.parse(strings, levels)))
        t += 0.45
    scn = Scenario(
        name=f"corpus-{index:04d}",
        n_series=5,
        n_parallel=3,
        sample_module=BENCHMARK_SAMPLE,
        events=tuple(events),
        horizon_s=round(t, 4),
        datasheet=ND195R1S,
        seed=seed + index,
        dt_s=2e-5,
    )
    return scn


def _corpus_worker(args: tuple[int, int]) -> dict:
    seed, index = args
    scn = random_scenario(seed, index)
    _, report = run_closed_loop(scn)
    out = report.to_dict()
    out["name"] = scn.name
    return out


def run_corpus(seed: int, count: int, jobs: int = 1) -> dict:
    """Run a seeded randomized scenario batch and aggregate the metrics."""
    args = [(seed, i) for i in range(count)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_corpus_worker, args))
    else:
        reports = [_corpus_worker(a) for a in args]

    events = [e for r in reports for e in r["events"]]
    within = [
        e for e in events if e["final_power_w"] >= 0.99 * e["oracle_power_w"]
    ]
    worst = sorted(events, key=lambda e: e["final_power_w"] / e["oracle_power_w"])[:5]
    return {
        "seed": seed,
        "count": count,
        "events_total": len(events),
        "events_within_1pct": len(within),
        "fraction_within_1pct": len(within) / len(events) if events else 0.0,
        "worst_events": [
            {
                "scenario": w["index"],
                "ratio": w["final_power_w"] / w["oracle_power_w"],
                "pattern": w["pattern"],
            }
            for w in worst
        ],
        "reports": reports,
    }
