"""MPPT controller: P&O tracking, shading detection, ramp-scan search.

The controller is a sampled-time state machine emitting open-loop voltage
commands.  Under uniform irradiance it perturb-and-observes around the
maximum power point.  Detection is entered on a noticeable power change
or periodically, and evaluates three criteria against reference values
updated from the sample-module temperature (and the last known uniform
operating current):

  1. |PSI| > psi_threshold, where PSI is the normalized power derivative
     measured at the updated array MPP reference voltage,
  2. relative distance between the P&O resting voltage and the updated
     array reference,
  3. relative distance between the sample-module voltage (with the array
     held at the updated reference) and the updated module reference.

A positive verdict starts the global search: a constant-rate ramp sweep
up to the rated open-circuit voltage and back down to the updated module
MPP voltage, continuously sampling and keeping the best (V_e, P_e).
Both legs terminate early when no unexplored voltage can beat P_e
(V_oc*I < P_e going up, V*I_sc_rated < P_e going down).  The command then
ramps to V_e and P&O resumes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .pvmodel import ValidationError


class Mode(str, Enum):
    PO = "po"
    DETECT_SETTLE = "detect_settle"
    DETECT_PROBE = "detect_probe"
    SCAN_UP = "scan_up"
    SCAN_DOWN = "scan_down"
    SETTLE_TO_BEST = "settle_best"


# detection sub-phases (all within DETECT_SETTLE / DETECT_PROBE modes)
_GOTO_REF, _TRIM_REF, _GOTO_LO, _GOTO_HI = range(4)


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds and probe geometry of the shading detector."""

    psi_threshold: float = 0.001  # 1/V
    dv_arr_threshold: float = 0.02
    dv_mod_threshold: float = 0.02
    power_change_trigger: float = 0.03  # fraction of last power
    periodic_trigger_s: float = 5.0
    psi_probe_frac: float = 0.01  # probe half-width as fraction of V_mpp-arr
    psi_probe_dv: float | None = None  # absolute override [V]

    def probe_dv(self, v_mpp_arr: float) -> float:
        if self.psi_probe_dv is not None:
            return self.psi_probe_dv
        return self.psi_probe_frac * v_mpp_arr

    def __post_init__(self) -> None:
        if min(self.psi_threshold, self.dv_arr_threshold, self.dv_mod_threshold) <= 0:
            raise ValidationError("detector thresholds must be positive")
        if self.psi_probe_dv is not None and self.psi_probe_dv <= 0:
            raise ValidationError("psi_probe_dv must be positive")


@dataclass(frozen=True)
class ControllerConfig:
    detector: DetectorConfig = DetectorConfig()
    po_period_s: float = 0.02  # >= converter settling time
    adc_period_s: float = 5e-4  # measurement conversion time
    settle_s: float = 0.02  # wait before trusting a probe measurement
    ramp_rate_v_per_s: float = 4000.0
    po_step_v: float = 1.0
    po_only: bool = False  # baseline: never detect, never scan
    v_cmd_max: float = 250.0

    def __post_init__(self) -> None:
        if self.po_period_s < self.adc_period_s:
            raise ValidationError("po_period_s must be >= adc_period_s")
        if self.ramp_rate_v_per_s <= 0 or self.po_step_v <= 0:
            raise ValidationError("rates and steps must be positive")


@dataclass(frozen=True)
class ReferenceModel:
    """Controller-side knowledge of the healthy (uniform) array.

    Built once from the calibrated plant model at commissioning time:
    standard-condition MPP voltages, their temperature coefficients, the
    rated open-circuit voltage and short-circuit current used by the
    scan pruning rules, and an optional irradiance-correction table.
    The table rows (one per commissioning temperature) map the measured
    MPP current ratio ln(I/I_mpp_sc) to the residual array MPP voltage
    shift left after the temperature update; lookups interpolate
    linearly between rows.
    """

    v_mpp_arr_sc: float
    v_mpp_mod_sc: float
    rho_arr: float  # fraction per degC, negative
    rho_mod: float  # fraction per degC, negative
    v_oc_arr_rated: float
    i_sc_rated: float
    i_mpp_arr_sc: float
    irr_t_rows: tuple[float, ...] = ()
    irr_ln_ratio: tuple[tuple[float, ...], ...] = ()
    irr_dv_arr: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.rho_arr > 0 or self.rho_mod > 0:
            raise ValidationError("temperature coefficients must be negative")
        if not (len(self.irr_t_rows) == len(self.irr_ln_ratio) == len(self.irr_dv_arr)):
            raise ValidationError("irradiance table rows must match")


@dataclass(frozen=True)
class Measurement:
    """One ADC conversion: array terminals plus the instrumented module."""

    v: float
    i: float
    t: float
    v_sample_mod: float = math.nan
    t_sample_mod: float = 25.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.v) and math.isfinite(self.i)):
            raise ValidationError("measurements must be finite")
        if self.i < -1e-9:
            raise ValidationError("array current cannot be negative")

    @property
    def p(self) -> float:
        return self.v * self.i


def update_references(
    ref: ReferenceModel, t_sample_c: float, i_arr: float | None = None
) -> tuple[float, float]:
    """Temperature-updated MPP references (array, module).

    Hotter modules have lower MPP voltages.  When the last known uniform
    operating current is supplied, the slight irradiance dependence of
    the references is corrected through the commissioning table (the
    shift scales with absolute temperature like the diode voltage).
    """
    k_arr = 1.0 - abs(ref.rho_arr) * (t_sample_c - 25.0)
    k_mod = 1.0 - abs(ref.rho_mod) * (t_sample_c - 25.0)
    v_arr = ref.v_mpp_arr_sc * k_arr
    v_mod = ref.v_mpp_mod_sc * k_mod
    if i_arr is not None and ref.irr_t_rows:
        ratio = max(i_arr, 1e-6 * ref.i_mpp_arr_sc) / ref.i_mpp_arr_sc
        ln_r = math.log(ratio)

        def row_dv(k: int) -> float:
            lr = ref.irr_ln_ratio[k]
            return float(np.interp(min(max(ln_r, lr[0]), lr[-1]), lr, ref.irr_dv_arr[k]))

        rows = ref.irr_t_rows
        if t_sample_c <= rows[0]:
            j0, j1 = 0, min(1, len(rows) - 1)
        elif t_sample_c >= rows[-1]:
            j0, j1 = max(len(rows) - 2, 0), len(rows) - 1
        else:
            j1 = next(j for j, tr in enumerate(rows) if tr >= t_sample_c)
            j0 = j1 - 1
        if j0 == j1:
            dv = row_dv(j0)
        else:
            frac = (t_sample_c - rows[j0]) / (rows[j1] - rows[j0])
            dv = row_dv(j0) + frac * (row_dv(j1) - row_dv(j0))
        v_arr += dv
        v_mod += dv * ref.v_mpp_mod_sc / ref.v_mpp_arr_sc
    return v_arr, v_mod


def compute_psi(p_minus: tuple[float, float], p_plus: tuple[float, float]) -> float:
    """Normalized power slope from two probe points straddling the reference.

    PSI = dP / (dV * P) with P the mean probe power; units 1/V."""
    v1, pw1 = p_minus
    v2, pw2 = p_plus
    p_mid = 0.5 * (pw1 + pw2)
    if p_mid <= 0.0:
        raise ValidationError("array dark: probe power is not positive")
    if v2 == v1:
        raise ValidationError("probe points must differ in voltage")
    return (pw2 - pw1) / ((v2 - v1) * p_mid)


def criteria_fired(
    psi: float, v_local_err: float, v_mod_err: float, cfg: DetectorConfig
) -> tuple[bool, bool, bool]:
    return (
        bool(abs(psi) > cfg.psi_threshold),
        bool(abs(v_local_err) > cfg.dv_arr_threshold),
        bool(abs(v_mod_err) > cfg.dv_mod_threshold),
    )


def detect_psc(
    psi: float, v_local_err: float, v_mod_err: float, cfg: DetectorConfig
) -> bool:
    """Partial shading verdict: true iff at least one criterion fires."""
    return any(criteria_fired(psi, v_local_err, v_mod_err, cfg))


@dataclass
class DetectionOutcome:
    t: float
    psi: float
    dv_arr_ratio: float  # signed
    dv_mod_ratio: float  # signed
    fired: tuple[bool, bool, bool]
    is_psc: bool
    v_mpp_arr_updated: float
    v_mpp_mod_updated: float


@dataclass
class PruneEvent:
    kind: str  # "up" (V_oc*I < P_e) | "down" (V*I_sc < P_e)
    t: float
    v: float
    i: float
    p_e: float


@dataclass
class ScanEpisode:
    t_start: float
    t_end: float = math.nan
    t_arrived: float = math.nan  # command reached V_e
    v_e: float = math.nan
    p_e: float = math.nan
    ticks_up: int = 0
    ticks_down: int = 0
    max_sampled_p: float = 0.0
    prunes: list[PruneEvent] = field(default_factory=list)

    @property
    def scan_duration_s(self) -> float:
        return self.t_arrived - self.t_start


@dataclass
class ControllerState:
    """Mutable controller memory; one instance per plant."""

    mode: Mode = Mode.PO
    v_ref: float = 0.0
    best_v: float = math.nan
    best_p: float = -math.inf
    po_direction: int = 1
    last_power: float = math.nan
    # timers / scheduling
    next_po_t: float = 0.0
    t_last_detect: float = 0.0
    settle_until: float = math.nan
    # P&O rest estimation (one oscillation cycle)
    rest_v: deque = field(default_factory=lambda: deque(maxlen=4))
    rest_i: deque = field(default_factory=lambda: deque(maxlen=4))
    uic_current: float = math.nan
    believed_uic: bool = True
    # detection sequence
    detect_phase: int = -1
    detect_t0: float = math.nan
    detect_v_rest: float = math.nan
    detect_v_arr_upd: float = math.nan
    detect_v_mod_upd: float = math.nan
    detect_dv_mod: float = math.nan
    detect_center_cmd: float = math.nan
    detect_probe_lo: tuple[float, float] | None = None
    detect_seed: tuple[float, float] | None = None
    slew_target: float = math.nan
    # scan bookkeeping
    scan_floor_v: float = math.nan
    settle_cmd_offset: float = 0.0
    episode: ScanEpisode | None = None
    episodes: list[ScanEpisode] = field(default_factory=list)
    detections: list[DetectionOutcome] = field(default_factory=list)


def make_controller_state(
    ref: ReferenceModel, cfg: ControllerConfig, v_start: float | None = None
) -> ControllerState:
    s = ControllerState()
    s.v_ref = ref.v_mpp_arr_sc if v_start is None else v_start
    s.next_po_t = cfg.po_period_s
    s.uic_current = ref.i_mpp_arr_sc
    return s


def po_step(state: ControllerState, m: Measurement, step_v: float) -> ControllerState:
    """One perturb-and-observe update at the P&O cadence."""
    p = m.p
    if math.isfinite(state.last_power) and p < state.last_power:
        state.po_direction = -state.po_direction
    state.v_ref += state.po_direction * step_v
    state.v_ref = max(state.v_ref, 0.0)
    state.last_power = p
    state.rest_v.append(m.v)
    state.rest_i.append(m.i)
    return state


def scan_step(
    state: ControllerState,
    m: Measurement,
    ref: ReferenceModel,
    ramp_rate: float,
    adc_period: float,
) -> ControllerState:
    """One ramp-scan update at the ADC cadence.

    Updates the incumbent (V_e, P_e), advances the ramp command, and
    applies the search-pruning terminations."""
    p_s = m.p
    ep = state.episode
    if ep is not None:
        ep.max_sampled_p = max(ep.max_sampled_p, p_s)
    if p_s > state.best_p:
        state.best_v, state.best_p = m.v, p_s

    dv = ramp_rate * adc_period
    if state.mode is Mode.SCAN_UP:
        if ep is not None:
            ep.ticks_up += 1
        at_ceiling = m.v >= ref.v_oc_arr_rated or state.v_ref >= ref.v_oc_arr_rated
        pruned = ref.v_oc_arr_rated * m.i < state.best_p
        if at_ceiling or pruned:
            if pruned and not at_ceiling and ep is not None:
                ep.prunes.append(PruneEvent("up", m.t, m.v, m.i, state.best_p))
            state.mode = Mode.SCAN_DOWN
        else:
            state.v_ref = min(state.v_ref + dv, ref.v_oc_arr_rated)
    elif state.mode is Mode.SCAN_DOWN:
        if ep is not None:
            ep.ticks_down += 1
        at_floor = m.v <= state.scan_floor_v or state.v_ref <= state.scan_floor_v
        pruned = m.v * ref.i_sc_rated < state.best_p
        if at_floor or pruned:
            if pruned and not at_floor and ep is not None:
                ep.prunes.append(PruneEvent("down", m.t, m.v, m.i, state.best_p))
            state.mode = Mode.SETTLE_TO_BEST
            state.settle_cmd_offset = min(max(m.v - state.v_ref, -20.0), 20.0)
            state.slew_target = max(state.best_v - state.settle_cmd_offset, 0.0)
            state.settle_until = math.nan
        else:
            state.v_ref = max(state.v_ref - dv, 0.0)
    return state


def _begin_detection(state: ControllerState, m: Measurement, cfg: ControllerConfig, ref: ReferenceModel) -> None:
    state.detect_t0 = m.t
    state.detect_v_rest = (
        sum(state.rest_v) / len(state.rest_v) if state.rest_v else m.v
    )
    i_corr = state.uic_current if math.isfinite(state.uic_current) else None
    v_arr_u, v_mod_u = update_references(ref, m.t_sample_mod, i_arr=i_corr)
    state.detect_v_arr_upd = v_arr_u
    state.detect_v_mod_upd = v_mod_u
    state.detect_phase = _GOTO_REF
    state.slew_target = min(v_arr_u, cfg.v_cmd_max)
    state.settle_until = math.nan
    state.mode = Mode.DETECT_SETTLE


def _finish_detection(
    state: ControllerState, m: Measurement, cfg: ControllerConfig, ref: ReferenceModel,
    probe_hi: tuple[float, float],
) -> None:
    det = cfg.detector
    psi = compute_psi(state.detect_probe_lo, probe_hi)
    dv_arr = (state.detect_v_rest - state.detect_v_arr_upd) / state.detect_v_arr_upd
    dv_mod = state.detect_dv_mod
    fired = criteria_fired(psi, dv_arr, dv_mod, det)
    is_psc = any(fired)
    state.detections.append(
        DetectionOutcome(
            t=m.t,
            psi=psi,
            dv_arr_ratio=dv_arr,
            dv_mod_ratio=dv_mod,
            fired=fired,
            is_psc=is_psc,
            v_mpp_arr_updated=state.detect_v_arr_upd,
            v_mpp_mod_updated=state.detect_v_mod_upd,
        )
    )
    state.t_last_detect = m.t
    state.detect_phase = -1
    if is_psc:
        state.believed_uic = False
        seed_v, seed_p = state.detect_seed
        state.best_v, state.best_p = seed_v, seed_p
        state.scan_floor_v = state.detect_v_mod_upd
        state.episode = ScanEpisode(t_start=m.t)
        state.mode = Mode.SCAN_UP
    else:
        state.believed_uic = True
        state.v_ref = state.detect_center_cmd
        state.mode = Mode.PO
        state.last_power = m.p
        state.next_po_t = m.t + cfg.po_period_s


def _detect_tick(state: ControllerState, m: Measurement, cfg: ControllerConfig, ref: ReferenceModel) -> None:
    """Advance the detection sequence: reach the reference, trim the
    open-loop offset, read the sample module, probe PSI on both sides."""
    dv_cmd = cfg.ramp_rate_v_per_s * cfg.adc_period_s
    if not math.isnan(state.slew_target):
        delta = state.slew_target - state.v_ref
        if abs(delta) > dv_cmd:
            state.v_ref += math.copysign(dv_cmd, delta)
            return
        state.v_ref = state.slew_target
        state.slew_target = math.nan
        state.settle_until = m.t + cfg.settle_s
        return
    if math.isfinite(state.settle_until) and m.t < state.settle_until:
        return
    state.settle_until = math.nan

    det = cfg.detector
    probe_dv = det.probe_dv(state.detect_v_arr_upd)
    phase = state.detect_phase
    if phase == _GOTO_REF:
        # one open-loop trim so the measured array voltage lands on the
        # reference despite the r_L*i_L steady-state offset
        state.detect_phase = _TRIM_REF
        state.slew_target = max(state.v_ref + (state.detect_v_arr_upd - m.v), 0.0)
    elif phase == _TRIM_REF:
        state.detect_center_cmd = state.v_ref
        state.detect_dv_mod = (
            (m.v_sample_mod - state.detect_v_mod_upd) / state.detect_v_mod_upd
        )
        state.detect_seed = (m.v, m.p)
        state.detect_phase = _GOTO_LO
        state.mode = Mode.DETECT_PROBE
        state.slew_target = max(state.detect_center_cmd - probe_dv, 0.0)
    elif phase == _GOTO_LO:
        state.detect_probe_lo = (m.v, m.p)
        state.detect_phase = _GOTO_HI
        state.slew_target = state.detect_center_cmd + probe_dv
    elif phase == _GOTO_HI:
        _finish_detection(state, m, cfg, ref, (m.v, m.p))


def controller_tick(
    state: ControllerState,
    m: Measurement,
    cfg: ControllerConfig,
    ref: ReferenceModel,
) -> tuple[float, ControllerState]:
    """Advance the controller by one ADC sample; returns the new command.

    P&O acts at its own (slower) cadence; detection and scanning act on
    every sample.  Detection is entered from P&O on a noticeable power
    change or periodically."""
    mode = state.mode
    if mode is Mode.PO:
        if m.t + 1e-12 >= state.next_po_t:
            state.next_po_t = m.t + cfg.po_period_s
            trigger = False
            if not cfg.po_only:
                if (
                    math.isfinite(state.last_power)
                    and abs(m.p - state.last_power)
                    > cfg.detector.power_change_trigger * max(state.last_power, 1e-9)
                ):
                    trigger = True
                elif m.t - state.t_last_detect >= cfg.detector.periodic_trigger_s:
                    trigger = True
            if trigger:
                _begin_detection(state, m, cfg, ref)
            else:
                po_step(state, m, cfg.po_step_v)
                if state.believed_uic and len(state.rest_i) == state.rest_i.maxlen:
                    state.uic_current = sum(state.rest_i) / len(state.rest_i)
    elif mode in (Mode.DETECT_SETTLE, Mode.DETECT_PROBE):
        _detect_tick(state, m, cfg, ref)
    elif mode in (Mode.SCAN_UP, Mode.SCAN_DOWN):
        scan_step(state, m, ref, cfg.ramp_rate_v_per_s, cfg.adc_period_s)
    elif mode is Mode.SETTLE_TO_BEST:
        dv_cmd = cfg.ramp_rate_v_per_s * cfg.adc_period_s
        if not math.isnan(state.slew_target):
            delta = state.slew_target - state.v_ref
            if abs(delta) > dv_cmd:
                state.v_ref += math.copysign(dv_cmd, delta)
            else:
                state.v_ref = state.slew_target
                state.slew_target = math.nan
                state.settle_until = m.t + cfg.settle_s
                if state.episode is not None:
                    state.episode.t_arrived = m.t
        elif m.t + 1e-12 >= state.settle_until:
            ep = state.episode
            if ep is not None:
                ep.t_end = m.t
                ep.v_e, ep.p_e = state.best_v, state.best_p
                state.episodes.append(ep)
                state.episode = None
            state.mode = Mode.PO
            state.last_power = m.p
            state.po_direction = 1
            state.next_po_t = m.t + cfg.po_period_s
            state.rest_v.clear()
            state.rest_i.clear()

    state.v_ref = min(max(state.v_ref, 0.0), cfg.v_cmd_max)
    return state.v_ref, state
