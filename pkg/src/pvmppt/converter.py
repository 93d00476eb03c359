"""Averaged state-space model of the PV-side boost converter.

The converter couples the array to a stiff DC-link voltage and is driven
open loop by a voltage command translated to a duty cycle.  The averaged
(ripple-free) equations are

    C_pv * dv_pv/dt = i_array(v_pv) - i_L
    L    * di_L/dt  = v_pv - r_L*i_L - (1 - D)*v_out

integrated with fixed-step RK4.  The inductor current is clamped at zero
(ideal diode, discontinuous-conduction guard).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable

from .pvmodel import ArraySpec, ValidationError, array_current

MAX_DT = 2e-5  # stability margin at the reference plant parameters
MAX_DUTY = 0.99


@dataclass(frozen=True)
class ConverterParams:
    """Boost plant: inductor branch, PV-side capacitor, stiff output."""

    r_l: float = 0.3  # ohm
    l: float = 600e-6  # H
    c_pv: float = 100e-6  # F
    v_out: float = 250.0  # V, held constant
    f_sw: float = 20e3  # Hz, metadata only; the averaged model does not switch

    def __post_init__(self) -> None:
        if min(self.r_l, self.l, self.c_pv, self.v_out, self.f_sw) <= 0.0:
            raise ValidationError("converter parameters must be strictly positive")


@dataclass(frozen=True)
class ConverterState:
    v_pv: float
    i_l: float
    t: float = 0.0


@dataclass(frozen=True)
class CommandSegment:
    """One piece of the open-loop voltage command.

    ``hold`` jumps to ``target_v`` and stays there for ``duration_s``;
    ``ramp`` slews from the previous level to ``target_v`` at
    ``rate_v_per_s`` (duration implied).
    """

    kind: str  # "hold" | "ramp"
    target_v: float
    rate_v_per_s: float = 0.0
    duration_s: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("hold", "ramp"):
            raise ValidationError(f"unknown segment kind {self.kind!r}")
        if not math.isfinite(self.target_v):
            raise ValidationError("segment target must be finite")
        if self.kind == "ramp" and self.rate_v_per_s <= 0.0:
            raise ValidationError("ramp segments need a positive rate")
        if self.kind == "hold" and (self.duration_s is None or self.duration_s < 0.0):
            raise ValidationError("hold segments need a non-negative duration")


@dataclass(frozen=True)
class CommandSignal:
    segments: tuple[CommandSegment, ...]
    v_start: float = 0.0

    def validate_against(self, v_out: float) -> None:
        for seg in self.segments:
            if not (0.0 <= seg.target_v <= v_out):
                raise ValidationError(
                    f"command target {seg.target_v} outside [0, {v_out}]"
                )
        if not (0.0 <= self.v_start <= v_out):
            raise ValidationError("command start voltage outside [0, v_out]")


@dataclass(frozen=True)
class MeasurementNoise:
    """Zero-mean uniform sensor noise amplitudes (0 disables)."""

    v_amplitude: float = 0.0
    i_amplitude: float = 0.0


@dataclass
class TraceRecord:
    """One sampling instant of the simulated plant."""

    t: float
    v_ref: float
    duty: float
    v_pv: float
    i_pv: float
    p: float
    mode: str = ""
    p_e: float = math.nan
    v_e: float = math.nan


def duty_for_voltage(v_ref: float, v_out: float) -> float:
    """Duty command for a wanted input voltage: D = 1 - v_ref/v_out."""
    if not (0.0 <= v_ref <= v_out):
        raise ValidationError(f"v_ref {v_ref} outside [0, {v_out}]")
    return min(1.0 - v_ref / v_out, MAX_DUTY)


def _as_current_fn(array) -> Callable[[float], float]:
    if isinstance(array, ArraySpec):
        return lambda v: array_current(array, max(v, 0.0))
    if callable(array):
        return array
    raise ValidationError("array must be an ArraySpec or a current function i(v)")


def step_ode(
    s: ConverterState,
    duty: float,
    dt: float,
    array,
    params: ConverterParams = ConverterParams(),
) -> ConverterState:
    """One fixed-step RK4 advance of the averaged plant.

    ``array`` is the PV source: an :class:`ArraySpec` or any callable
    ``i(v)``.  The inductor current is clamped at zero after the step.
    """
    if dt > MAX_DT:
        raise ValidationError(f"dt {dt} above stability margin {MAX_DT}")
    i_of_v = _as_current_fn(array)
    w = (1.0 - duty) * params.v_out
    inv_c = 1.0 / params.c_pv
    inv_l = 1.0 / params.l
    r_l = params.r_l
    v, il = s.v_pv, s.i_l

    k1v = (i_of_v(v) - il) * inv_c
    k1i = (v - r_l * il - w) * inv_l
    v2, i2 = v + 0.5 * dt * k1v, il + 0.5 * dt * k1i
    k2v = (i_of_v(v2) - i2) * inv_c
    k2i = (v2 - r_l * i2 - w) * inv_l
    v3, i3 = v + 0.5 * dt * k2v, il + 0.5 * dt * k2i
    k3v = (i_of_v(v3) - i3) * inv_c
    k3i = (v3 - r_l * i3 - w) * inv_l
    v4, i4 = v + dt * k3v, il + dt * k3i
    k4v = (i_of_v(v4) - i4) * inv_c
    k4i = (v4 - r_l * i4 - w) * inv_l

    v_new = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    i_new = il + dt / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
    return ConverterState(v_pv=max(v_new, 0.0), i_l=max(i_new, 0.0), t=s.t + dt)


def _command_profile(
    command: CommandSignal,
) -> list[tuple[float, float, float, float]]:
    """Expand segments to (t_start, v_from, v_to, duration) pieces."""
    pieces = []
    t = 0.0
    v = command.v_start
    for seg in command.segments:
        if seg.kind == "hold":
            pieces.append((t, seg.target_v, seg.target_v, seg.duration_s))
            t += seg.duration_s
        else:
            dur = abs(seg.target_v - v) / seg.rate_v_per_s
            pieces.append((t, v, seg.target_v, dur))
            t += dur
        v = seg.target_v
    return pieces


def command_value(pieces, t: float) -> float:
    v = pieces[0][1] if pieces else 0.0
    for t0, v_from, v_to, dur in pieces:
        if t < t0:
            break
        if dur > 0.0 and t < t0 + dur:
            return v_from + (v_to - v_from) * (t - t0) / dur
        v = v_to
    return v


def run(
    command: CommandSignal,
    array,
    params: ConverterParams = ConverterParams(),
    sample_period: float = 5e-4,
    dt: float = 5e-6,
    state0: ConverterState | None = None,
    noise: MeasurementNoise | None = None,
    rng: random.Random | None = None,
) -> list[TraceRecord]:
    """Integrate the plant over an open-loop command and sample it.

    Measurements are instantaneous state reads; optional uniform sensor
    noise perturbs the recorded voltage/current only, never the state.
    """
    if sample_period < dt:
        raise ValidationError("sample_period must be >= dt")
    command.validate_against(params.v_out)
    i_of_v = _as_current_fn(array)
    pieces = _command_profile(command)
    horizon = sum(p[3] for p in pieces)
    n_steps = round(horizon / dt)
    per_sample = max(round(sample_period / dt), 1)

    if state0 is None:
        v0 = command_value(pieces, 0.0)
        state0 = ConverterState(v_pv=v0, i_l=i_of_v(v0), t=0.0)
    s = state0

    trace: list[TraceRecord] = []

    def record(state: ConverterState, v_cmd: float, duty: float) -> None:
        v_meas = state.v_pv
        i_meas = i_of_v(state.v_pv)
        if noise is not None and rng is not None:
            v_meas += rng.uniform(-noise.v_amplitude, noise.v_amplitude)
            i_meas += rng.uniform(-noise.i_amplitude, noise.i_amplitude)
        trace.append(
            TraceRecord(
                t=state.t,
                v_ref=v_cmd,
                duty=duty,
                v_pv=v_meas,
                i_pv=i_meas,
                p=v_meas * i_meas,
            )
        )

    for n in range(n_steps):
        t_mid = (n + 0.5) * dt
        v_cmd = command_value(pieces, t_mid)
        duty = duty_for_voltage(v_cmd, params.v_out)
        if n % per_sample == 0:
            record(s, command_value(pieces, n * dt), duty)
        s = step_ode(s, duty, dt, i_of_v, params)
        s = ConverterState(s.v_pv, s.i_l, t=(n + 1) * dt)
    if n_steps > 0:
        v_cmd = command_value(pieces, horizon)
        record(s, v_cmd, duty_for_voltage(v_cmd, params.v_out))
    return trace
