"""Closed-loop run: plate simulator + lock-in estimator + amplitude/phase servo.

The plant is integrated at 30 kHz.  Every sixth sample (5 kHz) the last six
Hall readings of each end are averaged, demodulated against the drive
carrier, and the two servo channels update:

* amplitude: centre amplitude ``|X1 + X2|`` against ``a_ref``; the command
  (metres) is divided by the unloaded centre gain to get the coil current
  amplitude shared by both coils;
* phase: ``angle(X2 conj(X1))`` against 0; the command is divided by the
  plate's phase sensitivity to get the phase offset of coil 2.

Coil 1 is the phase master.  Commands are held between control ticks while
the carrier itself runs continuously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import control as ctl
from .dsp import LockIn, design_lowpass_iir, phase_shifted
from .plant import (HALL_SIGMA_M, SAMPLE_RATE_HZ, PlantSimulator, PlateParams, Profile, SimTrace,
                    SimulationAborted, TouchScenario, heave_gain, phase_sensitivity)

DECIMATION = int(SAMPLE_RATE_HZ // ctl.CONTROL_RATE_HZ)


@dataclass
class LoopSettings:
    f_hz: float
    a_ref: float | Profile
    duration: float
    seed: int = 0
    noise_sigma: float = HALL_SIGMA_M
    bandwidth_hz: float = ctl.LOOP_BANDWIDTH_HZ
    cutoff_hz: float = ctl.ESTIMATOR_CUTOFF_HZ
    phase_control: bool = True
    # linear chirp from f_hz to sweep_to_hz over the run
    sweep_to_hz: float | None = None
    # additive Hall reading error e(t), see PlantSimulator
    sensor_error: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        if not 0 < self.f_hz < ctl.CONTROL_RATE_HZ / 2:
            raise ValueError(f"drive frequency {self.f_hz} Hz out of range")

    def a_ref_at(self, t: float) -> float:
        return float(self.a_ref(t)) if isinstance(self.a_ref, Profile) else float(self.a_ref)

    def frequency_at(self, t: float) -> float:
        if self.sweep_to_hz is None or self.duration == 0:
            return self.f_hz
        return self.f_hz + (self.sweep_to_hz - self.f_hz) * min(t / self.duration, 1.0)


@dataclass
class LoopResult:
    trace: SimTrace
    # one entry per control tick
    t_ctrl: np.ndarray
    f_ctrl: np.ndarray
    amp_est: np.ndarray
    phase_est: np.ndarray
    rel_phase: np.ndarray
    u_amp: np.ndarray
    u_phase: np.ndarray
    design: ctl.ControllerDesign = field(repr=False, default=None)


class FeedforwardTables:
    """Unloaded plant lookups on a dense log grid."""

    def __init__(self, params: PlateParams, f_lo: float = 5.0, f_hi: float = 1200.0, n: int = 600):
        f = np.logspace(math.log10(f_lo), math.log10(f_hi), n)
        self.heave = ctl.FrequencyResponseTable(f, heave_gain(params, f))
        self._logf = np.log(f)
        self._sens = phase_sensitivity(params, f)

    def heave_gain(self, f_hz: float) -> float:
        return abs(ctl.plant_feedforward(self.heave, f_hz))

    def phase_gain(self, f_hz: float) -> float:
        return float(np.interp(math.log(f_hz), self._logf, self._sens))


def decimation_gain(omega: float, dt: float, R: int = DECIMATION) -> float:
    """Gain of an R-sample mean on a sinusoid; the phase sits at the window centre."""
    h = omega * dt / 2
    if h == 0:
        return 1.0
    return math.sin(R * h) / (R * math.sin(h))


def run_closed_loop(params: PlateParams, scenario: TouchScenario, settings: LoopSettings,
                    tables: FeedforwardTables | None = None) -> LoopResult:
    rate = SAMPLE_RATE_HZ
    dt = 1.0 / rate
    n = int(round(settings.duration * rate))
    rng = np.random.default_rng(settings.seed)
    sim = PlantSimulator(params, scenario, n, rate, settings.noise_sigma, rng, sensor_error=settings.sensor_error)
    tables = tables or FeedforwardTables(params)

    f0 = settings.f_hz
    design = ctl.synthesize(f0, plant_gain=tables.heave_gain(f0), phase_gain=tables.phase_gain(f0),
                            bandwidth_hz=settings.bandwidth_hz, cutoff_hz=settings.cutoff_hz)
    amp_ch, ph_ch = design.channels(settings.a_ref_at(0.0))
    coeffs = design_lowpass_iir(design.filter_cutoff_hz, ctl.CONTROL_RATE_HZ)
    li1 = LockIn(f0, ctl.CONTROL_RATE_HZ, coeffs=coeffs)
    li2 = LockIn(f0, ctl.CONTROL_RATE_HZ, coeffs=coeffs)
    R = DECIMATION
    # estimated-amplitude floor below which the relative phase is not trusted
    noise_amp = settings.noise_sigma / math.sqrt(R) * math.sqrt(2 * design.filter_cutoff_hz / ctl.CONTROL_RATE_HZ)
    phase_floor = max(8.0 * noise_amp, 1e-12)
    use_phase = settings.phase_control and settings.sweep_to_hz is None

    n_ticks = n // R
    t_ctrl = np.arange(n_ticks) * R * dt
    f_ctrl = np.empty(n_ticks)
    amp_est = np.zeros(n_ticks)
    phase_est = np.full(n_ticks, np.nan)
    rel_phase = np.full(n_ticks, np.nan)
    u_amp = np.zeros(n_ticks)
    u_phase = np.zeros(n_ticks)
    a_cmd = np.zeros(n)
    ph_cmd = np.zeros(n)

    theta = 0.0
    cur_amp = 0.0
    cur_ph = 0.0
    steps = np.arange(R)
    try:
        for j in range(math.ceil(n / R)):
            k0 = j * R
            m = min(R, n - k0)
            f = settings.frequency_at(k0 * dt)
            omega = 2 * math.pi * f
            sl = slice(k0, k0 + m)
            sim.amp1[sl] = cur_amp
            sim.amp2[sl] = cur_amp
            sim.omega[sl] = omega
            sim.theta[sl] = theta + omega * dt * steps[:m]
            sim.ph2[sl] = math.radians(cur_ph)
            a_cmd[sl] = amp_ch.u
            ph_cmd[sl] = cur_ph
            hall = sim.advance(m)
            theta_mid = theta + omega * dt * (R - 1) / 2
            theta = math.fmod(theta + omega * dt * m, 2 * math.pi)
            if m < R:
                break
            g = decimation_gain(omega, dt, R)
            X1 = li1.update_at_phase(hall[:, 0].mean() / g, theta_mid)
            X2 = li2.update_at_phase(hall[:, 1].mean() / g, theta_mid)
            Xc = 0.5 * (X1 + X2)
            a_meas = 2 * abs(Xc)
            ph_meas = None
            if use_phase and 2 * abs(X1) > phase_floor and 2 * abs(X2) > phase_floor:
                ph_meas = phase_shifted(X2 * X1.conjugate())
                rel_phase[j] = ph_meas
            if Xc != 0:
                phase_est[j] = phase_shifted(Xc)
            amp_ch.reference = settings.a_ref_at((k0 + R) * dt)
            amp_ch.gain = tables.heave_gain(f)
            ph_ch.gain = tables.phase_gain(f)
            cur_amp, cur_ph = ctl.control_step(amp_ch, ph_ch, (a_meas, ph_meas))
            f_ctrl[j] = f
            amp_est[j] = a_meas
            u_amp[j] = amp_ch.u
            u_phase[j] = cur_ph
    except SimulationAborted as exc:
        exc.trace = sim.trace(a_cmd, ph_cmd)
        raise
    return LoopResult(sim.trace(a_cmd, ph_cmd), t_ctrl, f_ctrl, amp_est, phase_est, rel_phase, u_amp, u_phase,
                      design)
