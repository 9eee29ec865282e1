"""Loop-shaping synthesis and execution of the amplitude/phase servo.

The amplitude loop sees the plant through a feedforward table that
normalises it to unit gain, so the only modelled loop dynamics are the
estimator's low-pass ``L``.  Requiring the closed loop to equal a target
``T`` gives ``C = T / (1 - L T)``; that controller is reduced to 2nd order,
discretised with the bilinear transform and run once per control tick.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

from .dsp import AmplitudePhase

DRIVE_FREQUENCIES = (20.0, 31.0, 47.0, 72.0, 111.0, 170.0, 261.0, 400.0)
CONTROL_RATE_HZ = 5000.0
ESTIMATOR_CUTOFF_HZ = 10.0
LOOP_BANDWIDTH_HZ = 5.0


class SynthesisError(RuntimeError):
    pass


class ReductionError(SynthesisError):
    def __init__(self, message: str, mag_err_db: float, phase_err_deg: float):
        super().__init__(message)
        self.mag_err_db = mag_err_db
        self.phase_err_deg = phase_err_deg


def _trim(p) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    nz = np.flatnonzero(p)
    return p[nz[0]:] if nz.size else np.zeros(1)


@dataclass(frozen=True)
class ContinuousTF:
    """Rational transfer function in ``s``; coefficients in descending powers."""

    num: tuple[float, ...]
    den: tuple[float, ...]

    def __post_init__(self):
        num, den = _trim(self.num), _trim(self.den)
        if den[0] == 0:
            raise ValueError("denominator is identically zero")
        object.__setattr__(self, "num", tuple(float(v) for v in num))
        object.__setattr__(self, "den", tuple(float(v) for v in den))

    @property
    def order(self) -> int:
        return len(self.den) - 1

    @property
    def is_proper(self) -> bool:
        return len(self.num) <= len(self.den)

    def __call__(self, s):
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def freqresp(self, f_hz) -> np.ndarray:
        return self(2j * np.pi * np.asarray(f_hz, dtype=float))

    def poles(self) -> np.ndarray:
        return np.roots(self.den)

    def zeros(self) -> np.ndarray:
        return np.roots(self.num)

    def normalized(self) -> "ContinuousTF":
        a0 = self.den[0]
        return ContinuousTF(tuple(v / a0 for v in self.num), tuple(v / a0 for v in self.den))

    def integrator_count(self, tol: float = 1e-9) -> int:
        """Number of poles at the origin (trailing zero denominator terms)."""
        den = np.asarray(self.den)
        scale = np.max(np.abs(den))
        count = 0
        for v in den[::-1]:
            if abs(v) > tol * scale:
                break
            count += 1
        return count

    def low_frequency_gain(self) -> float:
        """DC gain, or ``lim s^k C(s)`` when there are ``k`` integrators."""
        k = self.integrator_count()
        num, den = np.asarray(self.num), np.asarray(self.den)
        den_red = den[: len(den) - k] if k else den
        return float(num[-1] / den_red[-1])


def butterworth2(cutoff_hz: float) -> ContinuousTF:
    w = 2 * np.pi * cutoff_hz
    return ContinuousTF((w * w,), (1.0, math.sqrt(2.0) * w, w * w))


def sensitivity_target(bandwidth_hz: float) -> ContinuousTF:
    """2nd-order Butterworth closed-loop target with -3 dB at ``bandwidth_hz``."""
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    return butterworth2(bandwidth_hz)


def filter_dynamics(cutoff_hz: float = ESTIMATOR_CUTOFF_HZ, rate_hz: float = CONTROL_RATE_HZ) -> ContinuousTF:
    """Continuous model of the estimator's digital Butterworth low-pass.

    The digital filter is designed with a prewarped cutoff, so this analog
    prototype maps exactly onto it under the bilinear transform.
    """
    warped = rate_hz / np.pi * math.tan(np.pi * cutoff_hz / rate_hz)
    return butterworth2(warped)


def solve_controller(T: ContinuousTF, L: ContinuousTF, tol: float = 1e-9) -> ContinuousTF:
    """Exact ``T / (1 - L T)`` without pole/zero cancellation.

    For 2nd-order ``T`` and ``L`` this is the 6th-order form.  A pole at the
    origin (integral action) is expected; right-half-plane poles are not.
    """
    nT, dT = np.array(T.num), np.array(T.den)
    nL, dL = np.array(L.num), np.array(L.den)
    inner = np.polysub(np.polymul(dL, dT), np.polymul(nL, nT))
    if np.allclose(inner, 0.0):
        raise SynthesisError("1 - L*T is identically zero")
    inner[np.abs(inner) < tol * np.max(np.abs(inner))] = 0.0
    num = np.polymul(nT, np.polymul(dL, dT))
    den = np.polymul(dT, inner)
    C = ContinuousTF(tuple(num), tuple(den))
    if not C.is_proper:
        raise SynthesisError(f"controller is improper: num degree {len(C.num) - 1} > den degree {C.order}")
    p = C.poles()
    scale = max(1.0, float(np.max(np.abs(p))))
    bad = p[p.real > tol * scale]
    if bad.size:
        raise SynthesisError(f"controller has right-half-plane poles {bad}")
    return C


@dataclass(frozen=True)
class ReducedController:
    tf: ContinuousTF
    mag_err_db: float
    phase_err_deg: float
    band_hz: tuple[float, float]


def response_error(A: ContinuousTF, B: ContinuousTF, f_hz) -> tuple[float, float]:
    """Worst magnitude (dB) and phase (deg) mismatch of A relative to B."""
    r = A.freqresp(f_hz) / B.freqresp(f_hz)
    return float(np.max(np.abs(20 * np.log10(np.abs(r))))), float(np.max(np.abs(np.degrees(np.angle(r)))))


def reduce_order(C: ContinuousTF, band_hz: tuple[float, float] = (0.1, 20.0),
                 max_mag_db: float = 1.0, max_phase_deg: float = 10.0,
                 n_grid: int = 400) -> ReducedController:
    """Least-squares 2nd-order fit of ``C`` on a log-spaced grid.

    The log grid itself weights the fit like 1/f.  The low-frequency
    asymptote is held exactly: the DC gain, or the integrator gain when
    ``C`` has a pole at the origin.
    """
    f = np.logspace(np.log10(band_hz[0]), np.log10(band_hz[1]), n_grid)
    if C.order <= 2:
        Cn = C.normalized()
        mag, ph = response_error(Cn, C, f)
        return ReducedController(Cn, mag, ph, band_hz)

    target = C.freqresp(f)
    s = 2j * np.pi * f
    g0 = C.low_frequency_gain()
    integ = C.integrator_count() > 0
    wc = 2 * np.pi * band_hz[1]

    if integ:
        # k (s^2 + b1 s + b0) / (s (s + a1)),  k b0 / a1 = g0
        def build(p):
            b1, b0, a1 = p[0] * wc, p[1] * wc**2, p[2] * wc
            k = g0 * a1 / b0
            return (k, k * b1, k * b0), (1.0, a1, 0.0)
        starts = [(b, c, a) for b in (-2.0, -0.5, 0.5, 2.0) for c in (0.5, 2.0, 8.0) for a in (0.2, 1.0, 3.0)]
    else:
        # (b2 s^2 + b1 s + g0 a0) / (s^2 + a1 s + a0)
        def build(p):
            b2, b1, a1, a0 = p[0], p[1] * wc, p[2] * wc, p[3] * wc**2
            return (b2 * g0, b1 * g0, g0 * a0), (1.0, a1, a0)
        starts = [(b2, b1, a, c) for b2 in (0.0, 1.0) for b1 in (-1.0, 1.0) for a in (0.5, 2.0) for c in (0.5, 2.0)]

    def residual(p):
        num, den = build(p)
        with np.errstate(all="ignore"):
            e = np.log((np.polyval(num, s) / np.polyval(den, s)) / target)
        if not np.all(np.isfinite(e)):
            return np.full(2 * f.size, 1e3)
        return np.concatenate([e.real, e.imag])

    best = None
    for p0 in starts:
        sol = optimize.least_squares(residual, p0, method="lm", max_nfev=4000)
        num, den = build(sol.x)
        if np.any(np.roots(den).real > 1e-9 * wc):
            continue
        if best is None or sol.cost < best[0]:
            best = (sol.cost, num, den)
    if best is None:
        raise ReductionError("no stable 2nd-order fit found", math.inf, math.inf)
    C2 = ContinuousTF(best[1], best[2])
    mag, ph = response_error(C2, C, f)
    if mag > max_mag_db or ph > max_phase_deg:
        raise ReductionError(f"2nd-order fit error {mag:.3f} dB / {ph:.2f} deg exceeds tolerance", mag, ph)
    return ReducedController(C2, mag, ph, band_hz)


class DiscreteBiquad:
    """``y = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2) x`` (transposed DF-II)."""

    def __init__(self, b0, b1, b2, a1, a2, rate_hz: float = CONTROL_RATE_HZ, allow_integrator: bool = True):
        self.b = (float(b0), float(b1), float(b2))
        self.a = (1.0, float(a1), float(a2))
        self.rate_hz = float(rate_hz)
        p = self.poles()
        r = np.abs(p)
        marginal = np.isclose(p, 1.0, atol=1e-9) if allow_integrator else np.zeros(p.shape, bool)
        if np.any((r >= 1.0 - 1e-12) & ~marginal) or np.any(r > 1.0 + 1e-9):
            raise ValueError(f"unstable biquad poles {p}")
        self.s1 = 0.0
        self.s2 = 0.0

    @property
    def coefficients(self) -> dict:
        return {"b0": self.b[0], "b1": self.b[1], "b2": self.b[2], "a1": self.a[1], "a2": self.a[2]}

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def response(self, f_hz) -> np.ndarray:
        zi = np.exp(-2j * np.pi * np.asarray(f_hz, dtype=float) / self.rate_hz)
        return np.polyval(self.b[::-1], zi) / np.polyval(self.a[::-1], zi)

    def peek(self, x: float) -> tuple[float, float, float]:
        """Output and next state for input ``x`` without committing."""
        b0, b1, b2 = self.b
        _, a1, a2 = self.a
        y = b0 * x + self.s1
        return y, b1 * x - a1 * y + self.s2, b2 * x - a2 * y

    def step(self, x: float) -> float:
        y, self.s1, self.s2 = self.peek(x)
        return y

    def reset(self) -> None:
        self.s1 = self.s2 = 0.0

    def copy(self) -> "DiscreteBiquad":
        out = DiscreteBiquad(*self.b, *self.a[1:], rate_hz=self.rate_hz)
        out.s1, out.s2 = self.s1, self.s2
        return out


def discretize_tustin(C: ContinuousTF, rate_hz: float = CONTROL_RATE_HZ) -> DiscreteBiquad:
    """Bilinear substitution ``s -> 2 rate (z - 1)/(z + 1)`` for order <= 2."""
    if not C.is_proper:
        raise ValueError("cannot discretise an improper transfer function")
    if C.order > 2:
        raise ValueError(f"order {C.order} > 2; reduce first")
    order = C.order
    K = 2.0 * rate_hz
    num = np.r_[np.zeros(order + 1 - len(C.num)), C.num]
    # c_k s^k -> c_k K^k (z-1)^k (z+1)^(order-k), highest power of z first
    b = np.zeros(order + 1)
    a = np.zeros(order + 1)
    for k in range(order + 1):
        term = np.polymul(np.poly(np.ones(k)), np.poly(-np.ones(order - k))) * K ** k
        b += num[order - k] * term
        a += C.den[order - k] * term
    b, a = b / a[0], a / a[0]
    b = np.r_[b, np.zeros(2 - order)]
    a = np.r_[a, np.zeros(2 - order)]
    return DiscreteBiquad(b[0], b[1], b[2], a[1], a[2], rate_hz=rate_hz)


@dataclass
class FrequencyResponseTable:
    """Complex plant gain sampled on an increasing frequency grid."""

    freqs_hz: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        self.freqs_hz = np.asarray(self.freqs_hz, dtype=float)
        self.gains = np.asarray(self.gains, dtype=complex)
        if self.freqs_hz.ndim != 1 or self.freqs_hz.shape != self.gains.shape:
            raise ValueError("frequency and gain arrays must be 1-D and equal length")
        if np.any(np.diff(self.freqs_hz) <= 0):
            raise ValueError("table frequencies must be strictly increasing")
        if not np.all(np.isfinite(self.gains)) or np.any(self.gains == 0):
            raise ValueError("table gains must be finite and nonzero")
        self._logf = np.log(self.freqs_hz)
        self._logmag = np.log(np.abs(self.gains))
        self._phase = np.unwrap(np.angle(self.gains))


def plant_feedforward(table: FrequencyResponseTable, f_hz: float) -> complex:
    """Interpolate the table linearly in log-frequency (log-magnitude, unwrapped phase)."""
    lo, hi = table.freqs_hz[0], table.freqs_hz[-1]
    if not lo <= f_hz <= hi:
        raise ValueError(f"{f_hz} Hz outside lookup table range [{lo}, {hi}] Hz")
    lf = math.log(f_hz)
    mag = math.exp(np.interp(lf, table._logf, table._logmag))
    ph = float(np.interp(lf, table._logf, table._phase))
    return complex(mag * math.cos(ph), mag * math.sin(ph))


@dataclass
class ControlChannelState:
    """One servo channel.

    ``gain`` is the plant sensitivity used to normalise the command:
    metres per ampere for amplitude, degrees per degree for phase.
    """

    reference: float
    controller: DiscreteBiquad
    gain: float = 1.0
    lower_bound: float | None = None
    u: float = 0.0
    saturated: bool = False

    def advance(self, measured: float) -> float:
        y, s1, s2 = self.controller.peek(self.reference - measured)
        if self.lower_bound is not None and y < self.lower_bound:
            # clamp and hold the integrator where it was
            self.u = self.lower_bound
            self.saturated = True
        else:
            self.controller.s1, self.controller.s2 = s1, s2
            self.u = y
            self.saturated = False
        return self.u

    def command(self) -> float:
        return self.u / self.gain


def control_step(amp_channel: ControlChannelState, phase_channel: ControlChannelState,
                 estimate: AmplitudePhase | tuple[float, float | None], f_hz: float | None = None
                 ) -> tuple[float, float]:
    """One 5 kHz tick of the dual-channel law.

    ``estimate`` carries the plate amplitude (m) and the phase (deg) of the
    slave end relative to the master end; a ``None`` phase (dead channel)
    holds the phase command.  Returns (current amplitude A, phase offset deg).
    """
    amp, ph = (estimate.amplitude, estimate.phase_deg) if isinstance(estimate, AmplitudePhase) else estimate
    amp_channel.advance(amp)
    if ph is not None:
        phase_channel.advance(ph)
    return amp_channel.command(), phase_channel.command()


@dataclass
class ControllerDesign:
    """Synthesised servo for one drive frequency."""

    f_hz: float
    rate_hz: float
    filter_cutoff_hz: float
    bandwidth_hz: float
    phase_bandwidth_hz: float
    full: ContinuousTF
    reduced: ReducedController
    discrete: DiscreteBiquad
    phase_reduced: ReducedController
    phase_discrete: DiscreteBiquad
    plant_gain: complex = 1.0
    phase_gain: float = 1.0
    loop_mag_err_db: float = 0.0
    loop_phase_err_deg: float = 0.0

    def channels(self, a_ref: float) -> tuple[ControlChannelState, ControlChannelState]:
        amp = ControlChannelState(a_ref, self.discrete.copy(), gain=abs(self.plant_gain), lower_bound=0.0)
        ph = ControlChannelState(0.0, self.phase_discrete.copy(), gain=self.phase_gain)
        amp.controller.reset()
        ph.controller.reset()
        return amp, ph

    def to_record(self) -> dict:
        def tf(t: ContinuousTF):
            return {"num": list(t.num), "den": list(t.den)}
        return {
            "f_hz": self.f_hz,
            "rate_hz": self.rate_hz,
            "filter_cutoff_hz": self.filter_cutoff_hz,
            "bandwidth_hz": self.bandwidth_hz,
            "phase_bandwidth_hz": self.phase_bandwidth_hz,
            "continuous_full": tf(self.full),
            "continuous_reduced": tf(self.reduced.tf),
            "discrete": self.discrete.coefficients,
            "phase_continuous_reduced": tf(self.phase_reduced.tf),
            "phase_discrete": self.phase_discrete.coefficients,
            "fit": {
                "band_hz": list(self.reduced.band_hz),
                "reduction_mag_err_db": self.reduced.mag_err_db,
                "reduction_phase_err_deg": self.reduced.phase_err_deg,
                "loop_mag_err_db": self.loop_mag_err_db,
                "loop_phase_err_deg": self.loop_phase_err_deg,
            },
            "plant_gain": {"re": self.plant_gain.real, "im": self.plant_gain.imag, "mag": abs(self.plant_gain)},
            "phase_gain": self.phase_gain,
        }


def realized_sensitivity(C: ContinuousTF, L: ContinuousTF, f_hz) -> np.ndarray:
    c, l = C.freqresp(f_hz), L.freqresp(f_hz)
    return c / (1 + l * c)


@functools.lru_cache(maxsize=32)
def _synth_loop(bandwidth_hz, cutoff_hz, rate_hz):
    L = filter_dynamics(cutoff_hz, rate_hz)
    T = sensitivity_target(bandwidth_hz)
    C6 = solve_controller(T, L)
    C2 = reduce_order(C6, band_hz=(0.1, 4.0 * bandwidth_hz))
    return L, T, C6, C2


def synthesize(f_hz: float, plant_gain: complex = 1.0, phase_gain: float = 1.0,
               bandwidth_hz: float = LOOP_BANDWIDTH_HZ, phase_bandwidth_hz: float | None = None,
               cutoff_hz: float = ESTIMATOR_CUTOFF_HZ, rate_hz: float = CONTROL_RATE_HZ) -> ControllerDesign:
    """Design both channels for drive frequency ``f_hz``.

    Estimator cutoff and loop bandwidth are capped at f/2 and f/4 so that the
    demodulation image at 2f stays out of the control signal.
    """
    cutoff_hz = min(cutoff_hz, f_hz / 2)
    bandwidth_hz = min(bandwidth_hz, f_hz / 4)
    phase_bandwidth_hz = min(phase_bandwidth_hz or bandwidth_hz, f_hz / 4)
    L, T, C6, red = _synth_loop(bandwidth_hz, cutoff_hz, rate_hz)
    f = np.logspace(-1, np.log10(4 * bandwidth_hz), 400)
    r = realized_sensitivity(red.tf, L, f) / T.freqresp(f)
    if phase_bandwidth_hz == bandwidth_hz:
        ph_red = red
    else:
        ph_red = _synth_loop(phase_bandwidth_hz, cutoff_hz, rate_hz)[3]
    return ControllerDesign(
        f_hz=float(f_hz), rate_hz=rate_hz, filter_cutoff_hz=cutoff_hz, bandwidth_hz=bandwidth_hz,
        phase_bandwidth_hz=phase_bandwidth_hz, full=C6, reduced=red,
        discrete=discretize_tustin(red.tf, rate_hz),
        phase_reduced=ph_red, phase_discrete=discretize_tustin(ph_red.tf, rate_hz),
        plant_gain=complex(plant_gain), phase_gain=float(phase_gain),
        loop_mag_err_db=float(np.max(np.abs(20 * np.log10(np.abs(r))))),
        loop_phase_err_deg=float(np.max(np.abs(np.degrees(np.angle(r))))),
    )


def export_designs(designs: Iterable[ControllerDesign]) -> str:
    """Deterministic JSON text, one record per frequency."""
    payload = {"schema": "vibroplate.controllers/1", "records": [d.to_record() for d in designs]}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
