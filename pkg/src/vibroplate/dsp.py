"""Single-frequency amplitude/phase estimation (lock-in demodulation).

A sampled signal is multiplied by a unit complex exponential at the
frequency of interest and the product is averaged, either with a boxcar
window or with a 2nd-order IIR low-pass.  The averaged complex value
carries half the signal amplitude and its phase relative to the
reference.

Complex estimates are plain Python/numpy ``complex`` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import signal


class InsufficientDataError(ValueError):
    """Raised when an averaging window is longer than the available history."""


class UndefinedPhaseError(ValueError):
    """Raised when the phase of a zero complex estimate is requested."""


@dataclass(frozen=True)
class IIRCoefficients:
    """Difference-equation coefficients with ``a[0] == 1``."""

    b: tuple[float, ...]
    a: tuple[float, ...]

    @property
    def order(self) -> int:
        return len(self.a) - 1

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, f_hz, rate_hz: float) -> np.ndarray:
        """Complex frequency response on the unit circle."""
        z = np.exp(2j * np.pi * np.asarray(f_hz, dtype=float) / rate_hz)
        return np.polyval(self.b[::-1], 1 / z) / np.polyval(self.a[::-1], 1 / z)


@dataclass(frozen=True)
class AmplitudePhase:
    amplitude: float
    phase_deg: float


def demodulate(x_n: float, n: int, f_hz: float, rate_hz: float) -> complex:
    """Multiply one sample by ``exp(-j 2 pi f n / N)``."""
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    w = -2.0 * math.pi * f_hz * n / rate_hz
    return complex(x_n * math.cos(w), x_n * math.sin(w))


def stdft_boxcar(y: Sequence[complex], M: int) -> complex:
    """Mean of the most recent ``M`` demodulated samples."""
    if M <= 0:
        raise ValueError("window length must be positive")
    if len(y) < M:
        raise InsufficientDataError(f"need {M} demodulated samples, have {len(y)}")
    tail = np.asarray(y[len(y) - M:], dtype=complex)
    return complex(tail.mean())


def amplitude(X: complex) -> float:
    return 2.0 * abs(X)


def phase_shifted(X: complex) -> float:
    """Phase in degrees with the branch cut moved to the 90/-270 ray.

    Result lies in (-270, 90].  A displacement lagging its drive by 0..-180
    degrees therefore never crosses the cut.
    """
    if X == 0:
        raise UndefinedPhaseError("phase of a zero estimate is undefined")
    theta = math.degrees(math.atan2(X.imag, X.real))
    if theta > 90.0:
        theta -= 360.0
    return theta


def phase_shifted_array(X: np.ndarray) -> np.ndarray:
    """Vectorised :func:`phase_shifted`; zero entries map to NaN."""
    X = np.asarray(X, dtype=complex)
    theta = np.degrees(np.angle(X))
    theta = np.where(theta > 90.0, theta - 360.0, theta)
    return np.where(X == 0, np.nan, theta)


def estimate(X: complex) -> AmplitudePhase:
    return AmplitudePhase(amplitude(X), phase_shifted(X))


def design_lowpass_iir(cutoff_hz: float, rate_hz: float) -> IIRCoefficients:
    """2nd-order Butterworth low-pass (bilinear transform, prewarped cutoff)."""
    if not 0 < cutoff_hz < rate_hz / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz outside (0, {rate_hz / 2}) Hz")
    b, a = signal.butter(2, cutoff_hz, btype="low", fs=rate_hz)
    return IIRCoefficients(tuple(float(v) for v in b), tuple(float(v) for v in a))


def wrap_period(f_hz: float, rate_hz: float) -> int:
    """Smallest sample count after which ``exp(-j 2 pi f n / N)`` repeats.

    Frequencies are rationalised (denominator <= 10**6) so the wrap is exact
    for the drive frequencies used here.
    """
    ratio = Fraction(f_hz).limit_denominator(10**6) / Fraction(rate_hz).limit_denominator(10**6)
    return ratio.denominator


class LockIn:
    """Streaming STDFT* estimator: demodulation followed by an order-2 IIR.

    Both quadrature channels run through the same recursion, so they are
    carried together as one complex delay line (transposed direct form II).
    The sample counter wraps at the demodulation period so long runs keep
    full phase precision.
    """

    def __init__(self, f_hz: float, rate_hz: float, cutoff_hz: float = 10.0,
                 coeffs: IIRCoefficients | None = None):
        if rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if not 0 < f_hz < rate_hz / 2:
            raise ValueError(f"demodulation frequency {f_hz} Hz outside (0, {rate_hz / 2}) Hz")
        coeffs = coeffs or design_lowpass_iir(cutoff_hz, rate_hz)
        if coeffs.order != 2:
            raise ValueError("STDFT* uses an order-2 filter")
        if not coeffs.is_stable():
            raise ValueError("unstable averaging filter")
        self.f_hz = float(f_hz)
        self.rate_hz = float(rate_hz)
        self.coeffs = coeffs
        self.n = 0
        self.period = wrap_period(f_hz, rate_hz)
        self.phase_offset = 0.0
        self._s1 = 0j
        self._s2 = 0j
        self.last_estimate = 0j

    def reference_phase(self) -> float:
        """Reference phase (rad) applied to the next sample."""
        return self.phase_offset + 2.0 * math.pi * self.f_hz * self.n / self.rate_hz

    def retune(self, f_hz: float) -> None:
        """Change frequency keeping the reference phase continuous."""
        if not 0 < f_hz < self.rate_hz / 2:
            raise ValueError(f"demodulation frequency {f_hz} Hz out of range")
        self.phase_offset = math.fmod(self.reference_phase(), 2.0 * math.pi)
        self.f_hz = float(f_hz)
        self.n = 0
        self.period = wrap_period(f_hz, self.rate_hz)

    def _filter(self, y: complex) -> complex:
        b0, b1, b2 = self.coeffs.b
        _, a1, a2 = self.coeffs.a
        out = b0 * y + self._s1
        self._s1 = b1 * y - a1 * out + self._s2
        self._s2 = b2 * y - a2 * out
        self.last_estimate = out
        return out

    def update(self, x_n: float) -> complex:
        """Advance one sample (the STDFT* recursion); returns the new estimate."""
        w = self.reference_phase()
        y = complex(x_n * math.cos(w), -x_n * math.sin(w))
        self.n += 1
        if self.n >= self.period:
            self.n = 0
        return self._filter(y)

    def update_at_phase(self, x_n: float, phase_rad: float) -> complex:
        """Advance one sample against an externally supplied reference phase."""
        y = complex(x_n * math.cos(phase_rad), -x_n * math.sin(phase_rad))
        return self._filter(y)

    def amplitude_phase(self) -> AmplitudePhase:
        return estimate(self.last_estimate)


def stdft_iir(state: LockIn, x_n: float, n: int | None = None) -> complex:
    """Functional wrapper around :meth:`LockIn.update`.

    ``n`` is accepted for symmetry with :func:`demodulate`; when given it must
    agree with the state's (wrapped) counter.
    """
    if n is not None and n % state.period != state.n:
        raise ValueError(f"sample index {n} out of step with estimator counter {state.n}")
    return state.update(x_n)


def lockin(x: np.ndarray, f_hz: float, rate_hz: float, cutoff_hz: float = 10.0,
           phase_rad: np.ndarray | None = None) -> np.ndarray:
    """Batch STDFT* over a whole record; same recursion as :class:`LockIn`."""
    x = np.asarray(x, dtype=float)
    if phase_rad is None:
        n = np.arange(x.size) % wrap_period(f_hz, rate_hz)
        phase_rad = 2.0 * np.pi * f_hz * n / rate_hz
    y = x * np.exp(-1j * phase_rad)
    c = design_lowpass_iir(cutoff_hz, rate_hz)
    return signal.lfilter(c.b, c.a, y)


def boxcar_lockin(x: np.ndarray, f_hz: float, rate_hz: float, min_window_s: float = 0.05) -> np.ndarray:
    """Batch STDFT with a causal boxcar spanning a whole number of periods.

    The window holds the sample count nearest to ``ceil(min_window_s f)``
    periods, so the image at 2f is cancelled (exactly when the period is an
    integer number of samples).  The first ``M - 1`` outputs average over
    the partial history.
    """
    x = np.asarray(x, dtype=float)
    periods = max(1, math.ceil(min_window_s * f_hz))
    M = max(1, int(round(periods * rate_hz / f_hz)))
    n = np.arange(x.size) % wrap_period(f_hz, rate_hz)
    y = x * np.exp(-2j * np.pi * f_hz * n / rate_hz)
    c = np.cumsum(y)
    out = np.empty_like(y)
    out[:M] = c[:M] / np.arange(1, min(M, x.size) + 1)
    out[M:] = (c[M:] - c[:-M]) / M
    return out
