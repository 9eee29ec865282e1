"""Recover finger load, position, reaction force and impedance from a trace.

Pipeline (all filters causal except the one-sample central difference):

1. split each Hall channel into a slow part (4th-order 10 Hz Butterworth
   plus a notch at the drive frequency) and the complementary fast part;
2. normal load ``W = -(k1 x1_l + k2 x2_l)`` and position
   ``P = d / (k2 x2_l / (k1 x1_l) + 1)`` from the slow part;
3. band-pass displacements and currents at the drive frequency, take
   central differences, subtract modelled suspension and inertial forces
   from ``K (i1 + i2)`` to get the finger force, and band-pass that force
   and the finger velocity once more;
4. lock-in both force and velocity at the finger and divide.

Suspension coefficients may drift linearly in time; they are regressed from
unloaded stretches of the same trace.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from ._files import atomic_write_text
from .dsp import boxcar_lockin, lockin
from .plant import PlateParams, SimTrace

ANALYSIS_HEADER = ("t", "W", "P", "Zmag", "f_hz", "valid")


class IndeterminatePositionError(ValueError):
    """Raised when the load is too light (or upward) to locate the finger."""


class RankDeficientError(ValueError):
    """Raised when a regression lacks excitation to separate its unknowns."""


@dataclass
class PipelineConfig:
    lowpass_hz: float = 10.0
    lowpass_order: int = 4
    notch_q: float = 2.0
    bandpass_q: float = 10.0
    impedance_cutoff_hz: float = 10.0
    threshold_n: float = 0.1
    hysteresis_n: float = 0.02
    position_floor_n: float = 0.005
    middle_region_m: float = 0.030
    settle_s: float = 0.3
    velocity_floor: float = 1e-5
    output_decimation: int = 30

    def __post_init__(self):
        if self.hysteresis_n < 0 or self.hysteresis_n >= self.threshold_n:
            raise ValueError("hysteresis must be in [0, threshold)")


# -- filtering ----------------------------------------------------------------

def split_bands(x, rate_hz: float, f_drive: float | None = None, cutoff_hz: float = 10.0, order: int = 4,
                notch_q: float = 2.0):
    """(slow, fast) parts with ``slow + fast == x`` exactly."""
    x = np.asarray(x, dtype=float)
    sos = signal.butter(order, cutoff_hz, btype="low", fs=rate_hz, output="sos")
    if f_drive is not None and cutoff_hz < f_drive < rate_hz / 2:
        b, a = signal.iirnotch(f_drive, notch_q, fs=rate_hz)
        sos = np.vstack([sos, signal.tf2sos(b, a)])
    zi = signal.sosfilt_zi(sos) * (x[0] if x.size else 0.0)
    slow = signal.sosfilt(sos, x, zi=zi)[0] if x.size else x.copy()
    return slow, x - slow


def bandpass(x, f_hz: float, rate_hz: float, q: float = 10.0):
    """2nd-order resonator (unity gain at ``f_hz``)."""
    b, a = signal.iirpeak(f_hz, q, fs=rate_hz)
    return signal.lfilter(b, a, np.asarray(x, dtype=float))


def central_derivatives(x, rate_hz: float, f_hz: float | None = None):
    """Velocity and acceleration by symmetric differences.

    Sample ``n`` uses ``x[n-1], x[n], x[n+1]`` (one sample ahead), so all
    outputs stay aligned with the input.  With ``f_hz`` the difference
    operators are scaled to be exact for a sinusoid at that frequency.
    Edge samples reuse their neighbours.
    """
    x = np.asarray(x, dtype=float)
    h = 1.0 / rate_hz
    v = np.empty_like(x)
    a = np.empty_like(x)
    if x.size < 3:
        v[:] = 0.0
        a[:] = 0.0
        return v, a
    v[1:-1] = (x[2:] - x[:-2]) / (2 * h)
    a[1:-1] = (x[2:] - 2 * x[1:-1] + x[:-2]) / h**2
    if f_hz:
        wh = 2 * math.pi * f_hz * h
        v[1:-1] *= wh / math.sin(wh)
        a[1:-1] *= (wh / 2) ** 2 / math.sin(wh / 2) ** 2
    v[0], v[-1] = v[1], v[-2]
    a[0], a[-1] = a[1], a[-2]
    return v, a


# -- load and position -----------------------------------------------------------

def estimate_normal_load(x1_l, x2_l, params: PlateParams, t=0.0):
    k1, k2, _, _ = params.suspension_at(np.asarray(t, dtype=float))
    return -(k1 * np.asarray(x1_l) + k2 * np.asarray(x2_l))


def estimate_position(x1_l, x2_l, params: PlateParams, t=0.0, floor_n: float = 0.005):
    """Finger position from transducer 2 (m).

    Scalars raise :class:`IndeterminatePositionError` when either mount is
    not compressed by more than ``floor_n``; arrays return NaN there.
    """
    k1, k2, _, _ = params.suspension_at(np.asarray(t, dtype=float))
    f1 = -k1 * np.asarray(x1_l, dtype=float)
    f2 = -k2 * np.asarray(x2_l, dtype=float)
    ok = (f1 > floor_n) & (f2 > floor_n)
    with np.errstate(divide="ignore", invalid="ignore"):
        P = params.d / (f2 / f1 + 1.0)
    if np.ndim(P) == 0:
        if not ok:
            raise IndeterminatePositionError(f"mount loads {float(f1):.4g} N, {float(f2):.4g} N below floor {floor_n} N")
        return float(P)
    return np.where(ok, P, np.nan)


# -- forces -------------------------------------------------------------------------

def device_forces(x1, x2, v1, v2, a1, a2, params: PlateParams, t=0.0):
    """Suspension plus inertial force at each mount (rigid plate).

    ``F1 = k1 x1 + b1 v1 + (m/2) a_c - (I/d) theta''`` and the mirror image
    for mount 2, with ``a_c`` the centre acceleration and
    ``theta'' = (a2 - a1)/d``.
    """
    k1, k2, b1, b2 = params.suspension_at(np.asarray(t, dtype=float))
    ac = 0.5 * (np.asarray(a1) + np.asarray(a2))
    tilt_acc = (np.asarray(a2) - np.asarray(a1)) / params.d
    rot = params.I / params.d * tilt_acc
    F1 = k1 * np.asarray(x1) + b1 * np.asarray(v1) + params.m / 2 * ac - rot
    F2 = k2 * np.asarray(x2) + b2 * np.asarray(v2) + params.m / 2 * ac + rot
    return F1, F2


def finger_force(i1, i2, F1, F2, K: float):
    return K * (np.asarray(i1) + np.asarray(i2)) - np.asarray(F1) - np.asarray(F2)


def lockin_impedance(F_f, v, f_hz: float, rate_hz: float, cutoff_hz: float = 10.0, velocity_floor: float = 1e-5):
    """Complex ``Z(t)`` from the phasor ratio; NaN where the velocity phasor is below the floor."""
    XF = lockin(F_f, f_hz, rate_hz, cutoff_hz)
    Xv = lockin(v, f_hz, rate_hz, cutoff_hz)
    ok = 2 * np.abs(Xv) > velocity_floor
    Z = np.full(XF.shape, np.nan + 0j)
    Z[ok] = XF[ok] / Xv[ok]
    return Z


# -- suspension regression -----------------------------------------------------------

@dataclass
class LinearDrift:
    a: float
    c: float

    def at(self, t):
        return self.c + self.a * np.asarray(t)


@dataclass
class SuspensionFit:
    k1: LinearDrift
    k2: LinearDrift
    b1: LinearDrift
    b2: LinearDrift
    residual_rms: float
    n_samples: int
    duration_s: float

    def params(self, base: PlateParams) -> PlateParams:
        return PlateParams(base.m, base.I, base.K, self.k1.c, self.k2.c, self.b1.c, self.b2.c, base.d,
                           self.k1.a, self.k2.a, self.b1.a, self.b2.a)

    def to_dict(self) -> dict:
        return asdict(self)


def _mount_regression(y, X, jwX, t, drift: bool):
    cols = [X, t * X, jwX, t * jwX] if drift else [X, jwX]
    A = np.vstack([np.column_stack([c.real for c in cols]), np.column_stack([c.imag for c in cols])])
    rhs = np.r_[y.real, y.imag]
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        raise RankDeficientError("a regressor column is identically zero")
    As = A / scale
    sv = np.linalg.svd(As, compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise RankDeficientError(f"regression condition number {sv[0] / sv[-1]:.3g} too large")
    coef, *_ = np.linalg.lstsq(As, rhs, rcond=None)
    coef = coef / scale
    resid = rhs - A @ coef
    if not drift:
        coef = np.array([coef[0], 0.0, coef[1], 0.0])
    return coef, resid


def fit_suspension(t, x1, x2, i1, i2, params: PlateParams, f_hz: float, rate_hz: float,
                   mask=None, bandpass_q: float = 10.0, drift: bool | None = None,
                   min_drift_span_s: float = 5.0, stride: int = 10) -> SuspensionFit:
    """Least-squares linear-in-time k and b per mount over ``mask`` samples.

    Inputs are raw displacements and currents.  Each is band-passed at the
    drive frequency and reduced to a running phasor (whole-period boxcar),
    and the mount force balance

        K I_j - (m/2) A_c +/- (I/d) Theta'' = (k_j(t) + j w b_j(t)) X_j

    is solved in the least-squares sense over real and imaginary parts.
    Working on phasors keeps wide-band sensor noise, which the
    differentiators would amplify, out of the products.  Mass and inertia
    are taken as known.  ``c`` is the value at ``t = 0``.  With
    ``drift=None`` slopes are only fitted when the selected samples span at
    least ``min_drift_span_s``; shorter stretches cannot separate slope from
    offset and would extrapolate badly.
    """
    t = np.asarray(t, dtype=float)
    sel = np.ones(t.size, bool) if mask is None else np.asarray(mask, bool)
    sel = sel.copy()
    sel[np.arange(t.size) % stride != 0] = False
    if sel.sum() < 10:
        raise RankDeficientError("too few unloaded samples to fit suspension parameters")
    X1, X2, I1, I2 = (boxcar_lockin(bandpass(s, f_hz, rate_hz, bandpass_q), f_hz, rate_hz)[sel]
                      for s in (x1, x2, i1, i2))
    w = 2 * math.pi * f_hz
    A1, A2 = -w * w * X1, -w * w * X2
    Ac = 0.5 * (A1 + A2)
    rot = params.I / params.d * (A2 - A1) / params.d
    y1 = params.K * I1 - params.m / 2 * Ac + rot
    y2 = params.K * I2 - params.m / 2 * Ac - rot
    ts = t[sel]
    if drift is None:
        drift = float(ts.max() - ts.min()) >= min_drift_span_s
    c1, r1 = _mount_regression(y1, X1, 1j * w * X1, ts, drift)
    c2, r2 = _mount_regression(y2, X2, 1j * w * X2, ts, drift)
    # phasors carry half the amplitude; report the residual as a force amplitude
    res = 2 * math.sqrt(float(np.mean(np.r_[r1, r2] ** 2)))
    return SuspensionFit(LinearDrift(c1[1], c1[0]), LinearDrift(c2[1], c2[0]),
                         LinearDrift(c1[3], c1[2]), LinearDrift(c2[3], c2[2]),
                         res, int(sel.sum()), float(ts.max() - ts.min()))


# -- segmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    start: int
    end: int  # exclusive
    loaded: bool


def segment_contacts(W, threshold: float = 0.1, hysteresis: float = 0.02) -> list[Segment]:
    """Alternating loaded/unloaded runs; loading needs ``W >= threshold``,
    unloading needs ``W < threshold - hysteresis``."""
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        return []
    segs = []
    state = bool(W[0] >= threshold)
    start = 0
    for n in range(1, W.size):
        w = W[n]
        flip = (not state and w >= threshold) or (state and w < threshold - hysteresis)
        if flip:
            segs.append(Segment(start, n, state))
            start, state = n, not state
    segs.append(Segment(start, W.size, state))
    return segs


def segment_mask(segments, n: int, loaded: bool, margin: int = 0, skip_start: int = 0) -> np.ndarray:
    """Samples inside segments of the given kind, trimmed by ``margin`` at both ends."""
    m = np.zeros(n, bool)
    for s in segments:
        if s.loaded == loaded:
            a = max(s.start + (margin if s.start > 0 else skip_start), 0)
            b = s.end - (margin if s.end < n else 0)
            if b > a:
                m[a:b] = True
    return m


# -- full pipeline --------------------------------------------------------------------

@dataclass
class AnalysisResult:
    t: np.ndarray
    W: np.ndarray
    P: np.ndarray
    Z: np.ndarray
    valid: np.ndarray
    f_hz: float
    F_f: np.ndarray
    v_finger: np.ndarray
    segments: list
    fit: SuspensionFit | None
    params_used: PlateParams
    notes: list[str] = field(default_factory=list)

    @property
    def Zmag(self) -> np.ndarray:
        return np.abs(self.Z)

    def valid_zmag(self) -> np.ndarray:
        return self.Zmag[self.valid]

    def to_csv(self, decimation: int = 30) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ANALYSIS_HEADER)
        idx = np.arange(0, self.t.size, max(int(decimation), 1))
        zmag = np.nan_to_num(self.Zmag, nan=0.0)
        P = np.nan_to_num(self.P, nan=0.0)
        for n in idx:
            w.writerow([f"{self.t[n]:.9g}", f"{self.W[n]:.9g}", f"{P[n]:.9g}", f"{zmag[n]:.9g}",
                        f"{self.f_hz:.9g}", int(self.valid[n])])
        return buf.getvalue()

    def report(self) -> dict:
        loaded = [s for s in self.segments if s.loaded]
        z = self.valid_zmag()
        return {
            "schema": "vibroplate.identify/1",
            "f_hz": self.f_hz,
            "suspension_fit": None if self.fit is None else self.fit.to_dict(),
            "params_used": self.params_used.to_dict(),
            "segments": [asdict(s) for s in self.segments],
            "n_loaded_segments": len(loaded),
            "valid_fraction": float(self.valid.mean()) if self.valid.size else 0.0,
            "zmag_median": float(np.median(z)) if z.size else None,
            "notes": self.notes,
        }

    def write(self, csv_path, report_path, decimation: int = 30) -> None:
        atomic_write_text(csv_path, self.to_csv(decimation))
        atomic_write_text(report_path, json.dumps(self.report(), indent=2, sort_keys=True) + "\n")


def dominant_frequency(x, rate_hz: float) -> float:
    """Peak of the windowed spectrum refined by parabolic interpolation."""
    x = np.asarray(x, dtype=float)
    if x.size < 16 or not np.any(x):
        raise ValueError("cannot infer the drive frequency from an empty or silent record")
    n = 1 << int(math.ceil(math.log2(x.size)) + 2)
    spec = np.abs(np.fft.rfft((x - x.mean()) * np.hanning(x.size), n))
    k = int(np.argmax(spec[1:])) + 1
    if 1 <= k < spec.size - 1:
        a, b, c = np.log(spec[k - 1: k + 2] + 1e-300)
        k = k + 0.5 * (a - c) / (a - 2 * b + c)
    return float(k * rate_hz / n)


def identify(trace: SimTrace, params: PlateParams, f_hz: float | None = None,
             config: PipelineConfig | None = None, fit: bool = True) -> AnalysisResult:
    cfg = config or PipelineConfig()
    rate = trace.rate_hz
    t = trace["t"]
    n = t.size
    notes: list[str] = []
    if f_hz is None:
        f_hz = round(dominant_frequency(trace["i1"], rate), 3)
        notes.append(f"drive frequency inferred from i1: {f_hz} Hz")
    h1, h2 = trace["hall1"], trace["hall2"]
    x1l, _ = split_bands(h1, rate, f_hz, cfg.lowpass_hz, cfg.lowpass_order, cfg.notch_q)
    x2l, _ = split_bands(h2, rate, f_hz, cfg.lowpass_hz, cfg.lowpass_order, cfg.notch_q)

    W0 = estimate_normal_load(x1l, x2l, params, t)
    segs = segment_contacts(W0, cfg.threshold_n, cfg.hysteresis_n)
    settle = int(cfg.settle_s * rate)
    used = params
    sus = None
    if fit:
        mask = segment_mask(segs, n, loaded=False, margin=settle, skip_start=settle)
        try:
            sus = fit_suspension(t, h1, h2, trace["i1"], trace["i2"], params, f_hz, rate, mask, cfg.bandpass_q)
            used = sus.params(params)
        except RankDeficientError as exc:
            notes.append(f"suspension fit skipped: {exc}")
    W = estimate_normal_load(x1l, x2l, used, t)
    segs = segment_contacts(W, cfg.threshold_n, cfg.hysteresis_n)
    P = estimate_position(x1l, x2l, used, t, cfg.position_floor_n)

    x1b = bandpass(h1, f_hz, rate, cfg.bandpass_q)
    x2b = bandpass(h2, f_hz, rate, cfg.bandpass_q)
    i1b = bandpass(trace["i1"], f_hz, rate, cfg.bandpass_q)
    i2b = bandpass(trace["i2"], f_hz, rate, cfg.bandpass_q)
    v1, a1 = central_derivatives(x1b, rate, f_hz)
    v2, a2 = central_derivatives(x2b, rate, f_hz)
    F1, F2 = device_forces(x1b, x2b, v1, v2, a1, a2, used, t)
    F_f = finger_force(i1b, i2b, F1, F2, used.K)
    w1 = np.where(np.isfinite(P), P, used.d / 2) / used.d
    v = w1 * v1 + (1 - w1) * v2
    # second pass: the differenced Hall noise rises as f^2 above the resonator's 1/f skirt
    F_f = bandpass(F_f, f_hz, rate, cfg.bandpass_q)
    v = bandpass(v, f_hz, rate, cfg.bandpass_q)
    Z = lockin_impedance(F_f, v, f_hz, rate, cfg.impedance_cutoff_hz, cfg.velocity_floor)

    loaded = segment_mask(segs, n, loaded=True, margin=settle)
    middle = np.abs(np.nan_to_num(P, nan=-1.0) - used.d / 2) <= cfg.middle_region_m / 2
    valid = loaded & middle & np.isfinite(Z)
    return AnalysisResult(t, W, P, Z, valid, float(f_hz), F_f, v, segs, sus, used, notes)
