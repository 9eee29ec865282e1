"""Rigid plate on two voice-coil suspensions, with a finger contact.

Generalised coordinates are the two end displacements ``q = [x1, x2]``
(positive up).  Centre heave is ``(x1 + x2)/2`` and tilt
``theta = (x2 - x1)/d``, so the plate kinetic energy gives

    M = m/4 [[1, 1], [1, 1]] + I/d^2 [[1, -1], [-1, 1]].

Each end has a spring and damper to ground whose coefficients may drift
linearly in time, and a coil pushing with ``K * i``.  The finger sits at
position ``P`` measured from transducer 2 towards transducer 1, so plate
motion under the finger is ``x_P = (P/d) x1 + (1 - P/d) x2``.

The integrator is fixed-step RK4 in a numba kernel.  Drive currents are
evaluated as continuous sinusoids at every RK stage.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numba
import numpy as np

from . import fingers as fm

SAMPLE_RATE_HZ = 30000.0
HALL_SIGMA_M = 1e-6
MAX_AMPLITUDE_M = 2e-3
MAX_TILT_RAD = 0.05

TRACE_COLUMNS = ("t", "x1", "x2", "hall1", "hall2", "i1", "i2", "a_cmd", "ph_cmd", "f_finger", "W_true", "P_true")

# kernel status codes
_OK, _AMPLITUDE, _TILT, _NONFINITE = 0, 1, 2, 3
_STATUS_TEXT = {_AMPLITUDE: "plate amplitude exceeded", _TILT: "plate tilt exceeded", _NONFINITE: "non-finite state"}


class SimulationAborted(RuntimeError):
    """Raised when the plant leaves its safe envelope.  ``trace`` holds the samples up to the abort."""

    def __init__(self, message: str, sample: int, trace=None):
        super().__init__(message)
        self.sample = sample
        self.trace = trace


@dataclass(frozen=True)
class PlateParams:
    m: float = 0.032
    I: float = 4e-5
    K: float = 7.4
    k1: float = 22400.0
    k2: float = 22900.0
    b1: float = 0.85
    b2: float = 0.85
    d: float = 0.055
    a_k1: float = 0.0
    a_k2: float = 0.0
    a_b1: float = 0.0
    a_b2: float = 0.0

    def __post_init__(self):
        for name in ("m", "I", "K", "k1", "k2", "b1", "b2", "d"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        for name in ("a_k1", "a_k2", "a_b1", "a_b2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def suspension_at(self, t):
        """(k1, k2, b1, b2) at time ``t`` under the linear drift law."""
        return (self.k1 + self.a_k1 * t, self.k2 + self.a_k2 * t,
                self.b1 + self.a_b1 * t, self.b2 + self.a_b2 * t)

    def mass_matrix(self) -> np.ndarray:
        r = self.I / self.d**2
        return self.m / 4 * np.ones((2, 2)) + r * np.array([[1.0, -1.0], [-1.0, 1.0]])

    def heave_resonance_hz(self) -> float:
        return math.sqrt((self.k1 + self.k2) / self.m) / (2 * math.pi)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)


def lever_weights(P: float, d: float) -> np.ndarray:
    """Share of a point load at ``P`` (from transducer 2) carried by each mount."""
    return np.array([P / d, 1.0 - P / d])


# -- numba kernel -------------------------------------------------------------

@numba.njit(cache=True)
def _rhs(t, y, p, amp1, amp2, th, om, ph2, tau, W, w1, contact, fp, order, dy):
    """State derivative; returns the contact force on the finger."""
    m, I, K = p[0], p[1], p[2]
    d = p[7]
    k1 = p[3] + p[8] * t
    k2 = p[4] + p[9] * t
    b1 = p[5] + p[10] * t
    b2 = p[6] + p[11] * t
    x1, x2, v1, v2, xp, vp = y[0], y[1], y[2], y[3], y[4], y[5]
    ang = th + om * tau
    i1 = amp1 * math.sin(ang)
    i2 = amp2 * math.sin(ang + ph2)
    q1 = K * i1 - k1 * x1 - b1 * v1
    q2 = K * i2 - k2 * x2 - b2 * v2
    r = I / (d * d)
    M11 = m / 4 + r
    M12 = m / 4 - r
    M22 = m / 4 + r
    w2 = 1.0 - w1
    ma = 0.0
    fc_rest = 0.0
    ap = 0.0
    if contact:
        ma = fp[0]
        ba, ka = fp[1], fp[2]
        xP = w1 * x1 + w2 * x2
        vP = w1 * v1 + w2 * v2
        if order == 2:
            fc_rest = W + ba * vP + ka * xP
        else:
            fs = ka * (xP - xp) + ba * (vP - vp)
            fc_rest = W + fs
            ap = (fs - fp[5] * xp - fp[4] * vp) / fp[3]
        q1 -= w1 * fc_rest
        q2 -= w2 * fc_rest
        M11 += ma * w1 * w1
        M12 += ma * w1 * w2
        M22 += ma * w2 * w2
    det = M11 * M22 - M12 * M12
    a1 = (M22 * q1 - M12 * q2) / det
    a2 = (M11 * q2 - M12 * q1) / det
    dy[0] = v1
    dy[1] = v2
    dy[2] = a1
    dy[3] = a2
    if contact and order == 4:
        dy[4] = vp
        dy[5] = ap
    else:
        dy[4] = 0.0
        dy[5] = 0.0
    fc = fc_rest + ma * (w1 * a1 + w2 * a2) if contact else 0.0
    return fc, i1, i2, a1, a2


@numba.njit(cache=True)
def _run(y, k0, n, dt, p, amp1, amp2, theta, omega, ph2, W, w1, contact, fparams, order,
         out_x, out_i, out_f, out_a, max_amp, max_tilt):
    """Advance ``n`` samples starting at global index ``k0``.

    Row ``k`` of the outputs holds the state, currents and contact force at
    ``t = k dt`` before stepping.  Returns (status, failing index).
    """
    dy1 = np.empty(6)
    dy2 = np.empty(6)
    dy3 = np.empty(6)
    dy4 = np.empty(6)
    yt = np.empty(6)
    d = p[7]
    for j in range(n):
        k = k0 + j
        t = k * dt
        c = contact[k]
        if c and (k == 0 or not contact[k - 1]):
            # skin-phalanx springs start at equilibrium with the plate deflection
            if order == 4:
                xP = w1[k] * y[0] + (1.0 - w1[k]) * y[1]
                y[4] = fparams[k, 2] * xP / (fparams[k, 2] + fparams[k, 5])
                y[5] = 0.0
        if not c:
            y[4] = 0.0
            y[5] = 0.0
        fp = fparams[k]
        fc, i1, i2, a1, a2 = _rhs(t, y, p, amp1[k], amp2[k], theta[k], omega[k], ph2[k], 0.0,
                                  W[k], w1[k], c, fp, order, dy1)
        out_x[k, 0] = y[0]
        out_x[k, 1] = y[1]
        out_i[k, 0] = i1
        out_i[k, 1] = i2
        out_f[k] = fc
        out_a[k, 0] = a1
        out_a[k, 1] = a2
        if not (math.isfinite(y[0]) and math.isfinite(y[1])):
            return 3, k
        if abs(y[0]) > max_amp or abs(y[1]) > max_amp:
            return 1, k
        if abs(y[1] - y[0]) / d > max_tilt:
            return 2, k
        h = 0.5 * dt
        for s in range(6):
            yt[s] = y[s] + h * dy1[s]
        _rhs(t + h, yt, p, amp1[k], amp2[k], theta[k], omega[k], ph2[k], h, W[k], w1[k], c, fp, order, dy2)
        for s in range(6):
            yt[s] = y[s] + h * dy2[s]
        _rhs(t + h, yt, p, amp1[k], amp2[k], theta[k], omega[k], ph2[k], h, W[k], w1[k], c, fp, order, dy3)
        for s in range(6):
            yt[s] = y[s] + dt * dy3[s]
        _rhs(t + dt, yt, p, amp1[k], amp2[k], theta[k], omega[k], ph2[k], dt, W[k], w1[k], c, fp, order, dy4)
        for s in range(6):
            y[s] += dt / 6.0 * (dy1[s] + 2.0 * dy2[s] + 2.0 * dy3[s] + dy4[s])
    return 0, k0 + n


# -- finger and touch description ----------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Piecewise-linear function of time given by breakpoints."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("profile needs equal-length, non-empty times and values")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("profile times must be non-decreasing")

    @classmethod
    def constant(cls, value: float) -> "Profile":
        return cls((0.0,), (float(value),))

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


def _swipe_profile(P0: float, P1: float, period: float, duration: float) -> Profile:
    times, vals = [0.0], [P0]
    t, toward = 0.0, P1
    while t < duration:
        t += period / 2
        times.append(t)
        vals.append(toward)
        toward = P0 if toward == P1 else P1
    return Profile(tuple(times), tuple(vals))


@dataclass(frozen=True)
class TouchScenario:
    """Finger load/position programme.

    ``finger`` is a finger model, or ``"schedule"`` to take
    :func:`fingers.model_at_load` at the instantaneous load (with ``order``).
    Contact is on whenever ``W > 0``.
    """

    W: Profile = field(default_factory=lambda: Profile.constant(0.0))
    P: Profile = field(default_factory=lambda: Profile.constant(0.0275))
    finger: object = None
    order: int = 4
    skin_scale: Callable[[float], float] | None = None

    @classmethod
    def untouched(cls) -> "TouchScenario":
        return cls()

    @classmethod
    def press(cls, W: float, P: float = 0.0275, finger=None, order: int = 4, onset: float = 0.0,
              ramp: float = 0.05) -> "TouchScenario":
        """Ramp to load ``W`` from ``onset`` over ``ramp`` seconds and hold."""
        Wp = Profile((0.0, onset, onset + ramp), (0.0, 0.0, W)) if onset > 0 or ramp > 0 else Profile.constant(W)
        return cls(W=Wp, P=Profile.constant(P), finger=finger, order=order)

    @classmethod
    def swipe(cls, W: float, duration: float, P_range=(0.0125, 0.0425), period: float = 1.0,
              finger="schedule", order: int = 4, ramp: float = 0.05) -> "TouchScenario":
        """Finger held at load ``W`` while sliding back and forth across ``P_range``."""
        return cls(W=Profile((0.0, ramp), (0.0, W)), P=_swipe_profile(*P_range, period, duration),
                   finger=finger, order=order)

    def sample(self, t: np.ndarray, d: float):
        W = np.maximum(self.W(t), 0.0)
        P = self.P(t)
        contact = W > 0
        if np.any(contact & ((P < 0) | (P > d))):
            raise ValueError("finger position outside the plate span during contact")
        fp = np.zeros((t.size, 6))
        if self.finger is None and np.any(contact):
            raise ValueError("contact requested without a finger model")
        order = self.order
        if self.finger is not None and contact.any():
            if isinstance(self.finger, str) and self.finger == "schedule":
                idx = np.flatnonzero(contact)
                # parameters only change with W; evaluate on distinct loads
                uniq, inv = np.unique(W[idx], return_inverse=True)
                rows = np.array([_finger_row(fm.model_at_load(w, order=order, skin_scale=self.skin_scale))
                                 for w in uniq])
                fp[idx] = rows[inv]
            else:
                model = fm.parse_model(self.finger) if isinstance(self.finger, (str, dict)) else self.finger
                order = 2 if isinstance(model, fm.Order2) else 4
                fp[contact] = _finger_row(model)
        return W, P, contact, fp, order


def _finger_row(model) -> np.ndarray:
    if isinstance(model, fm.Order2):
        return np.array([model.m_f, model.b_f, model.k_f, 1.0, 0.0, 0.0])
    return np.array([model.m_s, model.b_s, model.k_s, model.m_p, model.b_p, model.k_p])


def model_order(model) -> int:
    return 2 if isinstance(model, fm.Order2) else 4


# -- sensing and FM waveform ---------------------------------------------------

def hall_sense(x, rng: np.random.Generator | None = None, sigma: float = HALL_SIGMA_M):
    """Hall reading: unit-gain displacement plus white Gaussian noise."""
    x = np.asarray(x, dtype=float)
    if sigma == 0:
        return x.copy()
    if rng is None:
        raise ValueError("a random generator is required when sigma > 0")
    return x + sigma * rng.standard_normal(x.shape)


def fm_waveform(f_hz: float, t):
    """Electroadhesion current envelope in mA, ``6 sqrt((sin(2 pi f t) + 1)/2)``."""
    if f_hz <= 0:
        raise ValueError("grating frequency must be positive")
    s = np.sin(2 * np.pi * f_hz * np.asarray(t, dtype=float))
    return 6.0 * np.sqrt(np.clip((s + 1.0) / 2.0, 0.0, None))


# -- frequency response --------------------------------------------------------

def plate_frf(params: PlateParams, f_hz, finger=None, P: float | None = None) -> np.ndarray:
    """Complex ``x_i / i_j`` (m/A), shape ``(len(f), 2, 2)``, at t = 0 parameters.

    A finger model adds its impedance at ``P`` (default centre), without
    preload.
    """
    f = np.atleast_1d(np.asarray(f_hz, dtype=float))
    M = params.mass_matrix()
    B = np.diag([params.b1, params.b2])
    Kmat = np.diag([params.k1, params.k2])
    w = lever_weights(params.d / 2 if P is None else P, params.d)
    out = np.empty((f.size, 2, 2), dtype=complex)
    for n, fk in enumerate(f):
        s = 2j * np.pi * fk
        D = M * s * s + B * s + Kmat
        if finger is not None:
            # finger impedance Z maps force to velocity: force = Z s x_P
            D = D + complex(fm.impedance(finger, fk)) * s * np.outer(w, w)
        out[n] = np.linalg.solve(D, params.K * np.eye(2))
    return out


def heave_gain(params: PlateParams, f_hz, finger=None, P=None) -> np.ndarray:
    """Centre displacement per ampere with both coils driven in phase."""
    H = plate_frf(params, f_hz, finger, P)
    return 0.5 * (H[:, 0, 0] + H[:, 0, 1] + H[:, 1, 0] + H[:, 1, 1])


def phase_sensitivity(params: PlateParams, f_hz, finger=None, P=None) -> np.ndarray:
    """d(angle(X2/X1))/d(phase of coil 2), at equal in-phase drive."""
    H = plate_frf(params, f_hz, finger, P)
    x1 = H[:, 0, 0] + H[:, 0, 1]
    x2 = H[:, 1, 0] + H[:, 1, 1]
    return np.real(H[:, 1, 1] / x2 - H[:, 0, 1] / x1)


def plate_modes_hz(params: PlateParams) -> np.ndarray:
    """Undamped natural frequencies (ascending)."""
    Kmat = np.diag([params.k1, params.k2])
    lam = np.linalg.eigvals(np.linalg.solve(params.mass_matrix(), Kmat))
    return np.sort(np.sqrt(lam.real)) / (2 * np.pi)


# -- plant runner ---------------------------------------------------------------

@dataclass
class SimTrace:
    """Sampled record; ``columns`` follow :data:`TRACE_COLUMNS`."""

    columns: dict[str, np.ndarray]
    rate_hz: float = SAMPLE_RATE_HZ
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.columns[key]

    def __len__(self) -> int:
        return self.columns["t"].size

    def truncated(self, n: int) -> "SimTrace":
        return SimTrace({k: v[:n] for k, v in self.columns.items()}, self.rate_hz,
                        {k: v for k, v in self.extras.items()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TRACE_COLUMNS) + "\n")
        if len(self):
            data = np.column_stack([self.columns[c] for c in TRACE_COLUMNS])
            np.savetxt(buf, data, fmt="%.12g", delimiter=",")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        from ._files import atomic_write_text
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "SimTrace":
        with open(path) as fh:
            header = fh.readline().strip()
            if tuple(header.split(",")) != TRACE_COLUMNS:
                raise ValueError(f"trace header must be {','.join(TRACE_COLUMNS)}, got {header!r}")
            body = fh.read()
        data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2) if body.strip() else np.zeros((0, 0))
        if data.size == 0:
            data = np.zeros((0, len(TRACE_COLUMNS)))
        if data.shape[1] != len(TRACE_COLUMNS):
            raise ValueError("trace rows have the wrong number of fields")
        cols = {c: data[:, n].copy() for n, c in enumerate(TRACE_COLUMNS)}
        t = cols["t"]
        rate = SAMPLE_RATE_HZ
        if t.size > 1:
            step = np.diff(t)
            if np.any(step <= 0):
                raise ValueError("trace time must increase monotonically")
            rate = 1.0 / float(np.median(step))
            if np.max(np.abs(step * rate - 1)) > 1e-3:
                raise ValueError("trace sample spacing is not uniform")
        return cls(cols, rate)


class PlantSimulator:
    """Stateful plate + finger integrator advancing in caller-sized blocks."""

    def __init__(self, params: PlateParams, scenario: TouchScenario, n_samples: int,
                 rate_hz: float = SAMPLE_RATE_HZ, noise_sigma: float = HALL_SIGMA_M,
                 rng: np.random.Generator | None = None, y0=None,
                 sensor_error: Callable[[np.ndarray], np.ndarray] | None = None):
        self.params = params
        # additive reading error ``e(t)`` of shape (n,) or (n, 2), e.g. an injected harmonic
        self.sensor_error = sensor_error
        self.dt = 1.0 / rate_hz
        self.rate_hz = rate_hz
        self.n = int(n_samples)
        self.t = np.arange(self.n) * self.dt
        self.W, self.P, self.contact, self.fparams, self.order = scenario.sample(self.t, params.d)
        self.w1 = self.P / params.d
        self.p = params.as_array()
        self.y = np.zeros(6) if y0 is None else np.array(y0, dtype=float)
        self.k = 0
        self.noise_sigma = noise_sigma
        self.rng = rng if rng is not None else np.random.default_rng(0)
        # drive description per sample
        self.amp1 = np.zeros(self.n)
        self.amp2 = np.zeros(self.n)
        self.theta = np.zeros(self.n)
        self.omega = np.zeros(self.n)
        self.ph2 = np.zeros(self.n)
        self.x = np.zeros((self.n, 2))
        self.i = np.zeros((self.n, 2))
        self.f = np.zeros(self.n)
        self.acc = np.zeros((self.n, 2))
        self.hall = np.zeros((self.n, 2))

    def advance(self, n: int) -> np.ndarray:
        """Integrate ``n`` samples with the drive already filled in; returns hall readings."""
        n = min(n, self.n - self.k)
        k0 = self.k
        status, idx = _run(self.y, k0, n, self.dt, self.p, self.amp1, self.amp2, self.theta, self.omega,
                           self.ph2, self.W, self.w1, self.contact, self.fparams, self.order,
                           self.x, self.i, self.f, self.acc, MAX_AMPLITUDE_M, MAX_TILT_RAD)
        end = idx + 1 if status else k0 + n
        if self.noise_sigma > 0:
            self.hall[k0:end] = self.x[k0:end] + self.noise_sigma * self.rng.standard_normal((end - k0, 2))
        else:
            self.hall[k0:end] = self.x[k0:end]
        if self.sensor_error is not None and end > k0:
            e = np.asarray(self.sensor_error(self.t[k0:end]), dtype=float)
            self.hall[k0:end] += e[:, None] if e.ndim == 1 else e
        self.k = end
        if status:
            raise SimulationAborted(f"{_STATUS_TEXT[status]} at t = {idx * self.dt:.6f} s (sample {idx})", idx)
        return self.hall[k0:end]

    def trace(self, a_cmd=None, ph_cmd=None, n: int | None = None) -> SimTrace:
        n = self.k if n is None else n
        cols = {
            "t": self.t[:n], "x1": self.x[:n, 0], "x2": self.x[:n, 1],
            "hall1": self.hall[:n, 0], "hall2": self.hall[:n, 1],
            "i1": self.i[:n, 0], "i2": self.i[:n, 1],
            "a_cmd": np.zeros(n) if a_cmd is None else a_cmd[:n],
            "ph_cmd": np.zeros(n) if ph_cmd is None else ph_cmd[:n],
            "f_finger": self.f[:n], "W_true": np.where(self.contact[:n], self.W[:n], 0.0),
            "P_true": np.where(self.contact[:n], self.P[:n], np.nan) if n else self.P[:0],
        }
        cols["P_true"] = np.nan_to_num(cols["P_true"], nan=0.0)
        return SimTrace({k: np.array(v, dtype=float) for k, v in cols.items()}, self.rate_hz,
                        {"acc1": self.acc[:n, 0].copy(), "acc2": self.acc[:n, 1].copy()})


@dataclass(frozen=True)
class PlateState:
    x1: float = 0.0
    x2: float = 0.0
    v1: float = 0.0
    v2: float = 0.0
    t: float = 0.0

    def tilt(self, d: float) -> float:
        return (self.x2 - self.x1) / d


def step_plate(params: PlateParams, state: PlateState, i1: float, i2: float, f_finger: float = 0.0,
               P: float | None = None, dt: float = 1.0 / SAMPLE_RATE_HZ) -> PlateState:
    """One RK4 step of the bare plate with constant currents.

    ``f_finger`` is an external downward force at ``P`` (default centre).
    Suspension coefficients follow the drift law from ``state.t``.
    """
    y = np.array([state.x1, state.x2, state.v1, state.v2, 0.0, 0.0])
    one = np.ones(1)
    P = params.d / 2 if P is None else P
    p = params.as_array()
    # shift the drift origin so the kernel's local time 0 is state.t
    p[3], p[4], p[5], p[6] = params.suspension_at(state.t)
    out_x, out_i, out_a = np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2))
    status, idx = _run(y, 0, 1, dt, p, one * i1, one * i2, one * (math.pi / 2), one * 0.0, one * 0.0,
                       one * f_finger, one * (P / params.d), np.ones(1, dtype=np.bool_), np.zeros((1, 6)), 2,
                       out_x, out_i, np.zeros(1), out_a, MAX_AMPLITUDE_M, MAX_TILT_RAD)
    if status:
        raise SimulationAborted(_STATUS_TEXT[status], idx)
    return PlateState(y[0], y[1], y[2], y[3], state.t + dt)


def plate_energy(params: PlateParams, x1, x2, v1, v2, t: float = 0.0):
    """Kinetic plus suspension potential energy."""
    M = params.mass_matrix()
    k1, k2, _, _ = params.suspension_at(t)
    v = np.stack([np.asarray(v1), np.asarray(v2)])
    ke = 0.5 * np.einsum("i...,ij,j...->...", v, M, v)
    return ke + 0.5 * k1 * np.asarray(x1) ** 2 + 0.5 * k2 * np.asarray(x2) ** 2


def run_open_loop(params: PlateParams, duration: float, current: Callable[[np.ndarray], np.ndarray] | None = None,
                  sine: tuple[float, float] | None = None, scenario: TouchScenario | None = None,
                  noise_sigma: float = 0.0, seed: int = 0, rate_hz: float = SAMPLE_RATE_HZ,
                  phase2_deg: float = 0.0) -> SimTrace:
    """Drive both coils without feedback.

    Either ``sine=(amplitude A, f_hz)`` (continuous carrier, coil 2 offset
    by ``phase2_deg``) or ``current(t)`` returning per-sample currents of
    shape ``(n,)`` or ``(n, 2)`` held over each step.
    """
    n = int(round(duration * rate_hz))
    sim = PlantSimulator(params, scenario or TouchScenario.untouched(), n, rate_hz, noise_sigma,
                         np.random.default_rng(seed))
    if sine is not None:
        A, f = sine
        k = np.arange(n)
        sim.amp1[:] = A
        sim.amp2[:] = A
        sim.omega[:] = 2 * np.pi * f
        sim.theta[:] = np.mod(2 * np.pi * f * k / rate_hz, 2 * np.pi)
        sim.ph2[:] = math.radians(phase2_deg)
    elif current is not None:
        c = np.asarray(current(sim.t), dtype=float)
        c = np.column_stack([c, c]) if c.ndim == 1 else c
        sim.amp1[:] = c[:, 0]
        sim.amp2[:] = c[:, 1]
        sim.theta[:] = math.pi / 2
    sim.advance(n)
    return sim.trace()
