"""Lumped-parameter fingertip models and the matching-experiment statistics.

Two model families describe the force needed to move the skin surface:

* ``Order2``: a single mass-damper-spring, ``Z = (m s^2 + b s + k)/s``.
* ``Order4``: a skin mass coupled through a spring/damper to a phalanx mass
  that is itself tied to ground.

All parameters are stored in SI units (kg, N*s/m, N/m).  Use
``from_table_units`` for the customary g / N*s/m / N/mm triples.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._files import atomic_write_text

MATCH_HEADER = ("f_hz", "v", "F_a", "F_r", "W", "subject_id")
CURVE_HEADER = ("f_hz", "Zmag", "Zphase", "Ys", "Yp", "Yt")

# loads (N) at which the two built-in parameter sets are taken to apply
LIGHT_LOAD_N = 0.25
FIRM_LOAD_N = 1.0
LOAD_SPLIT_N = 0.5

# quoted human-study summary values; not used by any acceptance check
HUMAN_REFERENCE = {
    "note": "summary values quoted from the matching study, not fitted data",
    "mean_v_over_Fa_m_per_Ns": 0.64,
    "low_frequency_stiffness_N_per_m": 150.0,
    "beta_near_unity_up_to_hz": 47.0,
    "cv_median_velocity": 0.205,
    "cv_median_reaction_force": 0.275,
}


def _s(f_hz) -> np.ndarray:
    f = np.asarray(f_hz, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    return 2j * np.pi * f


def _check_positive(obj) -> None:
    for fd in fields(obj):
        v = getattr(obj, fd.name)
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{fd.name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class Order2:
    m_f: float
    b_f: float
    k_f: float

    def __post_init__(self):
        _check_positive(self)

    @classmethod
    def from_table_units(cls, m_g, b_Ns_per_m, k_N_per_mm) -> "Order2":
        return cls(m_g * 1e-3, b_Ns_per_m, k_N_per_mm * 1e3)


@dataclass(frozen=True)
class Order4:
    m_p: float
    b_p: float
    k_p: float
    m_s: float
    b_s: float
    k_s: float

    def __post_init__(self):
        _check_positive(self)

    @classmethod
    def from_table_units(cls, m_p, b_p, k_p, m_s, b_s, k_s) -> "Order4":
        return cls(m_p * 1e-3, b_p, k_p * 1e3, m_s * 1e-3, b_s, k_s * 1e3)

    def quartic(self) -> np.ndarray:
        """Coefficients of ``A(s)``, highest power first."""
        mp, bp, kp, ms, bs, ks = self.m_p, self.b_p, self.k_p, self.m_s, self.b_s, self.k_s
        return np.array([
            ms * mp,
            ms * (bp + bs) + mp * bs,
            ms * (ks + kp) + mp * ks + bs * bp,
            bs * kp + bp * ks,
            ks * kp,
        ])

    def static_stiffness(self) -> float:
        """Series combination of skin and phalanx springs."""
        return self.k_s * self.k_p / (self.k_s + self.k_p)


FingerModel = Order2 | Order4


@dataclass(frozen=True)
class FingerPreset:
    order2: Order2
    order4: Order4


PRESETS = {
    "w_lt_0.5": FingerPreset(
        Order2.from_table_units(4.0, 1.0, 0.2),
        Order4.from_table_units(4.0, 1.0, 0.2, 0.2, 1.5, 1.0),
    ),
    "w_gt_0.5": FingerPreset(
        Order2.from_table_units(4.0, 1.5, 0.3),
        Order4.from_table_units(4.0, 1.5, 0.3, 0.2, 8.0, 8.0),
    ),
}


def preset(name: str, order: int = 4) -> FingerModel:
    try:
        p = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown finger preset {name!r}; choose from {sorted(PRESETS)}") from None
    if order == 2:
        return p.order2
    if order == 4:
        return p.order4
    raise ValueError("order must be 2 or 4")


def impedance_2nd(model: Order2, f_hz):
    s = _s(f_hz)
    return (model.m_f * s**2 + model.b_f * s + model.k_f) / s


def _phalanx_poly(model: Order4) -> np.ndarray:
    # m_p s^3 + (b_p + b_s) s^2 + (k_p + k_s) s
    return np.array([model.m_p, model.b_p + model.b_s, model.k_p + model.k_s, 0.0])


def impedance_4th(model: Order4, f_hz):
    s = _s(f_hz)
    return np.polyval(model.quartic(), s) / np.polyval(_phalanx_poly(model), s)


def skin_admittance(model: Order4, f_hz):
    s = _s(f_hz)
    return np.polyval(_phalanx_poly(model), s) / np.polyval(model.quartic(), s)


def phalanx_velocity_tf(model: Order4, f_hz):
    s = _s(f_hz)
    return (model.b_s * s**2 + model.k_s * s) / np.polyval(model.quartic(), s)


def tissue_velocity_tf(model: Order4, f_hz):
    s = _s(f_hz)
    return (model.m_p * s**3 + model.b_p * s**2 + model.k_p * s) / np.polyval(model.quartic(), s)


def impedance(model: FingerModel, f_hz):
    if isinstance(model, Order2):
        return impedance_2nd(model, f_hz)
    if isinstance(model, Order4):
        return impedance_4th(model, f_hz)
    raise TypeError(f"not a finger model: {type(model).__name__}")


def rigid_skin_equivalent(model: Order4) -> Order2:
    """The 2nd-order model the 4th-order one approaches as the skin stiffens."""
    return Order2(model.m_p + model.m_s, model.b_p, model.k_p)


# -- load dependence ---------------------------------------------------------

def _lerp(a: float, b: float, t: float) -> float:
    return a + (b - a) * t


def model_at_load(W: float, order: int = 4, light: str = "w_lt_0.5", firm: str = "w_gt_0.5",
                  light_W: float = LIGHT_LOAD_N, firm_W: float = FIRM_LOAD_N,
                  skin_scale: Callable[[float], float] | None = None) -> FingerModel:
    """Finger parameters at normal load ``W`` (N).

    Default: every parameter is interpolated linearly between the light and
    firm sets and held constant outside ``[light_W, firm_W]``.  If
    ``skin_scale`` is given, the light-touch 4th-order set is used with its
    skin damping and stiffness multiplied by ``skin_scale(W)``.
    """
    if W < 0:
        raise ValueError("load must be non-negative")
    lo, hi = preset(light, order), preset(firm, order)
    if skin_scale is not None:
        if order != 4:
            raise ValueError("skin scaling applies to the 4th-order model")
        g = float(skin_scale(W))
        return replace(lo, b_s=lo.b_s * g, k_s=lo.k_s * g)
    t = min(max((W - light_W) / (firm_W - light_W), 0.0), 1.0)
    vals = {fd.name: _lerp(getattr(lo, fd.name), getattr(hi, fd.name), t) for fd in fields(lo)}
    return type(lo)(**vals)


def power_law_skin_scale(W_ref: float = LIGHT_LOAD_N, exponent: float = 1.5,
                         max_factor: float = 8.0) -> Callable[[float], float]:
    """Skin stiffening factor ``(W/W_ref)**exponent`` clipped to ``[1, max_factor]``."""
    def scale(W: float) -> float:
        return float(np.clip((max(W, 1e-12) / W_ref) ** exponent, 1.0, max_factor))
    return scale


# -- matching experiment records ---------------------------------------------

@dataclass(frozen=True)
class MatchRecord:
    f_hz: float
    v: float
    F_a: float
    F_r: float
    W: float
    subject_id: str = ""

    def __post_init__(self):
        for name in ("f_hz", "v", "F_a", "F_r", "W"):
            val = getattr(self, name)
            if not (val >= 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be finite and non-negative, got {val}")


def beta(record: MatchRecord) -> float:
    """Reaction-to-friction force ratio at equal perceived intensity."""
    if record.F_a == 0:
        raise ZeroDivisionError("F_a is zero")
    return record.F_r / record.F_a


def velocity_force_ratio(record: MatchRecord) -> float:
    if record.F_a == 0:
        raise ZeroDivisionError("F_a is zero")
    return record.v / record.F_a


def coefficient_of_variation(samples: Sequence[float]) -> float:
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("no samples")
    mu = x.mean()
    if mu == 0:
        raise ZeroDivisionError("mean is zero")
    return float(x.std() / mu)


def split_by_load(records: Iterable[MatchRecord], threshold: float = LOAD_SPLIT_N):
    """(light, firm) lists; records exactly at the threshold go to ``light``."""
    light, firm = [], []
    for r in records:
        (light if r.W <= threshold else firm).append(r)
    return light, firm


def per_frequency(records: Iterable[MatchRecord], fn: Callable[[MatchRecord], float]) -> dict[float, np.ndarray]:
    out: dict[float, list[float]] = {}
    for r in records:
        out.setdefault(r.f_hz, []).append(fn(r))
    return {f: np.asarray(v) for f, v in sorted(out.items())}


def cv_by_subject(records: Iterable[MatchRecord], quantity: str = "v") -> list[float]:
    """Pooled CVs of ``quantity`` over each (subject, frequency) group."""
    groups: dict[tuple[str, float], list[float]] = {}
    for r in records:
        groups.setdefault((r.subject_id, r.f_hz), []).append(getattr(r, quantity))
    return [coefficient_of_variation(v) for _, v in sorted(groups.items()) if len(v) > 1]


def admittance_comparison(records: Iterable[MatchRecord], model: FingerModel) -> dict[str, np.ndarray]:
    """Mean v/F_a per frequency beside the model admittance magnitude."""
    by_f = per_frequency(records, velocity_force_ratio)
    f = np.array(list(by_f))
    ratio = np.array([v.mean() for v in by_f.values()])
    return {"f_hz": f, "v_over_Fa": ratio, "model_Y": np.abs(1.0 / impedance(model, f))}


def synthetic_match_records(freqs_hz: Sequence[float], model_for_load: Callable[[float], FingerModel],
                            loads: Sequence[float], ratio: float = HUMAN_REFERENCE["mean_v_over_Fa_m_per_Ns"],
                            F_a: float = 0.02, v_spread: float = 0.0, n_repeats: int = 1,
                            rng: np.random.Generator | None = None, subject_id: str = "synthetic"
                            ) -> list[MatchRecord]:
    """Matching records with ``v = ratio * F_a`` and ``F_r = |Z| * v``.

    ``v_spread`` is the log-normal sigma applied to the selected velocity.
    """
    rng = rng or np.random.default_rng(0)
    out = []
    for W in loads:
        model = model_for_load(W)
        for f in freqs_hz:
            z = abs(complex(impedance(model, f)))
            for _ in range(n_repeats):
                v = ratio * F_a * (math.exp(v_spread * rng.standard_normal()) if v_spread else 1.0)
                out.append(MatchRecord(float(f), v, F_a, z * v, float(W), subject_id))
    return out


def _fmt(x) -> str:
    return repr(float(x))


def write_match_records(path: str | Path, records: Iterable[MatchRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATCH_HEADER)
    for r in records:
        w.writerow([_fmt(r.f_hz), _fmt(r.v), _fmt(r.F_a), _fmt(r.F_r), _fmt(r.W), r.subject_id])
    atomic_write_text(path, buf.getvalue())


def read_match_records(path: str | Path) -> list[MatchRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != MATCH_HEADER:
            raise ValueError(f"expected header {','.join(MATCH_HEADER)}, got {','.join(header)}")
        out = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(MATCH_HEADER):
                raise ValueError(f"line {i}: expected {len(MATCH_HEADER)} fields")
            out.append(MatchRecord(*(float(v) for v in row[:5]), row[5]))
    return out


# -- model curves ------------------------------------------------------------

def model_curves(model: FingerModel, freqs_hz) -> dict[str, np.ndarray]:
    """|Z|, phase (deg) and velocity magnitudes per unit force.

    For a 2nd-order model the skin and phalanx move together, so
    ``Yp = Ys`` and ``Yt = 0``.
    """
    f = np.asarray(freqs_hz, dtype=float)
    Z = impedance(model, f)
    Ys = np.abs(1.0 / Z)
    if isinstance(model, Order4):
        Yp = np.abs(phalanx_velocity_tf(model, f))
        Yt = np.abs(tissue_velocity_tf(model, f))
    else:
        Yp, Yt = Ys.copy(), np.zeros_like(Ys)
    return {"f_hz": f, "Zmag": np.abs(Z), "Zphase": np.degrees(np.angle(Z)), "Ys": Ys, "Yp": Yp, "Yt": Yt}


def curves_csv(curves: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for row in zip(*(curves[k] for k in CURVE_HEADER)):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def parse_model(spec: str | dict) -> FingerModel:
    """Preset name (optionally ``name:2``) or a dict of table-unit parameters."""
    if isinstance(spec, str):
        name, _, order = spec.partition(":")
        return preset(name, int(order) if order else 4)
    keys = set(spec)
    if keys == {"m_f", "b_f", "k_f"}:
        return Order2.from_table_units(spec["m_f"], spec["b_f"], spec["k_f"])
    if keys == {"m_p", "b_p", "k_p", "m_s", "b_s", "k_s"}:
        return Order4.from_table_units(*(spec[k] for k in ("m_p", "b_p", "k_p", "m_s", "b_s", "k_s")))
    raise ValueError(f"finger parameters must be {{m_f,b_f,k_f}} or {{m_p,b_p,k_p,m_s,b_s,k_s}}, got {sorted(keys)}")
