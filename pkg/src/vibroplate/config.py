"""Scenario files.

A scenario is a JSON object; every key is optional::

    {
      "plate":    {"k1": 22400.0, "a_k1": 5.0},       # PlateParams overrides (SI)
      "finger":   "w_lt_0.5" | "w_gt_0.5:2" | "schedule" | {"m_f": 4, "b_f": 1.5, "k_f": 0.3} | null,
      "finger_order": 4,                             # used with "schedule"
      "skin_scale": {"exponent": 1.5, "W_ref": 0.25, "max_factor": 8},
      "load":     0.5 | {"times": [...], "values": [...]},    # N
      "position": 0.0275 | {"times": [...], "values": [...]}, # m from transducer 2
      "swipe":    {"W": 0.5, "P_range": [0.0125, 0.0425], "period": 1.0},
      "freq_hz":  261,
      "a_ref":    1e-5 | [1e-6, 1e-5, 1e-4],          # m, one run per entry
      "duration_s": 10.0,
      "seed": 0,
      "noise_sigma": 1e-6,
      "bandwidth_hz": 5, "cutoff_hz": 10,
      "phase_control": true,
      "sweep_to_hz": null,
      "frequencies": [20, 31, 47, 72, 111, 170, 261, 400],  # for synth
      "out": "out"
    }

``swipe`` overrides ``load``/``position``.  Unknown keys are rejected so
that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import control as ctl
from . import fingers as fm
from .plant import HALL_SIGMA_M, PlateParams, Profile, TouchScenario

MAX_VELOCITY_M_S = 0.06
MAX_DISPLACEMENT_M = 1e-3


class ConfigError(ValueError):
    pass


def max_reference(f_hz: float) -> float:
    """Largest admissible displacement amplitude at ``f_hz``."""
    return min(MAX_DISPLACEMENT_M, MAX_VELOCITY_M_S / (2 * math.pi * f_hz))


def _profile(value, name: str) -> Profile:
    if isinstance(value, (int, float)):
        return Profile.constant(float(value))
    if isinstance(value, dict) and set(value) == {"times", "values"}:
        try:
            return Profile(tuple(float(v) for v in value["times"]), tuple(float(v) for v in value["values"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    raise ConfigError(f"{name} must be a number or {{'times': [...], 'values': [...]}}")


@dataclass
class ScenarioConfig:
    plate: PlateParams = field(default_factory=PlateParams)
    finger: object = None
    finger_order: int = 4
    skin_scale: dict | None = None
    load: object = 0.0
    position: object = 0.0275
    swipe: dict | None = None
    freq_hz: float = 261.0
    a_ref: list = field(default_factory=lambda: [1e-5])
    duration_s: float = 2.0
    seed: int = 0
    noise_sigma: float = HALL_SIGMA_M
    bandwidth_hz: float = ctl.LOOP_BANDWIDTH_HZ
    cutoff_hz: float = ctl.ESTIMATOR_CUTOFF_HZ
    phase_control: bool = True
    sweep_to_hz: float | None = None
    frequencies: list = field(default_factory=lambda: list(ctl.DRIVE_FREQUENCIES))
    out: str = "out"

    def __post_init__(self):
        if self.freq_hz not in ctl.DRIVE_FREQUENCIES:
            raise ConfigError(f"freq_hz must be one of {list(ctl.DRIVE_FREQUENCIES)}, got {self.freq_hz}")
        if isinstance(self.a_ref, (int, float)):
            self.a_ref = [float(self.a_ref)]
        if not self.a_ref:
            raise ConfigError("a_ref must list at least one amplitude")
        top = max(self.freq_hz, self.sweep_to_hz or 0.0)
        lim = min(max_reference(self.freq_hz), max_reference(top))
        for a in self.a_ref:
            if not 0 <= a <= lim:
                raise ConfigError(f"a_ref {a} m outside [0, {lim:.4g}] m "
                                  f"(1 mm and 0.06 m/s at {self.freq_hz} Hz)")
        if self.duration_s < 0:
            raise ConfigError("duration_s must be non-negative")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        for f in self.frequencies:
            if not 0 < f < ctl.CONTROL_RATE_HZ / 2:
                raise ConfigError(f"synthesis frequency {f} Hz out of range")
        if self.finger is not None and self.finger != "schedule":
            try:
                fm.parse_model(self.finger)
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"finger: {exc}") from None
        self.scenario()  # validates profiles

    def finger_model(self):
        if self.finger is None or self.finger == "schedule":
            return self.finger
        return fm.parse_model(self.finger)

    def scenario(self) -> TouchScenario:
        scale = None
        if self.skin_scale is not None:
            try:
                scale = fm.power_law_skin_scale(**self.skin_scale)
            except TypeError as exc:
                raise ConfigError(f"skin_scale: {exc}") from None
        model = self.finger_model()
        if self.swipe is not None:
            allowed = {"W", "P_range", "period"}
            if not set(self.swipe) <= allowed or "W" not in self.swipe:
                raise ConfigError(f"swipe needs W and may set {sorted(allowed - {'W'})}")
            sc = TouchScenario.swipe(self.swipe["W"], self.duration_s,
                                     tuple(self.swipe.get("P_range", (0.0125, 0.0425))),
                                     self.swipe.get("period", 1.0), finger=model or "schedule",
                                     order=self.finger_order)
            return replace(sc, skin_scale=scale)
        sc = TouchScenario(W=_profile(self.load, "load"), P=_profile(self.position, "position"), finger=model,
                           order=self.finger_order, skin_scale=scale)
        if any(v > 0 for v in sc.W.values) and model is None:
            raise ConfigError("a load is configured without a finger model")
        return sc

    def with_overrides(self, **kw) -> "ScenarioConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def load_config(path: str | Path | None = None, data: dict | None = None) -> ScenarioConfig:
    """Parse and validate a scenario file (or an already-decoded mapping)."""
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    data = dict(data or {})
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    plate = data.pop("plate", {}) or {}
    plate_keys = {f.name for f in fields(PlateParams)}
    if set(plate) - plate_keys:
        raise ConfigError(f"unknown plate parameters: {sorted(set(plate) - plate_keys)}")
    try:
        data["plate"] = PlateParams(**{k: float(v) for k, v in plate.items()})
        return ScenarioConfig(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
