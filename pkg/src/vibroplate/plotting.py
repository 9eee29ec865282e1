"""Figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import control as ctl  # noqa: E402

# no timestamps in the files, so reruns are byte-identical
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=110, metadata=_META)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def plot_synthesis(designs, path) -> Path:
    fig, (ax_m, ax_p) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    for d in designs:
        f = np.logspace(-1, np.log10(4 * d.bandwidth_hz), 300)
        L = ctl.filter_dynamics(d.filter_cutoff_hz, d.rate_hz)
        T = ctl.sensitivity_target(d.bandwidth_hz)
        r = ctl.realized_sensitivity(d.reduced.tf, L, f)
        ax_m.semilogx(f, 20 * np.log10(np.abs(r)), lw=1, label=f"{d.f_hz:g} Hz")
        ax_p.semilogx(f, np.degrees(np.angle(r)), lw=1)
    t = ctl.sensitivity_target(ctl.LOOP_BANDWIDTH_HZ).freqresp(f)
    ax_m.semilogx(f, 20 * np.log10(np.abs(t)), "k--", lw=1, label="target")
    ax_p.semilogx(f, np.degrees(np.angle(t)), "k--", lw=1)
    ax_m.set_ylabel("|T| (dB)")
    ax_p.set_ylabel("phase (deg)")
    ax_p.set_xlabel("frequency (Hz)")
    ax_m.legend(fontsize=7, ncol=3)
    ax_m.set_title("realised closed loop after order reduction")
    fig.tight_layout()
    return _save(fig, path)


def plot_loop(result, path, a_ref=None) -> Path:
    """Amplitude/phase estimates and coil currents of one closed-loop run."""
    tr = result.trace
    fig, axes = plt.subplots(3, 1, figsize=(6.4, 6.4), sharex=True)
    axes[0].plot(result.t_ctrl, result.amp_est * 1e6, lw=0.8, label="estimate")
    if a_ref is not None:
        axes[0].plot(result.t_ctrl, np.full_like(result.t_ctrl, a_ref * 1e6), "k--", lw=0.8, label="reference")
    axes[0].set_ylabel("amplitude (um)")
    axes[0].legend(fontsize=7)
    axes[1].plot(result.t_ctrl, result.rel_phase, lw=0.8, label="x2 vs x1")
    axes[1].plot(result.t_ctrl, result.u_phase, lw=0.8, label="coil 2 offset")
    axes[1].set_ylabel("phase (deg)")
    axes[1].legend(fontsize=7)
    step = max(1, len(tr) // 20000)
    axes[2].plot(tr["t"][::step], tr["i1"][::step] * 1e3, lw=0.5, label="i1")
    axes[2].plot(tr["t"][::step], tr["i2"][::step] * 1e3, lw=0.5, label="i2")
    axes[2].set_ylabel("current (mA)")
    axes[2].set_xlabel("time (s)")
    axes[2].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_identification(result, path) -> Path:
    fig, axes = plt.subplots(3, 1, figsize=(6.4, 6.4), sharex=True)
    t = result.t
    step = max(1, t.size // 20000)
    axes[0].plot(t[::step], result.W[::step], lw=0.8)
    axes[0].set_ylabel("W (N)")
    for s in result.segments:
        if not s.loaded:
            axes[0].axvspan(t[s.start], t[s.end - 1], color="0.85", lw=0)
    axes[1].plot(t[::step], result.P[::step] * 1e3, lw=0.8)
    axes[1].set_ylabel("P (mm)")
    z = np.where(result.valid, result.Zmag, np.nan)
    axes[2].plot(t[::step], z[::step], lw=0.8)
    axes[2].set_ylabel("|Z| (N s/m)")
    axes[2].set_xlabel("time (s)")
    axes[0].set_title(f"identification at {result.f_hz:g} Hz (unloaded stretches shaded)")
    fig.tight_layout()
    return _save(fig, path)


def plot_curves(curves: dict, path, label: str = "") -> Path:
    fig, (ax_z, ax_y) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    f = curves["f_hz"]
    ax_z.loglog(f, curves["Zmag"], lw=1)
    ax_z.set_ylabel("|Z| (N s/m)")
    ax_z.set_title(label)
    for key in ("Ys", "Yp", "Yt"):
        if np.any(curves[key] > 0):
            ax_y.loglog(f, curves[key], lw=1, label=key)
    ax_y.set_ylabel("|V/F| (m/(N s))")
    ax_y.set_xlabel("frequency (Hz)")
    ax_y.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
