"""``vibroplate`` command line: synth, simulate, identify, curves, accept.

Every command writes CSV/JSON plus a PNG figure into ``--out``.  Errors are
reported as one JSON line on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import acceptance as acc
from . import control as ctl
from . import estimation as est
from . import fingers as fm
from . import loop
from . import plant as pl
from . import plotting
from ._files import atomic_write_text
from .config import ConfigError, ScenarioConfig, load_config

EXIT_FAILED = 1
EXIT_ERROR = 2


class CommandError(RuntimeError):
    pass


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    over = {"seed": args.seed, "out": args.out, "freq_hz": args.freq}
    if args.aref is not None:
        over["a_ref"] = list(args.aref)
    try:
        return cfg.with_overrides(**over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- synth ----------------------------------------------------------------------

FIT_HEADER = ("f_hz", "plant_gain", "phase_gain", "reduction_mag_err_db", "loop_mag_err_db",
              "loop_phase_err_deg", "status")


def cmd_synth(args) -> int:
    cfg = _config(args)
    tables = loop.FeedforwardTables(cfg.plate)
    freqs = [args.freq] if args.freq is not None else cfg.frequencies
    designs, rows, failed = [], [], 0
    for f in freqs:
        try:
            d = ctl.synthesize(f, tables.heave_gain(f), tables.phase_gain(f), cfg.bandwidth_hz,
                               cutoff_hz=cfg.cutoff_hz)
        except ctl.SynthesisError as exc:
            failed += 1
            rows.append([f, "", "", "", "", "", f"failed: {exc}"])
            continue
        designs.append(d)
        rows.append([f, f"{abs(d.plant_gain):.6e}", f"{d.phase_gain:.6e}", f"{d.reduced.mag_err_db:.4f}",
                     f"{d.loop_mag_err_db:.4f}", f"{d.loop_phase_err_deg:.4f}", "ok"])
    out = Path(cfg.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIT_HEADER)
    w.writerows(rows)
    atomic_write_text(out / "controllers.json", ctl.export_designs(designs))
    atomic_write_text(out / "synthesis_report.csv", buf.getvalue())
    if designs:
        plotting.plot_synthesis(designs, out / "synthesis.png")
    _emit({"command": "synth", "records": len(designs), "failed": failed, "out": str(out)})
    if not designs:
        raise CommandError("synthesis failed at every frequency")
    return 0


# -- simulate -------------------------------------------------------------------

def _simulate_one(job):
    cfg, a_ref, path = job
    s = loop.LoopSettings(cfg.freq_hz, a_ref, cfg.duration_s, seed=cfg.seed, noise_sigma=cfg.noise_sigma,
                          bandwidth_hz=cfg.bandwidth_hz, cutoff_hz=cfg.cutoff_hz,
                          phase_control=cfg.phase_control, sweep_to_hz=cfg.sweep_to_hz)
    try:
        r = loop.run_closed_loop(cfg.plate, cfg.scenario(), s)
    except pl.SimulationAborted as exc:
        if exc.trace is not None:
            exc.trace.write_csv(path.with_suffix(".aborted.csv"))
        raise
    r.trace.write_csv(path)
    png = path.with_suffix(".png")
    plotting.plot_loop(r, png, a_ref)
    return {"a_ref": a_ref, "trace": str(path), "figure": str(png), "samples": len(r.trace)}


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    jobs = [(cfg, a, out / f"trace_{cfg.freq_hz:g}Hz_{a * 1e6:g}um.csv") for a in cfg.a_ref]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            runs = list(ex.map(_simulate_one, jobs))
    else:
        runs = [_simulate_one(j) for j in jobs]
    _emit({"command": "simulate", "f_hz": cfg.freq_hz, "seed": cfg.seed, "runs": runs})
    return 0


# -- identify -------------------------------------------------------------------

def cmd_identify(args) -> int:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    out = Path(args.out or cfg.out)
    trace = pl.SimTrace.read_csv(args.trace)
    res = est.identify(trace, cfg.plate, args.freq)
    stem = Path(args.trace).stem
    csv_path, rep_path = out / f"{stem}_analysis.csv", out / f"{stem}_report.json"
    res.write(csv_path, rep_path)
    plotting.plot_identification(res, out / f"{stem}_analysis.png")
    z = res.valid_zmag()
    _emit({"command": "identify", "f_hz": res.f_hz, "analysis": str(csv_path), "report": str(rep_path),
           "median_zmag": float(np.median(z)) if z.size else None})
    return 0


# -- curves ---------------------------------------------------------------------

def cmd_curves(args) -> int:
    spec = args.model
    if spec.lstrip().startswith("{"):
        try:
            spec = json.loads(spec)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model parameters are not valid JSON: {exc.msg}") from None
    try:
        model = fm.parse_model(spec)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"unknown finger model {args.model!r}: {exc}") from None
    if not 0 < args.fmin < args.fmax:
        raise ConfigError("need 0 < fmin < fmax")
    f = np.logspace(np.log10(args.fmin), np.log10(args.fmax), args.points)
    curves = fm.model_curves(model, f)
    out = Path(args.out or "out")
    label = args.model if isinstance(spec, str) else "custom"
    stem = "curves_" + ("".join(c if c.isalnum() or c in "._" else "_" for c in label))
    atomic_write_text(out / f"{stem}.csv", fm.curves_csv(curves))
    plotting.plot_curves(curves, out / f"{stem}.png", label)
    _emit({"command": "curves", "model": label, "csv": str(out / f"{stem}.csv"), "points": int(f.size)})
    return 0


# -- accept ---------------------------------------------------------------------

def _corrupt(base: pl.PlateParams, items) -> pl.PlateParams:
    names = {f.name for f in fields(pl.PlateParams)}
    kw = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or key not in names:
            raise ConfigError(f"--corrupt expects name=value with name in {sorted(names)}, got {item!r}")
        try:
            kw[key] = float(val)
        except ValueError:
            raise ConfigError(f"--corrupt {key}: {val!r} is not a number") from None
    return replace(base, **kw)


def cmd_accept(args) -> int:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    ctx = acc.AcceptanceContext(plant=_corrupt(cfg.plate, args.corrupt), nominal=cfg.plate, jobs=args.jobs)
    only = set(args.only) if args.only else None
    results = acc.run_all(ctx, only, emit=lambda r: _emit(r.record()))
    if args.out:
        atomic_write_text(Path(args.out) / "acceptance.jsonl", acc.results_json_lines(results))
    failed = [r.number for r in results if not r.passed]
    return EXIT_FAILED if failed else 0


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vibroplate", description="Closed-loop vibrotactile plate twin")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, freq=True, aref=True):
        sp.add_argument("--config", help="scenario JSON file")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--out", help="output directory")
        if freq:
            sp.add_argument("--freq", type=float, help="drive frequency (Hz)")
        if aref:
            sp.add_argument("--aref", type=float, nargs="+", help="reference amplitude(s) (m)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    s = sub.add_parser("synth", help="design controllers for each drive frequency")
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("simulate", help="closed-loop run, one trace per reference amplitude")
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify", help="finger impedance and suspension fit from a trace CSV")
    s.add_argument("trace")
    common(s, aref=False)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("curves", help="finger model impedance/admittance curves")
    s.add_argument("model", help="preset name (w_lt_0.5, w_gt_0.5:2, ...) or JSON parameters")
    s.add_argument("--fmin", type=float, default=1.0)
    s.add_argument("--fmax", type=float, default=1000.0)
    s.add_argument("--points", type=int, default=200)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_curves)

    s = sub.add_parser("accept", help="run the acceptance suite (one JSON line per criterion)")
    common(s, freq=False, aref=False)
    s.add_argument("--only", type=int, nargs="+", metavar="N", help="criterion numbers to run")
    s.add_argument("--corrupt", action="append", metavar="NAME=VALUE",
                   help="simulate a plate that differs from the nominal one")
    s.set_defaults(func=cmd_accept)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        args.jobs = 1
    try:
        return args.func(args)
    except (ConfigError, CommandError, pl.SimulationAborted, ValueError, OSError) as exc:
        kind = type(exc).__name__
        sys.stderr.write(json.dumps({"error": kind, "command": args.command, "message": str(exc)}) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
