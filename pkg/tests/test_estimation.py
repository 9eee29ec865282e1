import json
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibroplate import estimation as est
from vibroplate import fingers as fm
from vibroplate import loop
from vibroplate import plant as pl

RATE = pl.SAMPLE_RATE_HZ
P0 = pl.PlateParams()


def drive_amplitude(f):
    # constant 30 mm/s velocity, capped at 1 mm
    return min(0.03 / (2 * math.pi * f), 1e-3)


@lru_cache(maxsize=None)
def pressed_run(f, W, finger, order=4, P=0.0275, duration=3.0, sigma=pl.HALL_SIGMA_M, seed=3):
    model = fm.preset(finger, order) if finger in fm.PRESETS else fm.parse_model(json.loads(finger))
    sc = pl.TouchScenario(W=pl.Profile((0.0, 1.0, 1.1), (0.0, 0.0, W)), P=pl.Profile.constant(P), finger=model)
    r = loop.run_closed_loop(P0, sc, loop.LoopSettings(f, drive_amplitude(f), duration, seed=seed,
                                                       noise_sigma=sigma))
    return r.trace, model


@lru_cache(maxsize=None)
def unloaded_run(f, duration, params=P0, sigma=pl.HALL_SIGMA_M, seed=1, aref=12e-6):
    s = loop.LoopSettings(f, aref, duration, seed=seed, noise_sigma=sigma)
    return loop.run_closed_loop(params, pl.TouchScenario.untouched(), s).trace


class TestBands:
    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(-1e-3, 1e-3), min_size=5, max_size=400))
    def test_split_is_complementary(self, xs):
        x = np.array(xs)
        lo, hi = est.split_bands(x, RATE, 111.0)
        assert np.allclose(lo + hi, x, rtol=0, atol=1e-15)

    def test_slow_part_settles_to_dc(self):
        t = np.arange(int(RATE)) / RATE
        x = -5e-6 + 1e-5 * np.sin(2 * math.pi * 111.0 * t)
        lo, _ = est.split_bands(x, RATE, 111.0)
        assert lo[-3000:].mean() == pytest.approx(-5e-6, rel=1e-3)
        assert np.ptp(lo[-3000:]) < 1e-8

    def test_bandpass_unity_at_centre(self):
        t = np.arange(int(RATE)) / RATE
        y = est.bandpass(np.sin(2 * math.pi * 261.0 * t), 261.0, RATE)
        assert np.abs(y[-3000:]).max() == pytest.approx(1.0, rel=1e-3)

    @pytest.mark.parametrize("f", [20.0, 261.0, 400.0])
    def test_central_derivatives_exact_for_sinusoid(self, f):
        w = 2 * math.pi * f
        t = np.arange(3000) / RATE
        v, a = est.central_derivatives(np.sin(w * t), RATE, f)
        assert np.allclose(v[1:-1], w * np.cos(w * t[1:-1]), rtol=0, atol=1e-9 * w)
        assert np.allclose(a[1:-1], -w * w * np.sin(w * t[1:-1]), rtol=0, atol=1e-9 * w * w)

    def test_short_input(self):
        v, a = est.central_derivatives(np.ones(2), RATE)
        assert not np.any(v) and not np.any(a)


class TestLoadAndPosition:
    def test_zero(self):
        assert est.estimate_normal_load(0.0, 0.0, P0) == 0.0

    def test_example_value(self):
        assert est.estimate_normal_load(-5e-6, -5e-6, P0) == pytest.approx(0.2265)

    def test_uses_drifted_stiffness(self):
        p = pl.PlateParams(a_k1=100.0, a_k2=100.0)
        assert est.estimate_normal_load(-5e-6, -5e-6, p, t=10.0) == pytest.approx(0.2265 + 2000 * 5e-6)

    def test_symmetric_position(self):
        x1 = -1e-5
        x2 = x1 * P0.k1 / P0.k2
        assert est.estimate_position(x1, x2, P0) == pytest.approx(0.0275)

    def test_position_limit(self):
        P = est.estimate_position(-1e-4, -2.3e-7, P0)
        assert P == pytest.approx(P0.d, rel=0.01)

    def test_light_touch_indeterminate(self):
        with pytest.raises(est.IndeterminatePositionError):
            est.estimate_position(-1e-8, -1e-8, P0)

    def test_array_marks_indeterminate(self):
        P = est.estimate_position(np.array([-1e-5, 0.0]), np.array([-1e-5, 0.0]), P0)
        assert np.isfinite(P[0]) and np.isnan(P[1])

    @settings(max_examples=50)
    @given(st.floats(0.05, 2.0), st.floats(0.002, 0.053))
    def test_statics_round_trip(self, W, P):
        f1, f2 = W * P / P0.d, W * (1 - P / P0.d)
        x1, x2 = -f1 / P0.k1, -f2 / P0.k2
        assert est.estimate_normal_load(x1, x2, P0) == pytest.approx(W)
        if min(f1, f2) > 0.005:
            assert est.estimate_position(x1, x2, P0) == pytest.approx(P)

    def test_simulated_press_load(self):
        tr, _ = pressed_run(111.0, 0.5, "w_gt_0.5", 2, duration=2.5)
        lo1, _ = est.split_bands(tr["hall1"], RATE, 111.0)
        lo2, _ = est.split_bands(tr["hall2"], RATE, 111.0)
        W = est.estimate_normal_load(lo1, lo2, P0)[-int(0.5 * RATE):]
        assert W.mean() == pytest.approx(0.5, rel=0.02)

    def test_simulated_position(self):
        tr, _ = pressed_run(111.0, 1.0, "w_gt_0.5", 2, P=0.020, duration=2.5)
        lo1, _ = est.split_bands(tr["hall1"], RATE, 111.0)
        lo2, _ = est.split_bands(tr["hall2"], RATE, 111.0)
        P = est.estimate_position(lo1, lo2, P0)[-int(0.5 * RATE):]
        assert np.nanmean(P) == pytest.approx(0.020, abs=1e-3)


class TestForces:
    def test_zero_motion(self):
        F1, F2 = est.device_forces(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, P0)
        assert (F1, F2) == (0.0, 0.0)

    def test_heave_phasor(self):
        # x1 = x2 = X sin(wt): each mount carries k x + b v + (m/2) a
        X, f = 1e-5, 111.0
        w = 2 * math.pi * f
        t = np.linspace(0, 0.02, 200)
        x = X * np.sin(w * t)
        v = X * w * np.cos(w * t)
        a = -w * w * x
        F1, F2 = est.device_forces(x, x, v, v, a, a, P0)
        want1 = (P0.k1 - P0.m / 2 * w * w) * x + P0.b1 * v
        assert np.allclose(F1, want1, rtol=1e-12, atol=1e-18)
        assert np.allclose(F2 - F1, (P0.k2 - P0.k1) * x, rtol=1e-12, atol=1e-18)

    def test_rocking_term(self):
        # opposite ends, pure rotation: inertia couples through I/d
        a = 1.0
        F1, F2 = est.device_forces(0, 0, 0, 0, -a, a, P0)
        rot = P0.I / P0.d * (2 * a / P0.d)
        assert F1 == pytest.approx(-rot) and F2 == pytest.approx(rot)

    def test_forces_balance_simulator(self):
        # bare plate, no noise: modelled mount forces equal the coil forces
        tr = pl.run_open_loop(P0, 0.5, sine=(0.01, 111.0), phase2_deg=30.0)
        v1, a1 = est.central_derivatives(tr["x1"], RATE, 111.0)
        v2, a2 = est.central_derivatives(tr["x2"], RATE, 111.0)
        F1, F2 = est.device_forces(tr["x1"], tr["x2"], v1, v2, a1, a2, P0)
        F_f = est.finger_force(tr["i1"], tr["i2"], F1, F2, P0.K)
        drive = P0.K * (tr["i1"] + tr["i2"])
        tail = slice(int(0.3 * RATE), -1)
        assert np.sqrt(np.mean(F_f[tail] ** 2)) < 1e-3 * np.sqrt(np.mean(drive[tail] ** 2))

    def test_finger_force_formula(self):
        assert est.finger_force(0.1, 0.2, 0.3, 0.4, 7.4) == pytest.approx(7.4 * 0.3 - 0.7)

    def test_free_decay_force_zero(self):
        state = pl.PlateState(x1=1e-4, x2=1e-4)
        xs = []
        for _ in range(3000):
            state = pl.step_plate(P0, state, 0.0, 0.0)
            xs.append((state.x1, state.x2))
        x = np.array(xs)
        f = P0.heave_resonance_hz()
        v1, a1 = est.central_derivatives(x[:, 0], RATE, f)
        v2, a2 = est.central_derivatives(x[:, 1], RATE, f)
        F1, F2 = est.device_forces(x[:, 0], x[:, 1], v1, v2, a1, a2, P0)
        F_f = est.finger_force(0.0, 0.0, F1, F2, P0.K)
        scale = (P0.k1 + P0.k2) * 1e-4
        assert np.abs(F_f[1:-1]).max() < 0.02 * scale

    def test_unloaded_closed_loop_residual(self):
        tr = unloaded_run(111.0, 1.5)
        res = est.identify(tr, P0, 111.0, fit=False)
        drive = est.bandpass(P0.K * (tr["i1"] + tr["i2"]), 111.0, RATE)
        tail = slice(int(0.5 * RATE), None)
        assert np.sqrt(np.mean(res.F_f[tail] ** 2)) < 0.02 * np.sqrt(np.mean(drive[tail] ** 2))

    def test_finger_force_matches_contact_force(self):
        tr, _ = pressed_run(111.0, 0.5, "w_lt_0.5", 2)
        res = est.identify(tr, P0, 111.0, fit=False)
        true = est.bandpass(tr["f_finger"], 111.0, RATE)
        tail = slice(int(1.6 * RATE), None)
        err = np.sqrt(np.mean((res.F_f[tail] - true[tail]) ** 2))
        assert err < 0.05 * np.sqrt(np.mean(true[tail] ** 2))


class TestImpedance:
    @pytest.mark.parametrize("Z0", [0.5 + 0j, 2.8 * np.exp(0.7j)])
    def test_synthetic_ratio(self, Z0):
        f = 111.0
        t = np.arange(int(RATE)) / RATE
        w = 2 * math.pi * f
        v = 0.03 * np.sin(w * t)
        F = np.real(Z0 * 0.03 * np.exp(1j * (w * t - math.pi / 2)))
        Z = est.lockin_impedance(F, v, f, RATE)
        # the 2f image of the 10 Hz averager leaves a small ripple on complex ratios
        assert np.allclose(Z[-3000:], Z0, rtol=1e-2)

    def test_low_velocity_flagged(self):
        Z = est.lockin_impedance(np.ones(100), np.zeros(100), 111.0, RATE)
        assert np.all(np.isnan(Z))

    def test_second_order_finger_value(self):
        model = fm.Order2(m_f=0.004, b_f=1.5, k_f=300.0)
        assert abs(complex(fm.impedance(model, 111.0))) == pytest.approx(2.80, abs=0.01)
        tr, _ = pressed_run(111.0, 0.5, json.dumps({"m_f": 4.0, "b_f": 1.5, "k_f": 0.3}), 2)
        res = est.identify(tr, P0, 111.0)
        assert np.median(res.valid_zmag()) == pytest.approx(2.80, rel=0.10)

    @pytest.mark.parametrize("finger, order", [("w_lt_0.5", 4), ("w_gt_0.5", 2)])
    @pytest.mark.parametrize("f", [47.0, 261.0])
    def test_round_trip(self, finger, order, f):
        tr, model = pressed_run(f, 0.5, finger, order)
        res = est.identify(tr, P0, f)
        true = abs(complex(fm.impedance(model, f)))
        assert np.median(res.valid_zmag()) == pytest.approx(true, rel=0.10)

    @pytest.mark.slow
    @pytest.mark.parametrize("f", [111.0, 261.0])
    def test_load_power_law(self, f):
        scale = fm.power_law_skin_scale(exponent=1.5)
        loads = (0.25, 0.5, 1.0)
        got, want = [], []
        for W in loads:
            sc = pl.TouchScenario(W=pl.Profile((0.0, 1.0, 1.1), (0.0, 0.0, W)), P=pl.Profile.constant(P0.d / 2),
                                  finger="schedule", skin_scale=scale)
            r = loop.run_closed_loop(P0, sc, loop.LoopSettings(f, drive_amplitude(f), 3.0, seed=3))
            got.append(np.median(est.identify(r.trace, P0, f).valid_zmag()))
            want.append(abs(complex(fm.impedance(fm.model_at_load(W, skin_scale=scale), f))))
        slope = np.polyfit(np.log(loads), np.log(got), 1)[0]
        expect = np.polyfit(np.log(loads), np.log(want), 1)[0]
        assert slope == pytest.approx(expect, abs=0.1)


class TestSuspensionFit:
    def test_noise_free_exact(self):
        tr = pl.run_open_loop(P0, 1.0, sine=(0.01, 400.0), phase2_deg=10.0)
        mask = np.zeros(len(tr), bool)
        mask[int(0.3 * RATE):] = True
        fit = est.fit_suspension(tr["t"], tr["hall1"], tr["hall2"], tr["i1"], tr["i2"], P0, 400.0, RATE, mask)
        assert fit.residual_rms < 1e-6
        assert fit.k1.c == pytest.approx(P0.k1, rel=1e-4)
        assert fit.b2.c == pytest.approx(P0.b2, rel=1e-3)

    def test_zero_drift(self):
        tr = unloaded_run(111.0, 8.0, aref=50e-6)
        mask = np.zeros(len(tr), bool)
        mask[int(0.3 * RATE):] = True
        fit = est.fit_suspension(tr["t"], tr["hall1"], tr["hall2"], tr["i1"], tr["i2"], P0, 111.0, RATE, mask)
        for name, true in (("k1", P0.k1), ("k2", P0.k2), ("b1", P0.b1), ("b2", P0.b2)):
            d = getattr(fit, name)
            assert d.c == pytest.approx(true, rel=0.01), name
            assert abs(d.a) * fit.duration_s < 0.01 * d.c, name

    def test_short_span_skips_slope(self):
        tr = unloaded_run(111.0, 1.5)
        fit = est.fit_suspension(tr["t"], tr["hall1"], tr["hall2"], tr["i1"], tr["i2"], P0, 111.0, RATE)
        assert fit.k1.a == 0.0 and fit.b2.a == 0.0

    def test_recovers_drift(self):
        p = pl.PlateParams(a_k1=5.0)
        tr = unloaded_run(111.0, 20.0, params=p, aref=50e-6)
        mask = np.zeros(len(tr), bool)
        mask[int(0.3 * RATE):] = True
        fit = est.fit_suspension(tr["t"], tr["hall1"], tr["hall2"], tr["i1"], tr["i2"], P0, 111.0, RATE, mask)
        assert fit.k1.a == pytest.approx(5.0, rel=0.10)
        assert fit.k1.c == pytest.approx(p.k1, rel=0.01)

    def test_silent_trace_rank_deficient(self):
        t = np.arange(3000) / RATE
        z = np.zeros_like(t)
        with pytest.raises(est.RankDeficientError):
            est.fit_suspension(t, z, z, z, z, P0, 111.0, RATE)

    def test_params_applies_fit(self):
        fit = est.SuspensionFit(est.LinearDrift(1.0, 2.0), est.LinearDrift(0.0, 3.0), est.LinearDrift(0.0, 0.5),
                                est.LinearDrift(0.0, 0.6), 0.0, 10, 1.0)
        p = fit.params(P0)
        assert (p.k1, p.a_k1, p.k2, p.b1, p.b2) == (2.0, 1.0, 3.0, 0.5, 0.6)
        assert p.m == P0.m


class TestSegmentation:
    def test_all_zero(self):
        segs = est.segment_contacts(np.zeros(1000))
        assert segs == [est.Segment(0, 1000, False)]

    def test_empty(self):
        assert est.segment_contacts(np.zeros(0)) == []

    def test_hysteresis_prevents_chatter(self):
        W = np.r_[np.zeros(10), 0.1 + 0.01 * np.sign(np.sin(np.arange(100))), np.zeros(10)]
        segs = est.segment_contacts(W, 0.1, 0.02)
        assert [s.loaded for s in segs] == [False, True, False]

    @settings(max_examples=50)
    @given(st.lists(st.floats(-0.5, 2.0), min_size=1, max_size=300))
    def test_segments_tile_and_alternate(self, ws):
        segs = est.segment_contacts(np.array(ws))
        assert segs[0].start == 0 and segs[-1].end == len(ws)
        for a, b in zip(segs, segs[1:]):
            assert a.end == b.start and a.loaded != b.loaded

    def test_noise_only(self):
        tr = unloaded_run(111.0, 2.0, aref=0.0)
        lo1, _ = est.split_bands(tr["hall1"], RATE)
        lo2, _ = est.split_bands(tr["hall2"], RATE)
        segs = est.segment_contacts(est.estimate_normal_load(lo1, lo2, P0))
        assert not any(s.loaded for s in segs)

    def test_square_wave(self):
        W = pl.Profile((0, 0.5, 0.501, 1.0, 1.001, 1.5, 1.501, 2.0, 2.001), (0, 0, 1, 1, 0, 0, 1, 1, 0))
        sc = pl.TouchScenario(W=W, P=pl.Profile.constant(P0.d / 2), finger=fm.preset("w_gt_0.5", 2))
        r = loop.run_closed_loop(P0, sc, loop.LoopSettings(111.0, 10e-6, 2.5, seed=2))
        lo1, _ = est.split_bands(r.trace["hall1"], RATE, 111.0)
        lo2, _ = est.split_bands(r.trace["hall2"], RATE, 111.0)
        segs = est.segment_contacts(est.estimate_normal_load(lo1, lo2, P0))
        edges = [s.start / RATE for s in segs[1:]]
        # the same low-pass applied to the true load marks where any causal detector can first switch
        W_slow, _ = est.split_bands(r.trace["W_true"], RATE, 111.0)
        ideal = [s.start / RATE for s in est.segment_contacts(W_slow)[1:]]
        tau = 1 / (2 * math.pi * 10.0)
        assert len(edges) == len(ideal) == 4
        for got, lag, true in zip(edges, ideal, (0.5, 1.0, 1.5, 2.0)):
            assert lag > true
            assert abs(got - lag) <= tau

    def test_mask_margins(self):
        segs = [est.Segment(0, 100, False), est.Segment(100, 200, True), est.Segment(200, 300, False)]
        m = est.segment_mask(segs, 300, loaded=True, margin=10)
        assert np.flatnonzero(m)[[0, -1]].tolist() == [110, 189]
        u = est.segment_mask(segs, 300, loaded=False, margin=10, skip_start=5)
        assert u[5] and not u[4] and not u[95] and u[210] and u[299]


class TestPipeline:
    def test_frequency_inferred(self):
        tr, _ = pressed_run(261.0, 0.5, "w_lt_0.5", 4)
        res = est.identify(tr, P0)
        assert res.f_hz == pytest.approx(261.0, abs=0.05)
        assert res.notes

    def test_outputs(self, tmp_path):
        tr, _ = pressed_run(261.0, 0.5, "w_lt_0.5", 4)
        res = est.identify(tr, P0, 261.0)
        csv_path, rep_path = tmp_path / "z.csv", tmp_path / "z.json"
        res.write(csv_path, rep_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == ",".join(est.ANALYSIS_HEADER)
        assert len(lines) - 1 == math.ceil(len(tr) / 30)
        rep = json.loads(rep_path.read_text())
        assert rep["schema"] == "vibroplate.identify/1"
        assert rep["n_loaded_segments"] == 1
        assert rep["suspension_fit"]["k1"]["c"] == pytest.approx(P0.k1, rel=0.01)

    def test_no_contact_no_valid_samples(self):
        res = est.identify(unloaded_run(111.0, 1.5), P0, 111.0)
        assert not res.valid.any()
        assert res.report()["zmag_median"] is None

    def test_silent_trace_frequency_error(self):
        tr = pl.run_open_loop(P0, 0.1)
        with pytest.raises(ValueError):
            est.identify(tr, P0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            est.PipelineConfig(threshold_n=0.1, hysteresis_n=0.2)
