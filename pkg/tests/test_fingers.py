import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibroplate import fingers as fm

FREQS = np.array([20.0, 31.0, 47.0, 72.0, 111.0, 170.0, 261.0, 400.0])
GRID = np.logspace(0, np.log10(2000), 100)
LIGHT = fm.preset("w_lt_0.5")
FIRM = fm.preset("w_gt_0.5")


def two_mass_response(model, f_hz):
    """Skin and phalanx velocity per unit force from the mass/spring/damper matrices."""
    M = np.diag([model.m_s, model.m_p])
    B = np.array([[model.b_s, -model.b_s], [-model.b_s, model.b_s + model.b_p]])
    K = np.array([[model.k_s, -model.k_s], [-model.k_s, model.k_s + model.k_p]])
    out = []
    for f in np.atleast_1d(f_hz):
        s = 2j * np.pi * f
        X = np.linalg.solve(M * s * s + B * s + K, np.array([1.0, 0.0]))
        out.append(s * X)
    V = np.array(out)
    return V[:, 0], V[:, 1]


positive = st.floats(min_value=1e-2, max_value=1e2)


def order4_models():
    return st.builds(lambda a, b, c, d, e, g: fm.Order4(a * 1e-3, b, c * 1e3, d * 1e-3, e, g * 1e3),
                     positive, positive, positive, positive, positive, positive)


class TestTableUnits:
    def test_presets_converted_to_si(self):
        assert LIGHT.m_p == pytest.approx(0.004)
        assert LIGHT.k_s == pytest.approx(1000.0)
        assert FIRM.b_s == 8.0
        assert fm.preset("w_gt_0.5", 2) == fm.Order2(0.004, 1.5, 300.0)

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            fm.preset("w_eq_0.5")

    @pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
    def test_rejects_nonpositive(self, bad):
        with pytest.raises(ValueError):
            fm.Order2(0.004, bad, 200.0)


class TestImpedance2nd:
    def test_resonance_is_pure_damping(self):
        m = fm.Order2(0.004, 1.0, 200.0)
        f0 = math.sqrt(m.k_f / m.m_f) / (2 * math.pi)
        assert complex(fm.impedance_2nd(m, f0)) == pytest.approx(1.0 + 0j, abs=1e-12)

    def test_firm_set_at_111hz(self):
        w = 2 * math.pi * 111
        expected = abs(complex(1.5, 0.004 * w - 300 / w))
        assert abs(fm.impedance_2nd(fm.preset("w_gt_0.5", 2), 111.0)) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(2.80, abs=0.01)

    def test_stiffness_asymptote(self):
        m = fm.preset("w_lt_0.5", 2)
        w = 2 * math.pi * 0.01
        assert abs(fm.impedance_2nd(m, 0.01)) == pytest.approx(m.k_f / w, rel=1e-4)

    def test_rejects_zero_frequency(self):
        with pytest.raises(ValueError):
            fm.impedance_2nd(fm.preset("w_lt_0.5", 2), 0.0)


class TestImpedance4th:
    def test_matches_two_mass_oracle(self):
        for model in (LIGHT, FIRM):
            vs, vp = two_mass_response(model, GRID)
            assert np.allclose(fm.skin_admittance(model, GRID), vs, rtol=1e-9, atol=0)
            assert np.allclose(fm.phalanx_velocity_tf(model, GRID), vp, rtol=1e-9, atol=0)
            assert np.allclose(fm.tissue_velocity_tf(model, GRID), vs - vp, rtol=1e-9, atol=0)

    @settings(max_examples=50)
    @given(order4_models())
    def test_oracle_for_arbitrary_parameters(self, model):
        f = np.array([1.0, 30.0, 300.0, 3000.0])
        vs, vp = two_mass_response(model, f)
        assert np.allclose(fm.skin_admittance(model, f), vs, rtol=1e-9, atol=0)
        assert np.allclose(fm.phalanx_velocity_tf(model, f), vp, rtol=1e-9, atol=0)

    def test_low_frequency_series_stiffness(self):
        assert LIGHT.static_stiffness() == pytest.approx(1000 * 200 / 1200)
        f = 0.01
        z = complex(fm.impedance_4th(LIGHT, f))
        assert z * 2j * math.pi * f == pytest.approx(166.6667, rel=1e-3)

    def test_rigid_skin_limit(self):
        stiff = fm.Order4(LIGHT.m_p, LIGHT.b_p, LIGHT.k_p, LIGHT.m_s, LIGHT.b_s, 1e7)
        ref = fm.impedance_2nd(fm.rigid_skin_equivalent(stiff), FREQS)
        assert np.max(np.abs(fm.impedance_4th(stiff, FREQS) / ref - 1)) < 0.01

    def test_mid_band_admittance(self):
        # mean over the eight stimulation frequencies
        y = np.abs(fm.skin_admittance(LIGHT, FREQS)).mean()
        assert y == pytest.approx(1 / 1.5, rel=0.10)

    def test_mid_band_damping_plateau(self):
        # between the stiffness and mass asymptotes the skin damper dominates
        f = np.logspace(np.log10(30), 2, 50)
        z = np.abs(fm.impedance_4th(LIGHT, f))
        assert math.exp(np.log(z).mean()) == pytest.approx(LIGHT.b_s, rel=0.25)

    def test_admittance_slope_at_low_frequency(self):
        y1, y2 = np.abs(fm.skin_admittance(LIGHT, [0.1, 1.0]))
        assert 20 * math.log10(y2 / y1) == pytest.approx(20.0, abs=0.2)


class TestVelocityTransfer:
    @pytest.mark.parametrize("model", [LIGHT, FIRM], ids=["light", "firm"])
    def test_sum_identity(self, model):
        total = fm.phalanx_velocity_tf(model, GRID) + fm.tissue_velocity_tf(model, GRID)
        assert np.allclose(total, fm.skin_admittance(model, GRID), rtol=1e-12, atol=0)

    @pytest.mark.parametrize("model", [LIGHT, FIRM], ids=["light", "firm"])
    def test_bone_tracking_limit(self, model):
        # phalanx share of surface velocity tends to k_s/(k_s+k_p)
        ratio = abs(fm.phalanx_velocity_tf(model, 0.5) / fm.skin_admittance(model, 0.5))
        assert ratio == pytest.approx(model.k_s / (model.k_s + model.k_p), rel=0.01)

    def test_firm_bone_tracks_within_five_percent(self):
        ratio = abs(fm.phalanx_velocity_tf(FIRM, 5.0) / fm.skin_admittance(FIRM, 5.0))
        assert abs(ratio - 1) < 0.05

    def test_bone_decouples_at_high_frequency(self):
        assert abs(fm.phalanx_velocity_tf(LIGHT, 400.0)) < 0.2 * abs(fm.skin_admittance(LIGHT, 400.0))

    @pytest.mark.parametrize("model", [LIGHT, FIRM], ids=["light", "firm"])
    def test_bone_share_falls_with_frequency(self, model):
        share = np.abs(fm.phalanx_velocity_tf(model, FREQS) / fm.skin_admittance(model, FREQS))
        assert share[-1] < 0.8 * share[0]
        assert share[-1] < share[4] < 1.1  # may overshoot near the coupling resonance

    def test_tissue_to_phalanx_ratio_grows(self):
        r = np.abs(fm.tissue_velocity_tf(LIGHT, [1.0, 1000.0]) / fm.phalanx_velocity_tf(LIGHT, [1.0, 1000.0]))
        assert r[0] < 0.25 and r[1] > 10

    @settings(max_examples=50)
    @given(order4_models(), st.floats(min_value=0.1, max_value=5000.0))
    def test_finite_nonzero(self, model, f):
        for fn in (fm.phalanx_velocity_tf, fm.tissue_velocity_tf, fm.skin_admittance):
            v = complex(fn(model, f))
            assert np.isfinite(v) and v != 0


@settings(max_examples=100)
@given(order4_models(), st.floats(min_value=0.01, max_value=1e4))
def test_passivity_order4(model, f):
    assert complex(fm.impedance_4th(model, f)).real >= 0


@given(positive, positive, positive, st.floats(min_value=0.01, max_value=1e4))
def test_passivity_order2(m, b, k, f):
    assert complex(fm.impedance_2nd(fm.Order2(m * 1e-3, b, k * 1e3), f)).real >= 0


def test_admittance_impedance_product():
    assert np.allclose(fm.skin_admittance(LIGHT, GRID) * fm.impedance_4th(LIGHT, GRID), 1.0, rtol=1e-12)


class TestLoadSchedule:
    def test_endpoints(self):
        assert fm.model_at_load(0.1) == LIGHT
        assert fm.model_at_load(fm.LIGHT_LOAD_N) == LIGHT
        assert fm.model_at_load(3.0) == FIRM

    def test_midpoint_linear(self):
        mid = fm.model_at_load(0.5 * (fm.LIGHT_LOAD_N + fm.FIRM_LOAD_N))
        assert mid.k_s == pytest.approx(0.5 * (LIGHT.k_s + FIRM.k_s))
        assert mid.b_p == pytest.approx(1.25)

    def test_power_law_scaling(self):
        scale = fm.power_law_skin_scale(exponent=1.5, max_factor=8.0)
        assert scale(0.1) == 1.0
        assert scale(1.0) == pytest.approx(8.0)
        m = fm.model_at_load(0.5, skin_scale=scale)
        assert m.k_s == pytest.approx(LIGHT.k_s * 2 ** 1.5)
        assert m.k_p == LIGHT.k_p


class TestStatistics:
    def test_beta(self):
        assert fm.beta(fm.MatchRecord(47, 0.01, 0.3, 0.3, 0.2)) == 1.0
        assert fm.beta(fm.MatchRecord(47, 0.01, 0.5, 2.0, 0.2)) == 4.0
        with pytest.raises(ZeroDivisionError):
            fm.beta(fm.MatchRecord(47, 0.01, 0.0, 2.0, 0.2))

    def test_record_validation(self):
        with pytest.raises(ValueError):
            fm.MatchRecord(47, -0.01, 0.3, 0.3, 0.2)

    def test_cv(self):
        assert fm.coefficient_of_variation([2.0, 2.0, 2.0]) == 0.0
        assert fm.coefficient_of_variation([1.0, 3.0]) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            fm.coefficient_of_variation([])
        with pytest.raises(ZeroDivisionError):
            fm.coefficient_of_variation([-1.0, 1.0])

    def test_cv_sampling(self):
        # n = 1000 lognormal draws: the estimate lands within 5% of the true CV
        # in the large majority of replicates and is unbiased overall
        sigma = 0.2
        expected = math.sqrt(math.exp(sigma**2) - 1)
        rng = np.random.default_rng(7)
        cvs = np.array([fm.coefficient_of_variation(rng.lognormal(0.0, sigma, 1000)) for _ in range(200)])
        assert np.mean(np.abs(cvs / expected - 1) < 0.05) > 0.9
        assert np.median(cvs) == pytest.approx(expected, rel=0.01)

    def test_pooled_cv_pipeline(self):
        recs = fm.synthetic_match_records(FREQS, lambda W: LIGHT, [0.3], v_spread=0.2, n_repeats=400,
                                          rng=np.random.default_rng(1))
        cvs = fm.cv_by_subject(recs, "v")
        assert len(cvs) == 8
        assert np.median(cvs) == pytest.approx(math.sqrt(math.exp(0.04) - 1), rel=0.1)

    def test_beta_rises_at_high_frequency_with_stiff_skin(self):
        recs = fm.synthetic_match_records(FREQS, lambda W: fm.model_at_load(W), [1.0])
        b = {f: v.mean() for f, v in fm.per_frequency(recs, fm.beta).items()}
        assert b[400.0] > b[170.0] > b[47.0]
        assert b[400.0] > 2 * b[47.0]

    def test_load_split(self):
        recs = [fm.MatchRecord(20, 0.01, 0.02, 0.02, W) for W in (0.2, 0.5, 0.8)]
        light, firm = fm.split_by_load(recs)
        assert [r.W for r in light] == [0.2, 0.5]
        assert [r.W for r in firm] == [0.8]

    def test_admittance_comparison(self):
        recs = fm.synthetic_match_records(FREQS, lambda W: LIGHT, [0.3])
        cmp = fm.admittance_comparison(recs, LIGHT)
        assert np.allclose(cmp["v_over_Fa"], 0.64)
        assert np.allclose(cmp["model_Y"], np.abs(fm.skin_admittance(LIGHT, FREQS)))


class TestFiles:
    def test_match_roundtrip(self, tmp_path):
        recs = fm.synthetic_match_records(FREQS, fm.model_at_load, [0.3, 0.9], subject_id="s1")
        p = tmp_path / "m.csv"
        fm.write_match_records(p, recs)
        assert p.read_text().splitlines()[0] == ",".join(fm.MATCH_HEADER)
        assert fm.read_match_records(p) == recs

    def test_bad_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("f,v\n1,2\n")
        with pytest.raises(ValueError):
            fm.read_match_records(p)

    def test_curves(self):
        c = fm.model_curves(LIGHT, FREQS)
        text = fm.curves_csv(c)
        lines = text.splitlines()
        assert lines[0] == ",".join(fm.CURVE_HEADER)
        assert len(lines) == 9
        assert np.allclose(c["Ys"], 1 / c["Zmag"])

    def test_curves_order2(self):
        c = fm.model_curves(fm.preset("w_lt_0.5", 2), FREQS)
        assert np.all(c["Yt"] == 0) and np.allclose(c["Yp"], c["Ys"])

    def test_parse_model(self):
        assert fm.parse_model("w_gt_0.5:2") == fm.preset("w_gt_0.5", 2)
        assert fm.parse_model({"m_f": 4, "b_f": 1, "k_f": 0.2}) == fm.preset("w_lt_0.5", 2)
        with pytest.raises(ValueError):
            fm.parse_model({"m_f": 4})
