import json

import numpy as np
import pytest

from vibroplate import cli
from vibroplate import plant as pl
from vibroplate.estimation import ANALYSIS_HEADER


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(x) for x in out.splitlines() if x], err


def test_synth_writes_eight_records(tmp_path, capsys):
    code, lines, _ = run(capsys, "synth", "--out", tmp_path)
    assert code == 0 and lines[0]["records"] == 8
    data = json.loads((tmp_path / "controllers.json").read_text())
    assert [r["f_hz"] for r in data["records"]] == [20, 31, 47, 72, 111, 170, 261, 400]
    assert all(r["fit"]["reduction_mag_err_db"] <= 1.0 for r in data["records"])
    assert (tmp_path / "synthesis.png").stat().st_size > 0
    rows = (tmp_path / "synthesis_report.csv").read_text().splitlines()
    assert len(rows) == 9 and rows[0].startswith("f_hz,")


def test_synth_is_byte_identical(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "a", "--freq", 111)
    run(capsys, "synth", "--out", tmp_path / "b", "--freq", 111)
    for name in ("controllers.json", "synthesis_report.csv", "synthesis.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_then_identify(tmp_path, capsys):
    cfg = tmp_path / "press.json"
    cfg.write_text(json.dumps({"finger": "w_lt_0.5", "freq_hz": 111, "duration_s": 2.0,
                               "load": {"times": [0, 0.8, 0.9], "values": [0, 0, 0.3]}}))
    code, lines, _ = run(capsys, "simulate", "--config", cfg, "--out", tmp_path, "--aref", 1e-5, 2e-5, "--seed", 3)
    assert code == 0 and len(lines[0]["runs"]) == 2
    trace = tmp_path / "trace_111Hz_10um.csv"
    assert len(pl.SimTrace.read_csv(trace)) == 2 * pl.SAMPLE_RATE_HZ
    assert (tmp_path / "trace_111Hz_10um.png").exists()

    code, lines, _ = run(capsys, "identify", trace, "--config", cfg, "--out", tmp_path)
    assert code == 0 and lines[0]["median_zmag"] > 0
    header = (tmp_path / "trace_111Hz_10um_analysis.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == ANALYSIS_HEADER
    first = (tmp_path / "trace_111Hz_10um_analysis.csv").read_bytes()
    run(capsys, "identify", trace, "--config", cfg, "--out", tmp_path)
    assert (tmp_path / "trace_111Hz_10um_analysis.csv").read_bytes() == first


def test_simulate_seed_determinism(tmp_path, capsys):
    args = ("simulate", "--freq", 261, "--aref", 1e-5, "--seed", 9)
    run(capsys, *args, "--out", tmp_path / "a")
    run(capsys, *args, "--out", tmp_path / "b")
    name = "trace_261Hz_10um.csv"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_duration_trace_is_header_only(tmp_path, capsys):
    cfg = tmp_path / "z.json"
    cfg.write_text('{"duration_s": 0}')
    code, _, _ = run(capsys, "simulate", "--config", cfg, "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "trace_261Hz_10um.csv").read_text().count("\n") == 1


@pytest.mark.parametrize("model", ["w_lt_0.5", "w_gt_0.5:2", '{"m_f": 4, "b_f": 1.5, "k_f": 0.3}'])
def test_curves(tmp_path, capsys, model):
    code, lines, _ = run(capsys, "curves", model, "--out", tmp_path, "--points", 50)
    assert code == 0
    text = (tmp_path / lines[0]["csv"].split("/")[-1]).read_text().splitlines()
    assert len(text) == 51
    z = np.array([float(r.split(",")[1]) for r in text[1:]])
    assert np.all(z > 0)


@pytest.mark.parametrize("argv", [
    ("curves", "bogus"),
    ("curves", '{"m_f": 4}'),
    ("curves", "{bad json"),
    ("simulate", "--aref", "1"),
    ("simulate", "--freq", "100"),
    ("identify", "missing.csv"),
    ("accept", "--corrupt", "zz=1"),
])
def test_errors_are_one_json_line(tmp_path, capsys, argv):
    code, _, err = run(capsys, *argv, "--out", tmp_path) if argv[0] != "accept" else run(capsys, *argv)
    assert code == cli.EXIT_ERROR
    lines = err.strip().splitlines()
    assert len(lines) == 1 and "error" in json.loads(lines[0])


def test_malformed_trace_header(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    code, _, err = run(capsys, "identify", bad, "--out", tmp_path)
    assert code == cli.EXIT_ERROR and "header" in err
    assert not list(tmp_path.glob("bad_*"))


def test_accept_reports_one_line_per_criterion(tmp_path, capsys):
    code, lines, _ = run(capsys, "accept", "--only", 7, 8, 9, "--out", tmp_path)
    assert code == 0
    assert [r["criterion"] for r in lines] == [7, 8, 9]
    assert len((tmp_path / "acceptance.jsonl").read_text().splitlines()) == 3


def test_accept_names_corruption(capsys):
    code, lines, _ = run(capsys, "accept", "--only", 1, "--corrupt", "k1=30000")
    assert code == cli.EXIT_FAILED
    assert lines[0]["name"] == "resonance" and not lines[0]["passed"]
