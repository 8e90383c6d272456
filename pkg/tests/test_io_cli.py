import json

import numpy as np
import pytest

from frontend_sim import io as fio
from frontend_sim.channel_sim import ChipConfig, HitRecord, OverdriveDelay
from frontend_sim.characterization import ScanCurve
from frontend_sim.cli import EXIT_CONFIG, EXIT_OK, load_preset, main, preset_names

SMALL_SCAN = {
    "command": "scan",
    "chip": {"channel_defaults": {"noise_sigma": 2.9}},
    "scans": [{"type": "threshold", "charges": [1.0, 2.0],
               "thresholds": {"relative": True, "start": -6, "stop": 6, "num": 7},
               "n_inj": 300}],
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


# --- chip configuration -------------------------------------------------------

def test_chip_dict_round_trip():
    chip = ChipConfig(rng_seed=5, global_offset_dac=12,
                      overdrive_delay=OverdriveDelay(1.0, 10.0, 0.5)).with_channel(
        3, rc_code=6, feedback_resistor=25, threshold_dac_a=77)
    again = fio.chip_from_dict(json.loads(json.dumps(fio.chip_to_dict(chip))))
    assert again == chip


def test_channel_defaults_apply_before_overrides():
    chip = fio.chip_from_dict({"channel_defaults": {"gain": 55.0},
                               "channels": [{}, {"gain": 70.0}, {}, {}, {}, {}]})
    assert [c.gain for c in chip.channels] == [55.0, 70.0, 55.0, 55.0, 55.0, 55.0]
    assert [c.channel_index for c in chip.channels] == list(range(6))


@pytest.mark.parametrize("data,fragment", [
    ({"bogus": 1}, "unknown field(s) bogus"),
    ({"channels": [{}]}, "chip.channels"),
    ({"channels": [{}, {"rc_code": 9}, {}, {}, {}, {}]}, "chip.channels[1]"),
    ({"channel_defaults": {"nope": 1}}, "chip.channel_defaults"),
    ({"overdrive_delay": {"x": 1}}, "chip.overdrive_delay"),
    ({"dt": -1}, "dt"),
])
def test_chip_errors_name_the_field(data, fragment):
    with pytest.raises(fio.ConfigError) as exc:
        fio.chip_from_dict(data)
    assert fragment in str(exc.value)


def test_json_error_reports_position():
    with pytest.raises(fio.ConfigError, match=r"cfg:2:\d+"):
        fio.loads_json('{\n  "a": }', "cfg")


# --- registers ----------------------------------------------------------------

def test_register_round_trip():
    chip = ChipConfig(global_offset_dac=200).with_channel(
        1, threshold_dac_a=255, threshold_dac_b=3, rc_code=0, feedback_resistor=25)
    text = fio.dump_registers(chip)
    assert text.startswith("# register value\n")
    assert "ch1.fb_sel 1" in text
    assert fio.load_registers(text) == chip


def test_register_map_covers_all_channels():
    names = [n for n, _ in fio.register_map(ChipConfig())]
    assert len(names) == 6 * 4 + 1
    assert len(set(names)) == len(names)


@pytest.mark.parametrize("text,fragment", [
    ("ch0.thr_dac_a 256", "out of range"),
    ("ch2.rc_code 7", "out of range"),
    ("ch0.fb_sel 2", "out of range"),
    ("global_offset_dac -1", "out of range"),
    ("ch6.thr_dac_a 1", "unknown register"),
    ("ch0.gain 60", "unknown register"),
    ("ch0.thr_dac_a", "expected"),
    ("ch0.thr_dac_a x1", "not an integer"),
])
def test_register_errors(text, fragment):
    with pytest.raises(fio.RegisterError) as exc:
        fio.load_registers("# header\n" + text)
    assert fragment in str(exc.value)
    assert "line 2" in str(exc.value)


def test_register_hex_and_comments():
    chip = fio.load_registers("ch0.thr_dac_a 0x10  # sixteen\n\nglobal_offset_dac 3\n")
    assert chip.channels[0].threshold_dac_a == 16
    assert chip.global_offset_dac == 3


# --- CSV ------------------------------------------------------------------------

def test_scan_curve_csv_round_trip(tmp_path):
    c = ScanCurve("threshold_scan", [1.0, 2.0, 3.0], [1.0, 0.5, 0.1], [0.01, 0.05, 0.03],
                  counts=[100, 50, 10], exposure=[100, 100, 100])
    p = tmp_path / "c.csv"
    fio.write_scan_curve(c, p)
    back = fio.read_scan_curve(p)
    assert back.kind == c.kind
    for name in ("x", "y", "y_err", "counts", "exposure"):
        np.testing.assert_array_equal(getattr(back, name), getattr(c, name))


def test_read_scan_curve_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("kind,x,y\nthreshold_scan,1,0.5\n")
    with pytest.raises(fio.ConfigError, match="y_err"):
        fio.read_scan_curve(p)
    p.write_text("kind,x,y,y_err\nthreshold_scan,1,0.5,0.1\nnoise_occupancy,2,1,0.1\n")
    with pytest.raises(fio.ConfigError, match="mixed"):
        fio.read_scan_curve(p)


def test_hits_csv_columns():
    text = fio.write_hits([HitRecord(2, 7, 1.5, 60.0, 3.25, 9.5, "0111")])
    lines = text.splitlines()
    assert lines[0] == ",".join(fio.HIT_COLUMNS)
    assert lines[1] == "2,7,1.5,60.0,3.25,9.5,0111"


# --- CLI --------------------------------------------------------------------------

def test_presets_listed(capsys):
    assert main(["presets"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("fig1", "fig2", "fig3", "fig4", "fig9", "fig10", "fig11", "fig12"):
        assert name in out
    assert set(preset_names()) >= {"fig3", "fig9"}


@pytest.mark.parametrize("name", ["fig1", "fig2", "fig3", "fig4", "fig9", "fig10", "fig11",
                                  "fig12"])
def test_presets_parse(name):
    cfg = load_preset(name)
    assert cfg["command"] in ("enc-sweep", "scan")
    if cfg["command"] == "scan":
        fio.chip_from_dict(cfg.get("chip", {}))


def test_enc_sweep_outputs(tmp_path):
    assert main(["enc-sweep", "--preset", "fig3", "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert 3.5 <= summary["slices"][0]["tp_opt_ns"] <= 6.5
    rows = fio.read_csv_rows(tmp_path / "enc_grid.csv")
    assert len(rows) == 91
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "enc-sweep"
    assert man["outputs"] == ["enc_grid.csv", "summary.json"]
    assert len(man["config_digest"]) == 64


def test_enc_sweep_json_format(tmp_path):
    assert main(["enc-sweep", "--preset", "fig4", "--format", "json",
                 "--out", str(tmp_path)]) == EXIT_OK
    grid = json.loads((tmp_path / "enc_grid.json").read_text())
    assert len(grid) == 91 and set(grid[0]) >= {"tp_ns", "enc_tot"}


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FRONTEND_SIM_OUT", str(tmp_path / "env"))
    assert main(["enc-sweep", "--preset", "fig3"]) == EXIT_OK
    assert (tmp_path / "env" / "manifest.json").exists()


def test_scan_is_deterministic_and_jobs_invariant(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_SCAN)
    for d, jobs in (("a", "1"), ("b", "1"), ("c", "3")):
        assert main(["scan", "--config", str(cfg), "--seed", "11", "--jobs", jobs,
                     "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("scurve_ch0_q1fC.csv", "scurve_ch0_q2fC.csv", "fits.json"):
        a = (tmp_path / "a" / f).read_bytes()
        assert a == (tmp_path / "b" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()
    assert main(["scan", "--config", str(cfg), "--seed", "12",
                 "--out", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "fits.json").read_bytes() != (tmp_path / "a" / "fits.json").read_bytes()


def test_rerun_reproduces_outputs(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_SCAN)
    assert main(["scan", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    assert main(["rerun", str(tmp_path / "a" / "manifest.json"),
                 "--out", str(tmp_path / "b")]) == 0
    for f in ("scurve_ch0_q1fC.csv", "fits.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_scan_report_contents(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_SCAN)
    assert main(["scan", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    fits = json.loads((tmp_path / "fits.json").read_text())
    rep = fits[0]
    assert rep["type"] == "threshold" and rep["peaking_time"] == pytest.approx(5.3)
    assert rep["gain"]["gain_mv_per_fc"] == pytest.approx(60.0, abs=2.0)
    assert set(rep["scurves"][0]) >= {"q_fc", "kind", "params", "errors", "chi2_ndf",
                                      "inputs_digest"}


def test_time_walk_scan_writes_hits(tmp_path):
    cfg = {"command": "scan", "scans": [{"type": "time_walk", "charges": [1.5, 4.0],
                                          "threshold_fc": 1.0, "n_inj": 100, "hits": True}]}
    assert main(["scan", "--config", str(write_cfg(tmp_path, cfg)),
                 "--out", str(tmp_path)]) == EXIT_OK
    hits = fio.read_csv_rows(tmp_path / "hits_ch0_time_walk.csv")
    assert len(hits) == 200
    assert set(hits[0]) == set(fio.HIT_COLUMNS)
    rep = json.loads((tmp_path / "fits.json").read_text())[0]
    assert 0 < rep["walk_ns"] < 5.0


@pytest.mark.parametrize("cfg", [
    {"command": "scan", "scans": []},
    {"command": "scan", "scans": [{"type": "nope"}]},
    {"command": "scan", "scans": [{"type": "threshold", "thresholds": [1, 2]}]},
    {"command": "scan", "chip": {"channels": 3}, "scans": [{"type": "noise", "thresholds": [0]}]},
    {"command": "scan", "channel": 9, "scans": [{"type": "noise", "thresholds": [0]}]},
    {"command": "enc-sweep", "sweep": {"tp_ns": [8, 4], "c_pf": [4], "i_ua": [1]}},
    {"command": "enc-sweep", "sweep": {"tp_ns": [4], "c_pf": [4]}},
    {"command": "enc-sweep", "sweep": {"tp_ns": [4], "c_pf": [4], "i_ua": [1], "bad": [1]}},
])
def test_config_errors_exit_2(tmp_path, cfg, capsys):
    cmd = cfg["command"]
    assert main([cmd, "--config", str(write_cfg(tmp_path, cfg)),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["scan"]) == EXIT_CONFIG
    assert main(["scan", "--preset", "nope"]) == EXIT_CONFIG
    assert main(["scan", "--preset", "fig3"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["scan", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["scan", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_registers_cli(tmp_path, capsys):
    assert main(["registers", "dump"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "ch5.rc_code 3" in text
    reg = tmp_path / "regs.txt"
    reg.write_text("ch0.thr_dac_a 256\n")
    assert main(["registers", "load", str(reg)]) == EXIT_CONFIG
    assert "out of range" in capsys.readouterr().err
    reg.write_text("ch0.thr_dac_a 42\n")
    out = tmp_path / "chip.json"
    assert main(["registers", "load", str(reg), "--out", str(out)]) == EXIT_OK
    assert fio.load_chip(out).channels[0].threshold_dac_a == 42
    assert main(["registers", "load"]) == EXIT_CONFIG
