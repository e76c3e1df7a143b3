import json
import math

import numpy as np
import pytest

from fdsqueeze.cli import main
from fdsqueeze.synthesizer import ingest_csv

VACUUM = {
    "spin": {"larmor_hz": 10e3, "readout_hz": 0.0},
    "epr": {"r": 0.0},
    "synthesis": {"sample_rate_hz": 64e3, "duration_s": 0.5, "seed": 1},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_simulate_vacuum(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", _write(tmp_path, VACUUM), "--out", str(out)]) == 0
    files = sorted(out.glob("record_*.csv"))
    assert len(files) == 1
    pair = ingest_csv(files[0])
    assert pair.sample_rate == 64e3 and len(pair) == 32000
    assert np.var(pair.signal) == pytest.approx(1.0, abs=0.05)
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 1 and len(m["parameter_digest"]) == 64 and m["tool_version"]


def test_missing_key_exit_2(tmp_path, capsys):
    cfg = {"spin": VACUUM["spin"]}
    assert main(["simulate", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) == 2
    assert "epr" in capsys.readouterr().err


def test_bad_values_exit_2(tmp_path, capsys):
    cfg = dict(VACUUM, epr={"r": 1.0, "eta_s": 1.5})
    assert main(["simulate", "--config", _write(tmp_path, cfg)]) == 2
    assert "epr.eta_s" in capsys.readouterr().err
    cfg = dict(VACUUM, unknown_section={})
    assert main(["simulate", "--config", _write(tmp_path, cfg)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "absent.json")]) == 2


def test_bad_data_exit_3(tmp_path, capsys):
    bad = tmp_path / "record_theta_bad.csv"
    bad.write_text("# fs=1000 theta_s=0\nsignal,idler\n1,2\n3,nan\n")
    assert main(["analyze", str(bad), "--config", _write(tmp_path, VACUUM), "--out", str(tmp_path / "a")]) == 3
    assert ":4:" in capsys.readouterr().err
    short = tmp_path / "short.csv"
    short.write_text("# fs=1000 theta_s=0\n1,2\n3,4\n")
    assert main(["analyze", str(short), "--config", _write(tmp_path, VACUUM), "--out", str(tmp_path / "a")]) == 3
    assert main(["analyze", str(tmp_path / "nope"), "--out", str(tmp_path / "a")]) == 3


def test_simulate_is_byte_identical(tmp_path):
    cfg = {"preset": "positive-10k", "detection": {"theta_s_deg": [0, 90]},
           "synthesis": {"sample_rate_hz": 64e3, "duration_s": 0.25, "seed": 9}}
    c = _write(tmp_path, cfg)
    assert main(["simulate", "--config", c, "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", c, "--out", str(tmp_path / "b")]) == 0
    for f in sorted((tmp_path / "a").glob("record_*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert main(["simulate", "--config", c, "--seed", "10", "--out", str(tmp_path / "c")]) == 0
    f = sorted((tmp_path / "a").glob("record_*.csv"))[0]
    assert f.read_bytes() != (tmp_path / "c" / f.name).read_bytes()


def test_analyze_sweep_and_zero_gain(tmp_path):
    cfg = {"preset": "positive-10k", "detection": {"theta_s_deg": [0, 60, 120]},
           "synthesis": {"sample_rate_hz": 64e3, "duration_s": 0.5, "seed": 2}}
    c = _write(tmp_path, cfg)
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", c, "--out", str(sim)]) == 0
    assert main(["analyze", str(sim), "--config", c, "--out", str(tmp_path / "an")]) == 0
    s = json.loads((tmp_path / "an" / "summary.json").read_text())
    assert len(s["records"]) == 3 and "min_db" in s
    assert (tmp_path / "an" / "spectrogram.csv").is_file()
    assert (tmp_path / "an" / "trajectory.csv").is_file()

    assert main(["analyze", str(sim), "--config", c, "--zero-gain", "--out", str(tmp_path / "zg")]) == 0
    for rec in ("0000p00", "0060p00"):
        cond = np.loadtxt(tmp_path / "zg" / f"conditional_{rec}.csv", delimiter=",", skiprows=1)
        sig = np.loadtxt(tmp_path / "zg" / f"psd_signal_{rec}.csv", delimiter=",", skiprows=1)
        # both on the same record, so the interior estimate differs only by edge trimming
        assert np.mean(cond[:, 1]) == pytest.approx(np.mean(sig[:, 1]), rel=0.05)
        gain = np.loadtxt(tmp_path / "zg" / f"gain_{rec}.csv", delimiter=",", skiprows=1)
        assert np.all(gain[:, 1:] == 0)


def test_predict_summary(tmp_path):
    cfg = {"preset": "positive-54k", "detection": {"theta_s_deg": [0, 45, 90]}}
    out = tmp_path / "p"
    assert main(["predict", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    s = json.loads((out / "predict_summary.json").read_text())
    assert f"{s['sql_bandwidth_hz'] / 1e3:.3g}" == "4.09"
    assert len(s["conditional_min_by_theta"]) == 3
    assert s["projections"][0]["n_th_divisor"] == 3
    assert (out / "projection_th3_bb6.csv").is_file()
    assert (out / "model_angle.csv").is_file()


def test_predict_flat_angle_without_atoms(tmp_path):
    cfg = {"spin": {"larmor_hz": 10e3, "readout_hz": 0.0}, "epr": {"r": 1.0}, "output": {"format": "json"}}
    out = tmp_path / "p"
    assert main(["predict", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    ang = json.loads((out / "model_angle.json").read_text())
    assert set(ang["value"]) == {0.0}


def test_cavity_equiv_and_report(tmp_path):
    from fdsqueeze import spectral_model as sm
    from fdsqueeze.params import CavityParams, FrequencyGrid

    g = FrequencyGrid.linspace_hz(1e3, 60e3, 300)
    phi = np.mod(sm.filter_cavity_phase(CavityParams(2 * math.pi * 4.7e3, 2 * math.pi * 11.5e3), g).values, math.pi)
    tr = tmp_path / "trajectory.csv"
    tr.write_text("freq_hz,value\n" + "".join(f"{float(f)!r},{math.degrees(v)!r}\n" for f, v in zip(g.hz, phi)))
    out = tmp_path / "cav"
    assert main(["cavity-equiv", str(tr), "--out", str(out)]) == 0
    c = json.loads((out / "cavity.json").read_text())
    assert c["detuning_hz"] == pytest.approx(4.7e3, rel=1e-3)
    assert c["bandwidth_hz"] == pytest.approx(11.5e3, rel=1e-3)
    assert main(["report", str(out)]) == 0
    assert "cavity" in json.loads((out / "report.json").read_text())
    assert main(["report", str(tmp_path / "missing")]) == 3


def test_fit_command(tmp_path):
    cfg = {
        "preset": "positive-10k",
        "detection": {"theta_s_deg": [90]},
        "synthesis": {"sample_rate_hz": 128e3, "duration_s": 4.0, "seed": 3},
        "fit": {"free": {"n_th": [1.0, 8.0]}, "restarts": 1},
    }
    c = _write(tmp_path, cfg)
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", c, "--out", str(sim)]) == 0
    assert main(["fit", str(sim), "--config", c, "--out", str(tmp_path / "fit")]) == 0
    r = json.loads((tmp_path / "fit" / "fit_result.json").read_text())
    assert r["estimates"]["n_th"] == pytest.approx(3.5, rel=0.1)
    assert r["converged"] is True
