import json
import subprocess
import sys

import numpy as np
import pytest

from lzsa import io
from lzsa.cli import EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_PIPELINE, main

SMALL = """
name = small
sweep.carrier    = 603.5 khz
sweep.rabi_start = 9 khz
sweep.rabi_stop  = 11 khz
sweep.duration   = 100 ms
tone.1.field     = 3.272 nt
tone.1.frequency = 10 khz
tone.1.phase     = 3.93 rad
init_state       = superposition
noise.shot_rms   = 0.42 rel
seed = 4
estimate.tones = 1
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.cfg"
    p.write_text(SMALL)
    return p


@pytest.fixture(scope="module")
def processed(tmp_path_factory, cfg_file):
    run = tmp_path_factory.mktemp("run")
    assert main(["simulate", str(cfg_file), str(run)]) == EXIT_OK
    assert main(["process", str(run)]) == EXIT_OK
    return run


def test_simulate_outputs(processed):
    chans, meta = io.read_record(processed / "raw.lzr")
    assert set(chans) == {"faraday", "reference", "preroll"}
    assert chans["faraday"].rate == 5e6 and meta["seed"] == 4
    truth = io.read_json(processed / "truth.json")
    assert truth["tones"][0]["field_nt"] == pytest.approx(3.272)
    assert (processed / "config.cfg").read_text() == SMALL


def test_process_outputs(processed):
    chans, _ = io.read_record(processed / "demod.lzr")
    assert {"fz1R", "fy1R", "envelope", "fx2S", "fy2S", "azimuth"} <= set(chans)
    csv, _ = io.read_record(processed / "demod.csv")
    np.testing.assert_array_equal(csv["fz1R"].samples, chans["fz1R"].samples)
    info = io.read_json(processed / "process.json")
    assert len(info["transitions_s"]) == 1
    assert info["transitions_s"][0] == pytest.approx(0.05, abs=2e-3)
    corr = np.loadtxt(processed / "correction.csv", delimiter=",", skiprows=2)
    assert corr.shape[1] == 2 and corr[-1, 0] == pytest.approx(0.1)


def test_process_is_deterministic(processed, tmp_path):
    for f in ("config.cfg", "raw.lzr"):
        (tmp_path / f).write_bytes((processed / f).read_bytes())
    assert main(["process", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "demod.lzr").read_bytes() == (processed / "demod.lzr").read_bytes()


def test_skip_rabi_correction(processed, tmp_path):
    for f in ("config.cfg", "raw.lzr"):
        (tmp_path / f).write_bytes((processed / f).read_bytes())
    assert main(["process", str(tmp_path), "--skip-rabi-correction"]) == EXIT_OK
    corr = np.loadtxt(tmp_path / "correction.csv", delimiter=",", skiprows=2)
    assert not np.any(corr[:, 1])
    assert not io.read_json(tmp_path / "process.json")["rabi_correction"]


def test_noise_off_and_seed(cfg_file, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["simulate", str(cfg_file), str(a), "--noise", "off"]) == EXIT_OK
    assert main(["simulate", str(cfg_file), str(b), "--noise", "off", "--seed", "9"]) == EXIT_OK
    assert main(["simulate", str(cfg_file), str(c), "--seed", "9"]) == EXIT_OK
    fa = io.read_record(a / "raw.lzr")[0]
    fb = io.read_record(b / "raw.lzr")[0]
    fc = io.read_record(c / "raw.lzr")[0]
    # without noise the seed does not matter
    np.testing.assert_array_equal(fa["faraday"].samples, fb["faraday"].samples)
    assert not np.any(fa["preroll"].samples)
    assert np.std(fc["faraday"].samples - fa["faraday"].samples) > 0.1
    assert io.read_json(c / "truth.json")["noise"]["seed"] == 9
    # the written config reproduces the run
    text = (b / "config.cfg").read_text()
    assert text.count("seed =") == 1 and text.count("noise.shot_rms") == 1


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL.replace("100 ms", "100"))
    assert main(["simulate", str(bad), str(tmp_path / "r")]) == EXIT_CONFIG
    assert "bad.cfg:6" in capsys.readouterr().err
    assert main(["simulate", str(tmp_path / "missing.cfg"), str(tmp_path / "r")]) == EXIT_CONFIG
    assert not (tmp_path / "r" / "raw.lzr").exists()


def test_pipeline_error_exit_code(processed, tmp_path, capsys):
    assert main(["process", str(tmp_path)]) == EXIT_PIPELINE
    (tmp_path / "config.cfg").write_bytes((processed / "config.cfg").read_bytes())
    (tmp_path / "raw.lzr").write_bytes((processed / "raw.lzr").read_bytes()[:-16])
    assert main(["process", str(tmp_path)]) == EXIT_PIPELINE
    assert "truncated" in capsys.readouterr().err


def test_report_lists_missing_files(processed, capsys):
    assert main(["report", str(processed)]) == EXIT_PIPELINE
    err = capsys.readouterr().err
    assert "estimate.json" in err and "overlay.csv" in err and "raw.lzr" not in err


def test_not_converged_exit_code(processed, tmp_path):
    for f in ("config.cfg", "raw.lzr", "demod.lzr", "correction.csv"):
        (tmp_path / f).write_bytes((processed / f).read_bytes())
    code = main(["estimate", str(tmp_path), "--max-steps", "3", "--correction-iterations", "0"])
    assert code == EXIT_NOT_CONVERGED
    est = io.read_json(tmp_path / "estimate.json")
    assert not est["converged"] and "max_steps" in est["stop_reason"]


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "lzsa.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "process", "estimate", "report"):
        assert cmd in out.stdout


@pytest.mark.slow
def test_full_chain(processed, capsys):
    assert main(["estimate", str(processed), "--seed", "2"]) == EXIT_OK
    est = io.read_json(processed / "estimate.json")
    row = est["truth_comparison"][0]
    assert abs(row["frequency_error_hz"]) < 5 * est["tones"][0]["frequency_sigma_hz"]
    assert abs(row["field_error_nt"]) < 5 * est["tones"][0]["field_sigma_nt"]
    assert est["provenance"]["global"]["seed"] == 2
    assert (processed / "correction_refined.csv").exists()
    assert main(["report", str(processed)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "RBW" in out and "100 Hz" in out
    summary = json.loads((processed / "summary.json").read_text())
    assert summary["rbw_hz"] == pytest.approx(100.0)
    for f in ("spectrogram.csv", "overlay_azimuth.csv", "bloch_2s.csv", "summary.txt"):
        assert (processed / f).exists()
    spec = np.loadtxt(processed / "spectrogram.csv", delimiter=",", skiprows=2)
    assert spec.shape[1] == 3 and np.all(np.isfinite(spec))
