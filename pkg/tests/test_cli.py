import json
import math

import numpy as np
import pytest

from qsim.cli import main
from qsim.config import SCHEMA, parse_config
from qsim.correlator import write_timetags
from qsim.emitter import TimeTagStream
from qsim.errors import ParameterError
from qsim.modulator import bessel_j


def write_config(path, **body):
    data = {"schema": SCHEMA, **body}
    path.write_text(json.dumps(data))
    return path


def read_csv(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return header, rows


def artifacts(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.name != "effective_config.json"}


@pytest.fixture
def hbt_config(tmp_path):
    return write_config(tmp_path / "hbt.json", experiment="hbt", seed=3,
                        output_dir=str(tmp_path / "hbt"), emitter={}, detector={},
                        hbt={"photons": 1_000_000})


def test_hbt_run(hbt_config, tmp_path, capsys):
    assert main(["run", str(hbt_config)]) == 0
    line = capsys.readouterr().out.strip()
    fields = dict(kv.split("=") for kv in line.split())
    assert float(fields["g2_zero"]) <= 0.01
    assert float(fields["photons"]) >= 1e6
    out = tmp_path / "hbt"
    assert (out / "timetags.ttag").read_bytes()[:5] == b"TTAG\x01"
    header, rows = read_csv(out / "histogram.csv")
    assert header == ["tau_ps", "counts", "g2"]
    fit = json.loads((out / "fit_g2.json").read_text())
    assert fit["converged"]


def test_run_is_deterministic_and_round_trips(hbt_config, tmp_path):
    assert main(["run", str(hbt_config), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["run", str(hbt_config), "--output-dir", str(tmp_path / "b")]) == 0
    assert artifacts(tmp_path / "a") == artifacts(tmp_path / "b")
    effective = tmp_path / "a" / "effective_config.json"
    assert main(["run", str(effective), "--output-dir", str(tmp_path / "c")]) == 0
    assert artifacts(tmp_path / "a") == artifacts(tmp_path / "c")


def test_bessel_sweep(tmp_path, capsys):
    cfg = write_config(tmp_path / "sweep.json", experiment="bessel-sweep",
                       output_dir=str(tmp_path / "out"), modulator={"drive_ghz": 5},
                       spectrum={}, sweep={"beta_start": 0, "beta_stop": math.pi,
                                           "beta_step": 0.1})
    assert main(["run", str(cfg)]) == 0
    header, rows = read_csv(tmp_path / "out" / "bessel_sweep.csv")
    assert header[:4] == ["beta", "w0", "w1", "w2"]
    assert len(rows) == 32
    for beta, w0, w1, w2, *_ in rows:
        for n, w in enumerate((w0, w1, w2)):
            assert w == pytest.approx(bessel_j(n, beta) ** 2, abs=0.02)


def test_lifetime_and_spectrum(tmp_path, capsys):
    life = write_config(tmp_path / "life.json", experiment="lifetime", seed=1,
                        output_dir=str(tmp_path / "life"), lifetime={})
    assert main(["run", str(life)]) == 0
    fields = dict(kv.split("=") for kv in capsys.readouterr().out.split())
    assert float(fields["lifetime_ps"]) == pytest.approx(745, abs=5)
    spec = write_config(tmp_path / "spec.json", experiment="spectrum",
                        output_dir=str(tmp_path / "spec"),
                        modulator={"beta": math.pi / 3, "drive_ghz": 5}, spectrum={})
    assert main(["run", str(spec)]) == 0
    fields = dict(kv.split("=") for kv in capsys.readouterr().out.split())
    assert float(fields["carrier_ratio"]) == pytest.approx(2.7, abs=0.1)
    header, _ = read_csv(tmp_path / "spec" / "spectrum.csv")
    assert header == ["offset_hz", "intensity"]


def test_hom_visibility_unchanged_by_modulation(tmp_path, capsys):
    results = []
    for drive, seed in ((0.0, 11), (5.0, 12)):
        cfg = write_config(tmp_path / f"hom{drive}.json", experiment="hom", seed=seed,
                           output_dir=str(tmp_path / f"hom{drive}"), emitter={},
                           detector={"jitter_sigma_ps": 117}, hom={"fit_window_ns": 20},
                           modulator={"beta": math.pi / 3, "drive_ghz": drive})
        assert main(["run", str(cfg)]) == 0
        fit = json.loads((tmp_path / f"hom{drive}" / "fit_hom.json").read_text())
        results.append((fit["derived"]["visibility"], fit["derived"]["visibility_error"]))
    (v1, e1), (v2, e2) = results
    assert abs(v1 - v2) <= 3 * math.hypot(e1, e2)


def test_validation_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 1
    write_config(bad, experiment="hbt", emitter={}, detector={}, hbt={})
    assert main(["run", str(bad)]) == 1
    assert "seed" in capsys.readouterr().err
    write_config(bad, experiment="hbt", seed=1, emitter={"lifetime_ps": -3}, detector={},
                 hbt={})
    assert main(["run", str(bad)]) == 1
    assert "emitter.lifetime_ps" in capsys.readouterr().err
    bad.write_text(json.dumps({"schema": "qsim.run/0", "experiment": "hbt"}))
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(tmp_path / "missing.json")]) == 1


def test_numerical_exit_code(hbt_config, monkeypatch, capsys):
    import qsim.cli as cli
    from qsim.errors import NumericalError

    def boom(cfg, out):
        raise NumericalError("integration step underflows")

    monkeypatch.setitem(cli.EXPERIMENTS, "hbt", boom)
    assert main(["run", str(hbt_config)]) == 2
    assert "underflows" in capsys.readouterr().err


def test_missing_section_named():
    with pytest.raises(ParameterError, match="hom"):
        parse_config(json.dumps({"schema": SCHEMA, "experiment": "hom", "seed": 1,
                                 "emitter": {}, "detector": {}}))


def test_correlate_file(tmp_path, capsys):
    a = tmp_path / "a.ttag"
    b = tmp_path / "b.csv"
    write_timetags(a, [TimeTagStream(1, [1000], 100_000)])
    write_timetags(b, [TimeTagStream(2, [1640, 50_000], 100_000)])
    assert main(["correlate-file", str(a), str(b), "--bin-ps", "64", "--window-ps", "2000"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "tau_ps,counts,g2"
    counts = {int(l.split(",")[0]): int(l.split(",")[1]) for l in lines[1:]}
    assert sum(counts.values()) == 1 and counts[640] == 1

    out = tmp_path / "self.csv"
    assert main(["correlate-file", str(b), str(b), "--bin-ps", "10", "--window-ps", "100",
                 "--out", str(out)]) == 0
    _, rows = read_csv(out)
    assert np.array_equal(rows[:, 1], rows[::-1, 1])


def test_correlate_file_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.ttag"
    bad.write_bytes(b"TTAG\x01" + b"\x00" * 4)
    assert main(["correlate-file", str(bad), str(bad)]) == 1
    assert "byte offset 5" in capsys.readouterr().err


def test_bessel_and_spectrum_commands(capsys):
    assert main(["bessel", "--beta", "1.0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "n,j_n,j_n_sq"
    row = {int(l.split(",")[0]): float(l.split(",")[1]) for l in lines[1:]}
    assert row[1] == pytest.approx(bessel_j(1, 1.0))
    assert main(["bessel", "--beta", "-1"]) == 1
    assert main(["spectrum", "--beta", "1.047", "--drive-ghz", "5"]) == 0
    assert capsys.readouterr().out.startswith("offset_hz,intensity\n")
    assert main(["spectrum", "--beta", "1", "--drive-ghz", "0"]) == 1


def test_thread_cap_does_not_change_results(hbt_config, tmp_path, monkeypatch):
    monkeypatch.setenv("QSIM_THREADS", "1")
    assert main(["run", str(hbt_config), "--output-dir", str(tmp_path / "one")]) == 0
    monkeypatch.setenv("QSIM_THREADS", "8")
    assert main(["run", str(hbt_config), "--output-dir", str(tmp_path / "eight")]) == 0
    assert artifacts(tmp_path / "one") == artifacts(tmp_path / "eight")
