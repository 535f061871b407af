import json
import subprocess
import sys

import numpy as np
import pytest

from conserva.cli import main
from conserva.config import ConfigError, parse_function, resolve
from conserva.output import read_csv, read_matrix, write_matrix

BASE = """
seed = 7
[model]
preset = "exclusion"
kernel = {const = 1.0, terms = [[0.5, "cos", 1, -1]]}
[initial]
psi = {const = 0.5, terms = [[0.25, "sin", 1]]}
"""

SECTIONS = {
    "simulate": "[simulate]\nN = 16\nT = 0.5\nreplicas = 3\nobservation_times = [0.0, 0.5]\n",
    "meanfield": "[meanfield]\nM = 16\nT = 0.2\ndt = 0.01\n",
    "hydro": "[hydro]\nN_list = [16, 32]\nreplicas = 20\nt = 0.2\nM = 32\ndt = 0.01\n",
    "fluct": "[fluct]\nN = 16\nreplicas = 40\ntimes = [0.0, 0.2]\nM = 8\ndt = 0.01\n",
    "indep": ("[indep.decay]\nN_list = [16, 32]\nreplicas = 50\nt = 0.2\n"
              "[indep.overlap]\nN_list = [20, 40]\nreplicas = 50\nT = 0.2\n"),
}


def _config(tmp_path, command, extra=""):
    path = tmp_path / f"{command}.toml"
    path.write_text(BASE + extra + SECTIONS[command])
    return path


def _run(tmp_path, command, out="out", extra="", *flags):
    cfg = _config(tmp_path, command, extra)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / out), *flags])


@pytest.mark.parametrize("command", list(SECTIONS))
def test_rerun_is_byte_identical(tmp_path, command):
    assert _run(tmp_path, command, "a") == 0
    assert _run(tmp_path, command, "b") == 0
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert files_a == files_b and files_a
    for name in files_a:
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name


def test_simulate_long_format_and_header(tmp_path):
    _run(tmp_path, "simulate")
    path = tmp_path / "out" / "simulate_counts.csv"
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config: ")
    assert json.loads(lines[0][len("# config: "):])["seed"] == 7
    assert lines[1] == "# seed: 7"
    header, rows = read_csv(path)
    assert header == ["replica", "time", "site", "count"]
    assert len(rows) == 3 * 2 * 16
    totals = {}
    for r, t, _, c in rows:
        totals.setdefault((r, t), 0)
        totals[(r, t)] += int(c)
    for r in ("0", "1", "2"):
        assert totals[(r, "0.0")] == totals[(r, "0.5")]


def test_seed_override_changes_output(tmp_path):
    cfg = _config(tmp_path, "simulate")
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "0x10"])
    a = (tmp_path / "a" / "simulate_counts.csv").read_text()
    b = (tmp_path / "b" / "simulate_counts.csv").read_text()
    assert "# seed: 16" in b
    assert a != b


def test_meanfield_summary(tmp_path):
    assert _run(tmp_path, "meanfield", "out", "", "--check") == 0
    summary = json.loads((tmp_path / "out" / "meanfield_summary.json").read_text())
    assert summary["result"]["passed"]
    assert summary["result"]["diagnostics"]["normalization_drift"] <= 1e-8
    header, rows = read_csv(tmp_path / "out" / "meanfield_profiles.csv")
    assert header == ["time", "k", "grid_index", "value"]


def test_fluct_matrix_dump_round_trip(tmp_path):
    _run(tmp_path, "fluct")
    out = tmp_path / "out"
    S = read_matrix(out / "sigma_t0.2.bin")
    assert S.shape == (16, 16)
    assert np.allclose(S, S.T)
    meta = json.loads((out / "sigma_t0.2.bin.json").read_text())
    assert meta["result"]["M"] == 8 and meta["seed"] == 7


def test_matrix_writer_round_trip(tmp_path):
    m = np.arange(6, dtype=float).reshape(2, 3) / 7
    write_matrix(tmp_path / "m.bin", m, {"note": "x"}, {"a": 1}, 3)
    assert np.array_equal(read_matrix(tmp_path / "m.bin"), m)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "bad.bin")


def test_indep_outputs(tmp_path):
    _run(tmp_path, "indep")
    header, rows = read_csv(tmp_path / "out" / "indep_overlap.csv")
    assert header == ["N", "replicas", "estimate", "ci_low", "ci_high", "c3_bound"]
    assert [r[0] for r in rows] == ["20", "40"]
    header, _ = read_csv(tmp_path / "out" / "indep_decay.csv")
    assert header == ["N", "max_abs_cov", "std_error", "significant"]


def test_missing_config_file(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_psi_is_config_error(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(BASE.replace("const = 0.5, terms = [[0.25", "const = 0.9, terms = [[0.25")
                   + SECTIONS["simulate"])
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_malformed_toml(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = [\n")
    assert main(["meanfield", "--config", str(cfg)]) == 2


def test_numerical_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(BASE + "[meanfield]\nM = 16\nT = 1.0\ndt = 0.9\n")
    assert main(["meanfield", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_failed_check_exit_code(tmp_path):
    # with K1*T = 2 the influence sets cover most positions, so N * overlap
    # grows with N and the scaling gate fails
    cfg = tmp_path / "c.toml"
    cfg.write_text(BASE.replace('preset = "exclusion"', 'preset = "zero"\ncapacity = 1')
                   .replace('kernel = {const = 1.0, terms = [[0.5, "cos", 1, -1]]}\n', "")
                   + "[indep.overlap]\nN_list = [20, 40]\nreplicas = 30\nT = 0.5\nK1 = 4.0\n")
    code = main(["indep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--check"])
    assert code == 4
    assert main(["indep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_config_validation_messages():
    raw = {"model": {"preset": "ehrenfest", "kernel": 1.0}, "initial": {"psi": 1.0}}
    with pytest.raises(ConfigError, match="kmax"):
        resolve(raw, "meanfield")
    with pytest.raises(ConfigError, match="finite"):
        resolve(raw | {"fluct": {"N": 8}}, "fluct")
    with pytest.raises(ConfigError, match="decay"):
        resolve(raw, "indep")
    with pytest.raises(ConfigError):
        resolve(raw | {"seed": -1}, "meanfield")


def test_parse_function():
    f = parse_function({"const": 1.0, "terms": [[2.0, "sin", 1]]})
    assert f(np.array([0.25]))[0] == pytest.approx(3.0)
    assert parse_function(0.5)(np.zeros(3)).tolist() == [0.5] * 3
    with pytest.raises(ConfigError):
        parse_function("x")


def test_console_entry_point(tmp_path):
    cfg = _config(tmp_path, "meanfield")
    res = subprocess.run([sys.executable, "-m", "conserva.cli", "meanfield", "--config", str(cfg),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0
    assert "meanfield: PASS" in res.stdout


def test_stationary_meanfield_series_is_flat(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(BASE.replace("psi = {const = 0.5, terms = [[0.25, \"sin\", 1]]}", "psi = 0.4")
                   .replace('{const = 1.0, terms = [[0.5, "cos", 1, -1]]}', "1.0")
                   + SECTIONS["meanfield"])
    assert main(["meanfield", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    _, rows = read_csv(tmp_path / "o" / "meanfield_profiles.csv")
    vals = np.array([float(r[3]) for r in rows if r[1] == "1"])
    assert np.allclose(vals, 0.4, atol=1e-12)
    summary = json.loads((tmp_path / "o" / "meanfield_summary.json").read_text())
    assert "step_halving" in summary["result"]


def test_invalid_psi_message_names_the_range(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(BASE.replace("const = 0.5, terms = [[0.25", "const = 0.9, terms = [[0.25")
                   + SECTIONS["simulate"])
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "psi must lie in (0, 1)" in capsys.readouterr().err
