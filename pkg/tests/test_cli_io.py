import json

import numpy as np
import pytest

from micromacro import cli
from micromacro.config import parse_config, read_config_text
from micromacro.errors import ConfigError
from micromacro.io import MANIFEST_NAME, Table, emit_results, format_value, read_csv, sha256_file


def test_defaults_fill_missing_keys():
    cfg = parse_config("shear")
    assert cfg.seed == 0 and cfg.threads == 1 and cfg["model"] == "hookean" and cfg["b"] is None
    assert cfg["dy"] == 1 / 32


def test_file_then_flags_precedence():
    cfg = parse_config("shear", "we = 2\n# comment\nk = 50  # trailing\n", {"we": "3"})
    assert cfg["we"] == 3.0 and cfg["k"] == 50


@pytest.mark.parametrize("text,match", [
    ("we = 1\nwe = 2\n", "duplicate"),
    ("bogus = 1\n", "c.cfg:1: unknown key"),
    ("we\n", "expected"),
    ("k = 1.5\n", "as int"),
    ("model = maxwell\n", "not one of"),
    ("eps = 1.2\n", r"epsilon in \(0, 1\)"),
])
def test_config_errors_name_the_line(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config("shear", text, source="c.cfg")


def test_echo_round_trips():
    cfg = parse_config("shear", overrides={"we": "1", "eps": "0.5", "dy": "0.03125"})
    again = parse_config("shear", cfg.echo_text())
    assert again.values == cfg.values
    assert cfg.echo()["dy"] == "0.03125"


def test_dash_and_underscore_keys_agree():
    assert read_config_text("t-end = 2")["t_end"][0] == "2"


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert float(format_value(np.pi)) == np.pi
    assert format_value(np.int64(3)) == "3" and format_value(True) == "true"


def test_empty_table_writes_header_only(tmp_path):
    sums = emit_results([Table("empty", ["a", "b"])], tmp_path)
    assert (tmp_path / "empty.csv").read_bytes() == b"a,b\r\n"
    assert sums["empty.csv"] == sha256_file(tmp_path / "empty.csv")


def test_table_row_length_checked():
    with pytest.raises(ValueError):
        Table("t", ["a"]).add(1, 2)


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = cli.main([*args, "--out", str(out)])
    return code, out


def csv_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


def test_shear_run_is_reproducible_and_seed_dependent(tmp_path):
    flags = ["shear", "--k", "50", "--dy", "0.25", "--dt", "0.01", "--t-end", "0.2", "--record-every", "5"]
    c1, a = run(tmp_path, "a", *flags, "--seed", "4")
    c2, b = run(tmp_path, "b", *flags, "--seed", "4")
    c3, c = run(tmp_path, "c", *flags, "--seed", "5")
    assert c1 == c2 == c3 == 0
    assert csv_bytes(a) == csv_bytes(b)
    assert csv_bytes(a)["stress.csv"] != csv_bytes(c)["stress.csv"]
    man = json.loads((a / MANIFEST_NAME).read_text())
    assert man["subcommand"] == "shear" and man["config"]["seed"] == "4" and man["config"]["k"] == "50"
    assert man["outputs"] == {name: sha256_file(a / name) for name in csv_bytes(a)}
    header, rows = read_csv(a / "stress.csv")
    assert header == ["t", "cell", "tau", "tau_stderr"] and len(rows) == 5 * 4


def test_deterministic_output_ignores_seed(tmp_path):
    flags = ["pgd", "--nx", "16", "--ny", "16", "--rhs", "smooth"]
    _, a = run(tmp_path, "a", *flags, "--seed", "1")
    _, b = run(tmp_path, "b", *flags, "--seed", "2")
    assert csv_bytes(a) == csv_bytes(b)


def test_homogeneous_trajectory(tmp_path):
    code, out = run(tmp_path, "h", "homogeneous", "--t-end", "0.1", "--dt", "0.01")
    assert code == 0
    header, rows = read_csv(out / "trajectory.csv")
    assert header == ["t", "A_xx", "A_xy", "A_yy", "free_energy", "dissipation"] and len(rows) == 11
    assert float(rows[0][1]) == 1.0


def test_exit_codes(tmp_path, capsys):
    code, out = run(tmp_path, "bad", "shear", "--eps", "1.2")
    assert code == 2 and "epsilon in (0, 1)" in capsys.readouterr().err
    assert not (out / MANIFEST_NAME).exists()
    code, _ = run(tmp_path, "fail", "fokker-planck", "--kxx", "2", "--kyy", "-2", "--n", "16", "--t-end", "0.1")
    assert code == 3 and "numerical failure" in capsys.readouterr().err
    cfg = tmp_path / "c.cfg"
    cfg.write_text("we = 1\nwhat = 2\n")
    code, _ = run(tmp_path, "cfg", "shear", "--config", str(cfg))
    assert code == 2 and "c.cfg:2: unknown key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["shear", "--no-such-flag", "1"])
    assert exc.value.code == 2


def test_rb_offline_then_online(tmp_path):
    code, off = run(tmp_path, "off", "rb-offline", "--n-trial", "6", "--n-basis", "2", "--m-large", "400",
                    "--t-end", "0.2", "--dt", "0.05")
    assert code == 0 and (off / "basis.json").exists()
    assert "basis.json" in json.loads((off / MANIFEST_NAME).read_text())["outputs"]
    code, on = run(tmp_path, "on", "rb-online", "--basis", str(off / "basis.json"), "--n-lambda", "3")
    assert code == 0
    header, rows = read_csv(on / "estimates.csv")
    assert len(rows) == 3 and "reduction" in header
