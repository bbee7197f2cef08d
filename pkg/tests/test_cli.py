import csv
import json

import pytest

from sfdelab.cli import main

ZERO = '{"d": 1, "r": 1, "drift": {"kind": "zero"}}'
LINEAR = ('{"d": 1, "r": 1, "drift": {"kind": "linear", "A": [[-1]]}, '
          '"g": {"kind": "point_delay", "G": [[0.5]], "theta": -1}, "h": {"kind": "affine", "H0": [[1]]}}')


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_zero_model_terminal_states(tmp_path):
    assert main(["simulate", "--model", ZERO, "--T", "2", "--paths", "7", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "summary.csv")
    assert len(rows) == 7 and all(float(r["terminal"]) == 0.0 for r in rows)
    assert list(rows[0]) == ["path_id", "exploded", "sup_|x|", "terminal"]


def test_invalid_scheme_exit_1(tmp_path, capsys):
    assert main(["simulate", "--preset", "paper-eq11", "--scheme", "rk4", "--out", str(tmp_path)]) == 1
    assert "scheme:" in capsys.readouterr().err


def test_bad_model_key_path(tmp_path, capsys):
    bad = '{"d": 1, "r": 1, "h": {"kind": "affine", "H9": [[1]]}}'
    assert main(["simulate", "--model", bad, "--out", str(tmp_path)]) == 1
    assert "model.h.H9" in capsys.readouterr().err


def test_bad_number_and_unknown_flag(tmp_path, capsys):
    assert main(["simulate", "--dt", "fast", "--out", str(tmp_path)]) == 1
    assert "dt:" in capsys.readouterr().err
    assert main(["simulate", "--bogus"]) == 1


def test_explosion_on_stability_scheme_exit_2(tmp_path):
    grow = '{"d": 1, "r": 0.4, "drift": {"kind": "linear", "A": [[2]]}}'
    rc = main(["simulate", "--model", grow, "--scheme", "split_step_implicit", "--dt", "0.4", "--T", "20",
               "--paths", "3", "--phi", '{"kind": "constant", "value": [1]}', "--out", str(tmp_path)])
    assert rc == 2
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "invalid"


def test_explicit_explosions_are_data(tmp_path):
    cubic = '{"d": 1, "r": 0.1, "drift": {"kind": "poly", "s": 2}, "h": {"kind": "affine", "H0": [[1]]}}'
    rc = main(["simulate", "--model", cubic, "--scheme", "explicit_em", "--dt", "0.1", "--T", "1",
               "--paths", "20", "--phi", '{"kind": "constant", "value": [10]}', "--out", str(tmp_path)])
    assert rc == 0
    assert all(r["exploded"] == "1" for r in _rows(tmp_path / "summary.csv"))


def test_lyapunov_report(tmp_path):
    rc = main(["diagnose", "lyapunov", "--preset", "paper-eq11", "--K", "12", "--paths", "400",
               "--phi", '{"kind": "constant", "value": [1]}', "--seed", "3", "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "lyapunov_report.json").read_text())
    assert rep["delta_hat"] < 1 and rep["valid"]
    assert len(_rows(tmp_path / "iterates.csv")) == 13


def test_lyapunov_rejects_explicit(tmp_path):
    assert main(["diagnose", "lyapunov", "--scheme", "explicit_em", "--K", "5", "--out", str(tmp_path)]) == 1


def test_validate_model(tmp_path):
    assert main(["validate-model", "--preset", "paper-eq11", "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "validation.json").read_text())
    assert rep["L"] == 1.25 and rep["D"] == 0.5 and rep["valid"]
    lin = '{"d": 1, "r": 1, "drift": {"kind": "linear", "A": [[-1]]}}'
    assert main(["validate-model", "--model", lin, "--lam", "4", "--out", str(tmp_path / "b")]) == 2


def test_factorization_csv(tmp_path):
    rc = main(["factorization", "--mu-grid", "8:4:128", "--paths", "2000", "--out", str(tmp_path)])
    assert rc == 0
    rows = _rows(tmp_path / "factorization.csv")
    assert [float(r["mu"]) for r in rows] == [8.0, 32.0, 128.0]
    assert all(r["pass"] == "1" for r in rows)
    assert main(["factorization", "--mu-grid", "8:1:16", "--out", str(tmp_path)]) == 1


def test_tightness_and_feller(tmp_path):
    rc = main(["diagnose", "tightness", "--preset", "paper-eq11", "--dt", "0.0078125", "--T", "14",
               "--paths", "200", "--out", str(tmp_path / "t")])
    assert rc == 0
    assert len(_rows(tmp_path / "t" / "tightness.csv")) == 10 * 3 * 2
    assert len(_rows(tmp_path / "t" / "kolmogorov.csv")) == 6
    rc = main(["diagnose", "feller", "--model", LINEAR, "--phi", '{"kind": "constant", "value": [1]}',
               "--paths", "200", "--out", str(tmp_path / "f")])
    assert rc == 0
    assert all(r["passed"] == "1" for r in _rows(tmp_path / "f" / "feller.csv"))


def test_invariant_negative_offsets(tmp_path):
    ou = '{"d": 1, "r": 1, "drift": {"kind": "linear", "A": [[-1]]}, "h": {"kind": "affine", "H0": [[1]]}}'
    rc = main(["invariant", "--model", ou, "--dt", "0.01", "--proj", "-1,-0.5,0", "--T", "14", "--paths", "50",
               "--perms", "19", "--out", str(tmp_path)])
    assert rc == 0
    rows = _rows(tmp_path / "samples.csv")
    assert len(rows) == 50 * 5 and list(rows[0]) == ["path_id", "t", "x(-1)", "x(-0.5)", "x(0)"]


def test_replay_and_thread_independence(tmp_path, monkeypatch):
    args = ["diagnose", "lyapunov", "--preset", "paper-eq11", "--K", "6", "--paths", "600", "--seed", "9",
            "--phi", '{"kind": "constant", "value": [1]}']
    assert main(args + ["--threads", "1", "--out", str(tmp_path / "one")]) == 0
    monkeypatch.setenv("SFDE_THREADS", "8")
    monkeypatch.setenv("SFDE_OUT_DIR", str(tmp_path / "eight"))
    assert main(args) == 0
    assert main(["replay", str(tmp_path / "one" / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    ref = _outputs(tmp_path / "one")
    assert ref == _outputs(tmp_path / "eight") == _outputs(tmp_path / "again")
    man = json.loads((tmp_path / "one" / "manifest.json").read_text())
    assert man["version"] and man["created"] and man["config"]["seed"] == 9


def test_bad_env_threads(tmp_path, monkeypatch):
    monkeypatch.setenv("SFDE_THREADS", "many")
    assert main(["simulate", "--model", ZERO, "--T", "1", "--paths", "1", "--out", str(tmp_path)]) == 1
