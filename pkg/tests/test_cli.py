import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import binom

from cwstein.cli import EXIT_COMPUTATION, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main, parse_n_grid


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_exit_codes_distinct():
    assert len({EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTATION, EXIT_IO}) == 4


def test_fixed_point(capsys):
    rc, out, _ = run(capsys, "fixed-point", "--beta", "0.5", "--h", "0")
    assert rc == EXIT_OK and "m0 = 0.0" in out
    rc, out, _ = run(capsys, "fixed-point", "--beta", "2", "--h", "0")
    assert rc == EXIT_OK
    assert float(out.split("=")[1].split()[0]) == pytest.approx(0.9575, abs=1e-4)


def test_fixed_point_csv(capsys):
    rc, out, _ = run(capsys, "fixed-point", "--beta", "2", "--format", "csv")
    r = rows(out)[0]
    assert float(r["m0"]) == pytest.approx(math.tanh(2 * float(r["m0"])), abs=1e-12)


def test_fixed_point_negative_beta(capsys):
    rc, _, err = run(capsys, "fixed-point", "--beta", "-1", "--h", "0")
    assert rc == EXIT_VALIDATION and "beta" in err


def test_exact_dist_n4(capsys):
    rc, out, _ = run(capsys, "exact-dist", "--n", "4", "--beta", "0.5", "--h", "0")
    r = rows(out)
    assert rc == EXIT_OK and len(r) == 5
    assert math.fsum(float(x["probability"]) for x in r) == pytest.approx(1.0, abs=1e-15)


def test_exact_dist_binomial(capsys):
    rc, out, _ = run(capsys, "exact-dist", "--n", "10", "--beta", "0")
    p = np.array([float(x["probability"]) for x in rows(out)])
    assert np.allclose(p, binom.pmf(np.arange(11), 10, 0.5), rtol=1e-13, atol=0)


def test_exact_dist_bad_out_path(capsys, tmp_path):
    rc, _, err = run(capsys, "exact-dist", "--n", "4", "--beta", "0.5", "--out", str(tmp_path / "no" / "such.csv"))
    assert rc == EXIT_IO and "cannot write" in err


def test_exact_dist_json(capsys, tmp_path):
    out = tmp_path / "d.json"
    rc, _, _ = run(capsys, "exact-dist", "--n", "6", "--beta", "0.3", "--format", "json", "--out", str(out))
    data = json.loads(out.read_text())
    assert rc == EXIT_OK and [d["k"] for d in data] == list(range(7))


def test_missing_n(capsys):
    rc, _, err = run(capsys, "exact-dist", "--beta", "0.5")
    assert rc == EXIT_VALIDATION and "--n" in err


def test_simulate_deterministic(capsys):
    a = run(capsys, "simulate", "--n", "20", "--beta", "0.5", "--steps", "20000", "--seed", "4")
    b = run(capsys, "simulate", "--n", "20", "--beta", "0.5", "--steps", "20000", "--seed", "4")
    assert a == b and a[0] == EXIT_OK
    assert "tv_distance" in a[2]


def test_simulate_initial_point_mass(capsys):
    rc, out, _ = run(capsys, "simulate", "--n", "6", "--beta", "0.5", "--steps", "0", "--initial", "2")
    assert [int(r["count"]) for r in rows(out)] == [0, 0, 1, 0, 0, 0, 0]


def test_simulate_bad_initial(capsys):
    rc, _, _ = run(capsys, "simulate", "--n", "6", "--beta", "0.5", "--initial", "9")
    assert rc == EXIT_VALIDATION


def test_stein_solve_ou_identity(capsys):
    rc, out, _ = run(capsys, "stein-solve", "--regime", "ou", "--fn", "identity")
    fp = np.array([float(r["f_prime"]) for r in rows(out)])
    assert rc == EXIT_OK and np.max(np.abs(fp - 1.0)) < 1e-8


def test_stein_solve_critical_tanh(capsys):
    rc, out, err = run(capsys, "stein-solve", "--beta", "1", "--h", "0", "--fn", "tanh")
    res = [abs(float(r["residual"])) for r in rows(out) if r["residual"]]
    assert rc == EXIT_OK and max(res) < 1e-7
    assert list(rows(out)[0]) == ["x", "f", "f_prime", "f_double_prime", "f_triple_prime", "residual"]


def test_stein_solve_clip_omits_third_derivative(capsys):
    rc, out, err = run(capsys, "stein-solve", "--beta", "0.5", "--fn", "clip")
    assert rc == EXIT_OK and rows(out)[0]["f_triple_prime"] == ""
    assert "omitted" in err


def test_stein_solve_unknown_fn(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["stein-solve", "--beta", "1", "--fn", "nope"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for name in ("clip", "tanh", "cos", "sigmoid", "const"):
        assert name in err


def test_stein_solve_identity_needs_ou(capsys):
    rc, _, err = run(capsys, "stein-solve", "--beta", "0.5", "--fn", "identity")
    assert rc == EXIT_VALIDATION and "unbounded" in err


def test_stein_solve_regime_mismatch(capsys):
    rc, _, _ = run(capsys, "stein-solve", "--beta", "0.5", "--regime", "critical")
    assert rc == EXIT_VALIDATION


def test_stein_solve_computation_failure(capsys):
    rc, _, err = run(capsys, "stein-solve", "--beta", "1", "--fn", "tanh", "--dx", "0.5", "--tol", "1e-15")
    assert rc == EXIT_COMPUTATION and "residual" in err


def test_rate_sweep_supercritical(capsys):
    rc, out, err = run(capsys, "rate-sweep", "--beta", "0.5", "--fn", "cos")
    assert rc == EXIT_OK
    slope = float(err.split("slope = ")[1].split()[0])
    assert slope <= -0.45
    assert [int(r["n"]) for r in rows(out)] == [2**j for j in range(8, 17)]


def test_rate_sweep_critical_scaled_bounded(capsys):
    rc, out, _ = run(capsys, "rate-sweep", "--beta", "1", "--fn", "cos")
    scaled = [float(r["scaled_delta"]) for r in rows(out)]
    assert rc == EXIT_OK and max(scaled) < 2 * scaled[0]


def test_rate_sweep_two_points_warns(capsys):
    rc, out, err = run(capsys, "rate-sweep", "--beta", "0.5", "--n-grid", "256,512")
    assert rc == EXIT_OK and "no fit" in err
    assert len(rows(out)) == 2


def test_rate_sweep_outside_phases(capsys):
    rc, _, _ = run(capsys, "rate-sweep", "--beta", "2")
    assert rc == EXIT_VALIDATION


def test_rate_sweep_json_and_gap(capsys):
    rc, out, _ = run(capsys, "rate-sweep", "--beta", "0.5", "--fn", "tanh", "--n-grid", "256:2048:2",
                     "--gap", "--format", "json", "--h", "0.1")
    data = json.loads(out)
    assert rc == EXIT_OK and data["beta"] == 0.5


def test_rate_sweep_threads_do_not_change_output(capsys):
    a = run(capsys, "rate-sweep", "--beta", "0.8", "--fn", "sigmoid", "--threads", "1")
    b = run(capsys, "rate-sweep", "--beta", "0.8", "--fn", "sigmoid", "--threads", "4")
    assert a == b


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("THREADS", "0")
    rc, _, err = run(capsys, "rate-sweep", "--beta", "0.5", "--n-grid", "256,512")
    assert rc == EXIT_VALIDATION and "THREADS" in err
    # the flag wins over the environment
    rc, _, _ = run(capsys, "rate-sweep", "--beta", "0.5", "--n-grid", "256,512", "--threads", "2")
    assert rc == EXIT_OK


def test_config_file_and_precedence(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"beta": 0.2, "n": 8}))
    rc, out, _ = run(capsys, "exact-dist", "--config", str(cfg))
    assert rc == EXIT_OK and len(rows(out)) == 9
    rc, out, _ = run(capsys, "exact-dist", "--config", str(cfg), "--n", "3")
    assert len(rows(out)) == 4


def test_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "exact-dist", "--config", str(bad))[0] == EXIT_VALIDATION
    assert run(capsys, "exact-dist", "--config", str(tmp_path / "missing.json"))[0] == EXIT_IO


def test_audit_tails_table(capsys):
    rc, out, _ = run(capsys, "audit", "tails", "--n", "50", "--beta", "0.5", "--format", "csv")
    r = rows(out)
    assert rc == EXIT_OK and list(r[0]) == ["t", "lhs", "rhs", "violated"]
    assert all(x["violated"] == "false" for x in r)
    t3 = next(x for x in r if float(x["t"]) == 3.0)
    assert float(t3["rhs"]) == pytest.approx(2 * math.exp(-9 / 6))


def test_audit_unknown_name(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["audit", "everything"])
    assert exc.value.code == 2


def test_audit_json_schema(capsys):
    rc, out, err = run(capsys, "audit", "moments", "--beta", "0.5")
    rep = json.loads(out)
    assert rc == EXIT_OK and rep["schema_version"] == 1
    assert rep["summary"]["failed"] == []
    assert "audits passed" in err


def test_audit_strict_exit(capsys):
    # the critical drift audit misses its finite-n tolerance, so strict mode reports it
    rc, _, err = run(capsys, "audit", "expansions", "--strict")
    assert rc == EXIT_COMPUTATION and "critical_drift" in err


def test_audit_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(capsys, "audit", "stein", "--beta", "0.5", "--out", str(a), "--threads", "1")
    run(capsys, "audit", "stein", "--beta", "0.5", "--out", str(b), "--threads", "3")
    assert a.read_bytes() == b.read_bytes()


def test_parse_n_grid():
    assert parse_n_grid("256:2048:2") == (256, 512, 1024, 2048)
    assert parse_n_grid("10,20, 40") == (10, 20, 40)
    for bad in ("20,10", "a,b", "0:10:2", "1:10:1"):
        with pytest.raises(Exception):
            parse_n_grid(bad)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cwstein", "fixed-point", "--beta", "0.5"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "m0 = 0.0" in proc.stdout
