import csv
import io
import json
import math
import subprocess
import sys

import pytest

from persistlab import cli
from persistlab import exponents as ex
from persistlab.kernels import FBm, pursuit_cov
from persistlab.orthant import exact_ou_negative

OU_CONFIG = {
    "kernel": {"variant": "ou"},
    "region": {"type": "cube", "side": 1.0, "d": 1},
    "T": [1.0],
    "delta": 0.05,
    "method": "bridge_mc",
    "n": 200_000,
    "seed": 3,
}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _run(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr().out


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# kernel-eval -----------------------------------------------------------------


def test_kernel_eval_fbm_diagonal(tmp_path, capsys):
    cfg = {"kernel": {"variant": "fbm", "h": 0.5}, "eval": {"t": [0.5, 1.0, 2.5]}}
    code, out = _run(["kernel-eval", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_OK
    rows = _rows(out)
    assert [float(r["B"]) for r in rows] == [0.5, 1.0, 2.5]


def test_kernel_eval_dual_lag_table(tmp_path, capsys):
    cfg = {"kernel": {"variant": "lamperti_dual", "base": {"variant": "fbm", "h": 0.5}}, "eval": {"tau": [0.0, 1.0, 3.0]}}
    code, out = _run(["kernel-eval", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_OK
    for r in _rows(out):
        assert float(r["B"]) == pytest.approx(math.exp(-float(r["tau"]) / 2), abs=1e-12)


def test_kernel_eval_pursuit_table(tmp_path, capsys):
    from persistlab.kernels import pursuit_kernel

    cfg = {
        "kernel": pursuit_kernel(FBm(0.5)).to_dict(),
        "eval": {"t": [[1, 2.0], [2, 3.0]], "s": [[1, 1.0], [3, 3.0]]},
    }
    code, out = _run(["kernel-eval", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_OK
    rows = _rows(out)
    assert float(rows[0]["B"]) == pytest.approx(pursuit_cov(1, 1, 2.0, 1.0, FBm(0.5)))
    assert float(rows[1]["B"]) == pytest.approx(pursuit_cov(2, 3, 3.0, 3.0, FBm(0.5)))


def test_kernel_eval_schema_violation(tmp_path, capsys):
    code, out = _run(["kernel-eval", "--config", _write(tmp_path, {"kernel": {"variant": "fbm", "h": 0.5}, "bogus": 1})], capsys)
    assert code == cli.EXIT_CONFIG
    assert "error" in json.loads(out)


# estimate ---------------------------------------------------------------------


def test_estimate_ou_oracle(tmp_path, capsys):
    code, out = _run(["estimate", "--config", _write(tmp_path, OU_CONFIG)], capsys)
    assert code == cli.EXIT_OK
    rec = json.loads(out.splitlines()[0])
    se = rec["p"] * rec["se_log"]
    assert abs(rec["p"] - exact_ou_negative(1.0)) <= 3 * se
    assert rec["config"]["seed"] == 3 and rec["T"] == 1.0


def test_estimate_byte_identical_across_threads(tmp_path, capsys):
    cfg = {**OU_CONFIG, "T": [1.0, 2.0], "n": 20_000}
    path = _write(tmp_path, cfg)
    outs = []
    for threads in ("1", "3"):
        code, out = _run(["estimate", "--config", path, "--threads", threads], capsys)
        assert code == cli.EXIT_OK
        outs.append(out)
    assert outs[0] == outs[1]


def test_estimate_records_reproduce_run(tmp_path, capsys):
    cfg = {**OU_CONFIG, "n": 5000}
    code, out = _run(["estimate", "--config", _write(tmp_path, cfg)], capsys)
    rec = json.loads(out.splitlines()[0])
    # the embedded config is a complete, valid config on its own
    code2, out2 = _run(["estimate", "--config", _write(tmp_path, rec["config"], "again.json")], capsys)
    assert code2 == cli.EXIT_OK and out2 == out


def test_estimate_seed_flag_overrides(tmp_path, capsys):
    cfg = {**OU_CONFIG, "n": 5000}
    _, a = _run(["estimate", "--config", _write(tmp_path, cfg), "--seed", "9"], capsys)
    assert json.loads(a)["config"]["seed"] == 9


def test_estimate_fit_needs_three_T(tmp_path, capsys):
    cfg = {**OU_CONFIG, "fit": {"psi": "power"}}
    code, out = _run(["estimate", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_CONFIG
    assert "need >= 3 T values" in json.loads(out)["error"]


def test_estimate_fit_line(tmp_path, capsys):
    cfg = {**OU_CONFIG, "T": [2.0, 3.0, 4.0], "n": 20_000, "fit": {"psi": "power", "d": 1}}
    code, out = _run(["estimate", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_OK
    lines = [json.loads(x) for x in out.splitlines()]
    assert len(lines) == 4 and "fit" in lines[-1]
    assert lines[-1]["fit"]["theta_hat"] > 0


def test_estimate_bad_method(tmp_path, capsys):
    code, _ = _run(["estimate", "--config", _write(tmp_path, {**OU_CONFIG, "method": "magic"})], capsys)
    assert code == cli.EXIT_CONFIG


def test_estimate_numerical_failure(tmp_path, capsys):
    cfg = {**OU_CONFIG, "kernel": {"variant": "fbm", "h": 0.3}}
    code, out = _run(["estimate", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_NUMERIC
    assert json.loads(out)["kind"] == "numerical"


def test_estimate_pursuit(tmp_path, capsys):
    cfg = {"kernel": {"variant": "fbm", "h": 0.5}, "region": {"type": "pursuit", "step": 0.1}, "T": [2.0], "method": "particle", "n": 5000}
    code, out = _run(["estimate", "--config", _write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_OK
    assert json.loads(out)["region"] == "pursuit"


# outputs ----------------------------------------------------------------------


def test_write_once(tmp_path, capsys):
    cfg = {**OU_CONFIG, "n": 5000}
    path = _write(tmp_path, cfg)
    out_dir = tmp_path / "out"
    _run(["estimate", "--config", path, "--out", str(out_dir)], capsys)
    files = list(out_dir.iterdir())
    assert len(files) == 1
    name = files[0].name
    assert name.startswith("estimate_") and name.endswith("_3.jsonl")
    before = files[0].read_bytes()
    files[0].write_text("sentinel")
    code = cli.main(["estimate", "--config", path, "--out", str(out_dir)])
    err = capsys.readouterr().err
    assert code == cli.EXIT_OK and "exists" in err
    assert files[0].read_text() == "sentinel"
    assert before.endswith(b"\n")


def test_config_hash_stable():
    a = cli.resolve({"kernel": {"variant": "ou"}, "delta": 0.1})
    b = cli.resolve({"delta": 0.1, "kernel": {"variant": "ou"}})
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash(cli.resolve({"kernel": {"variant": "ou"}, "delta": 0.2}))


# verify -----------------------------------------------------------------------


def test_verify_formulas(tmp_path, capsys):
    code, out = _run(["verify", "formulas", "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    assert out.strip().endswith("PASS")
    doc = json.loads((tmp_path / "verify_formulas_quick_0.json").read_text())
    assert doc["passed"] and all(r["verdict"] for r in doc["relations"])
    assert (tmp_path / "verify_formulas_quick_0.txt").read_text() == out


def test_verify_budget_exhausted(monkeypatch, capsys):
    original = ex.Budget.for_tier.__func__

    def tiny(cls, tier, seed=0, threads=1):
        b = original(cls, tier, seed, threads)
        b.seconds = 0.0
        return b

    monkeypatch.setattr(ex.Budget, "for_tier", classmethod(tiny))
    code, out = _run(["verify", "d1-duality"], capsys)
    assert code == cli.EXIT_BUDGET
    assert "PARTIAL" in out


def test_unknown_suite_rejected():
    with pytest.raises(SystemExit) as err:
        cli.main(["verify", "everything"])
    assert err.value.code == 2


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "persistlab.cli", "verify", "formulas"], capture_output=True, text=True)
    assert r.returncode == 0 and "PASS" in r.stdout
