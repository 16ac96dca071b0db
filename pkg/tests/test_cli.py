import csv
import json
import time

import pytest

from dpabc.cli import EXIT_CONFIG, EXIT_NUMERIC, main


def _run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([*args, "--out", str(out), "--threads", "2"])
    return code, out


def _json(path):
    return json.loads(path.read_text())


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_privatize_deterministic(tmp_path):
    c1, a = _run(tmp_path, "privatize", "--s", "37", "--seed", "7", name="a")
    c2, b = _run(tmp_path, "privatize", "--s", "37", "--seed", "7", name="b")
    assert c1 == c2 == 0
    assert (a / "privatize.json").read_bytes() == (b / "privatize.json").read_bytes()
    assert _json(a / "privatize.json")["s_obs"] != [37.0]


def test_privatize_small_noise(tmp_path):
    code, out = _run(tmp_path, "privatize", "--s", "37", "--epsilon", "20", "--seed", "3")
    assert code == 0
    assert abs(_json(out / "privatize.json")["s_obs"][0] - 37.0) < 0.5


@pytest.mark.parametrize(
    "args",
    [
        ["privatize", "--s", "37", "--epsilon", "0"],
        ["privatize", "--s", "37", "--epsilon", "-1"],
        ["privatize"],
        ["abc", "--mechanism", "gaussian", "--delta", "0"],
        ["mcem", "--schedule", "1e-3:100,1e-2:1000"],
        ["posterior", "--gs", "2"],
        ["abc", "--p", "2"],
    ],
)
def test_config_errors(tmp_path, args, capsys):
    code, _ = _run(tmp_path, *args)
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epsilon": 0.2, "bogus": 1}))
    code, _ = _run(tmp_path, "abc", "--config", str(cfg))
    assert code == EXIT_CONFIG


def test_numeric_error_exit(tmp_path, capsys):
    code, _ = _run(tmp_path, "abc-is", "--s-obs", "1e6", "--epsilon", "20", "--n", "1000")
    assert code == EXIT_NUMERIC
    assert "numeric error" in capsys.readouterr().err


def test_abc_outputs(tmp_path):
    code, out = _run(tmp_path, "abc", "--n", "2000", "--seed", "4")
    assert code == 0
    rows = _rows(out / "abc_samples.csv")
    assert rows[0] == ["theta", "chunk", "index"] and len(rows) == 2001
    meta = _json(out / "abc.json")
    assert meta["n"] == 2000 and meta["seed"] == 4
    assert meta["mechanism"] == {"kind": "laplace-eps", "epsilon": 0.2, "delta": 0.0, "gs": 1.0, "p": 1}
    assert b"\r" not in (out / "abc_samples.csv").read_bytes()


def test_abc_is_outputs(tmp_path):
    code, out = _run(tmp_path, "abc-is", "--n", "5000")
    assert code == 0
    assert _rows(out / "abc_is_samples.csv")[0] == ["theta", "weight"]
    meta = _json(out / "abc_is.json")
    assert meta["proposal"] == "prior" and meta["posterior_mean_se"] > 0


def test_mcem_outputs(tmp_path):
    code, out = _run(tmp_path, "mcem", "--schedule", "1e-2:1000,1e-3:10000", "--n", "10000")
    assert code == 0
    rows = _rows(out / "mcem_trace.csv")
    assert rows[0] == ["t", "theta", "e_estimate", "ess", "n", "delta"]
    meta = _json(out / "mcem.json")
    assert meta["converged"] and meta["schedule"] == "0.01:1000,0.001:10000"
    assert abs(meta["theta_hat"][0] - 37.237) < 0.5
    assert float(rows[-1][1]) == meta["theta_hat"][0]


def test_posterior_outputs(tmp_path):
    code, out = _run(tmp_path, "posterior", "--n", "2001")
    assert code == 0
    rows = _rows(out / "posterior_grid.csv")
    assert rows[0] == ["theta", "prior", "naive", "true_posterior"] and len(rows) == 2002
    meta = _json(out / "posterior.json")
    assert meta["means"]["naive"] == pytest.approx(31.2, abs=1e-3)


def test_mle_oracle_output(tmp_path):
    code, out = _run(tmp_path, "mle-oracle")
    assert code == 0
    assert _json(out / "mle_oracle.json")["argmax"] == pytest.approx(37.237, abs=1e-3)


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epsilon": 1.0, "seed": 9}))
    code, out = _run(tmp_path, "privatize", "--config", str(cfg), "--s", "10", "--seed", "2")
    assert code == 0
    echo = _json(out / "config.json")
    assert echo["epsilon"] == 1.0 and echo["seed"] == 2 and echo["experiment"] == "privatize"


def test_config_echo_reproduces(tmp_path):
    code, first = _run(tmp_path, "abc", "--n", "1500", "--seed", "11", "--epsilon", "0.5", name="first")
    assert code == 0
    snapshot = {p.name: p.read_bytes() for p in first.iterdir()}
    assert main(["abc", "--config", str(first / "config.json")]) == 0
    assert {p.name: p.read_bytes() for p in first.iterdir()} == snapshot


def test_smoke_reproduce(tmp_path, capsys):
    start = time.perf_counter()
    code, out = _run(tmp_path, "reproduce-paper", "--abc-n", "1000")
    elapsed = time.perf_counter() - start
    assert code == 0
    assert elapsed < 5.0
    summary = _json(out / "summary.json")
    ks = next(c for c in summary["checks"] if c["name"] == "abc_exactness_ks")
    assert ks["passed"] is None and "insufficient n" in ks["note"]
    assert "SKIP  abc_exactness_ks" in capsys.readouterr().out
    for name in ("config.json", "posterior_grid.csv", "abc_samples.csv", "mcem_trace.csv", "summary.json"):
        assert (out / name).exists()


def test_help_lists_experiments(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for name in ("privatize", "abc-is", "reproduce-paper"):
        assert name in text
