import json

import numpy as np
import pytest

from tsnet import cli
from tsnet import experiments as ex
from tsnet.errors import DivergenceError

FAST = {"train": {"model": {"mu_hidden": [4], "var_hidden": [3]}, "dpm": {"embed_dim": 2},
                  "optim": {"epochs": 2}}}


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "fast.json"
    p.write_text(json.dumps(FAST))
    return p


def test_toy1d_writes_files_and_checkpoint(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    ck = tmp_path / "model.json"
    code = cli.main(["toy1d", "--config", str(fast_config), "--seed", "0,1", "--out", str(out),
                     "--checkpoint", str(ck)])
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert str(out / "metrics.json") in printed
    report = json.loads((out / "metrics.json").read_text())
    assert report["seeds"] == [0, 1] and report["config"]["seeds"] == [0, 1]
    assert len((out / "predictions.csv").read_text().splitlines()) == 301

    inp = tmp_path / "in.csv"
    inp.write_text("x\n-1.0\n0.5\n2.0\n")
    assert cli.main(["predict", "--checkpoint", str(ck), "--input", str(inp),
                     "--out", str(tmp_path / "pred")]) == 0
    rows = (tmp_path / "pred" / "predictions.csv").read_text().splitlines()
    assert rows[0] == "x,mu_y0,var_y0,k_d" and len(rows) == 4


def test_config_error_exit(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"model": {"variant": "gp"}}}))
    assert cli.main(["toy1d", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("[1, 2]")
    assert cli.main(["toy1d", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["toy1d", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_bad_seed_list_exits_via_argparse():
    with pytest.raises(SystemExit) as info:
        cli.main(["toy1d", "--seed", "a,b"])
    assert info.value.code == 2


def test_data_error_exit(tmp_path):
    csv_path = tmp_path / "d.csv"
    csv_path.write_text("a,y\n1,2\n3,oops\n5,6\n7,8\n9,10\n")
    schema = tmp_path / "s.json"
    schema.write_text(json.dumps({"target": "y"}))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"source": "csv", "csv_path": str(csv_path),
                               "schema_path": str(schema), **FAST}))
    assert cli.main(["compare", "--config", str(cfg), "--seed", "0"]) == cli.EXIT_DATA


def test_predict_column_mismatch(tmp_path, fast_config):
    ck = tmp_path / "m.json"
    assert cli.main(["toy1d", "--config", str(fast_config), "--out", str(tmp_path / "o"),
                     "--checkpoint", str(ck)]) == 0
    inp = tmp_path / "wide.csv"
    inp.write_text("a,b\n1,2\n")
    assert cli.main(["predict", "--checkpoint", str(ck), "--input", str(inp),
                     "--out", str(tmp_path / "p")]) == cli.EXIT_DATA


def test_divergence_and_partial_exit_codes(monkeypatch, fast_config):
    real = ex._comparison_run

    def diverge(cfg, seed):
        if seed in bad:
            raise DivergenceError("non-finite loss", None, 3)
        return real(cfg, seed)

    monkeypatch.setattr(ex, "_comparison_run", diverge)
    bad = {0, 1}
    assert cli.main(["toy1d", "--config", str(fast_config), "--seed", "0,1"]) == cli.EXIT_DIVERGED
    bad = {1}
    assert cli.main(["toy1d", "--config", str(fast_config), "--seed", "0,1"]) == cli.EXIT_PARTIAL


def test_stdout_report_without_out(fast_config, capsys):
    assert cli.main(["toy1d", "--config", str(fast_config)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kind"] == "toy1d" and np.isfinite(report["aggregate"]["mse"]["mean"])
