import csv
import json
import math

import numpy as np
import pytest

from tsnet import experiments as ex
from tsnet.errors import ConfigError
from tsnet.experiments import (TOY_TRAIN, ExperimentConfig, RunReport, aggregate, budget_schedule,
                               emit_outputs, interp_mask, read_report, run, run_ablation,
                               run_active_learning, run_antinoise, run_comparison)

FAST = {"model": {"mu_hidden": [4], "var_hidden": [3]}, "dpm": {"embed_dim": 2},
        "optim": {"epochs": 2}}


def cfg(**kw):
    return ExperimentConfig.from_dict({"train": FAST, **kw})


def test_aggregate_population_std():
    a = aggregate([1, 2, 3])
    assert a["mean"] == 2.0 and a["n"] == 3
    assert a["std"] == pytest.approx(math.sqrt(2 / 3), rel=1e-15)
    assert aggregate([None, 4.0])["mean"] == 4.0
    assert aggregate([])["mean"] is None


def test_ratio_undefined_denominator():
    assert ex.ratio(3.0, 0.0) is None and ex.ratio(None, 1.0) is None and ex.ratio(3.0, 2.0) == 1.5


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "sweep"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": [1]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seeds": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"source": "csv", "csv_path": "/nonexistent.csv"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"optim": {"learning_rate": 1}}})


def test_toy_preset_layering():
    c = ExperimentConfig.from_dict({"train": {"optim": {"epochs": 7}}})
    assert c.train.optim.epochs == 7
    assert c.train.optim.lr == TOY_TRAIN["optim"]["lr"]
    assert c.train.model.embed_L == TOY_TRAIN["model"]["embed_L"]
    again = ExperimentConfig.from_dict(c.to_dict())
    assert again.to_dict() == c.to_dict()


def test_budget_schedule_rule():
    n0, sizes = budget_schedule(300, 0.2, 5, 0.1)
    assert n0 == 60 and sizes == [24] * 5
    n0, sizes = budget_schedule(20, 0.2, 5, 0.5)
    assert n0 == 4 and sizes == [8, 8]
    counts = np.cumsum([n0, *sizes])
    assert np.all(np.diff(counts) > 0)


def test_interp_mask_partition():
    train = np.linspace(-2, 3, 101)[:, None]
    grid = np.linspace(-7, 7, 300)[:, None]
    inside = interp_mask(train, grid)
    lo, hi = np.quantile(train, [0.01, 0.99])
    assert np.array_equal(inside, (grid[:, 0] >= lo) & (grid[:, 0] <= hi))
    box = interp_mask(np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[0.5, 1.0], [1.5, 1.0]]))
    assert box.tolist() == [True, False]


def test_comparison_report_structure():
    rep = run_comparison(cfg(seeds=[0, 1]))
    assert [r["seed"] for r in rep.per_seed] == [0, 1]
    assert all(r["status"] == "ok" for r in rep.per_seed)
    mses = [r["mse"] for r in rep.per_seed]
    assert rep.aggregate["mse"]["mean"] == pytest.approx(np.mean(mses), rel=1e-15)
    for r in rep.per_seed:
        assert r["n_in"] + r["n_ext"] == 300
        assert r["mse_all"] == pytest.approx(r["mse"], rel=1e-12)


def test_failed_seed_is_recorded(monkeypatch):
    real = ex._comparison_run

    def maybe_fail(c, seed):
        if seed == 1:
            raise FloatingPointError("boom")
        return real(c, seed)

    monkeypatch.setattr(ex, "_comparison_run", maybe_fail)
    rep = run_comparison(cfg(seeds=[0, 1]))
    assert rep.failed_seeds == [1]
    assert rep.aggregate["mse"]["n"] == 1


def test_antinoise_rpi_recomputes():
    rep = run_antinoise(cfg(kind="antinoise", seeds=[0], rates=[0.0, 0.5, 1.0]))
    row = rep.per_seed[0]
    assert len(row["mse"]) == 3 and row["rpi"][0] == 1.0
    assert row["rpi"] == [m / row["mse"][0] for m in row["mse"]]
    d = rep.derived
    assert d["rpi"] == [m / d["mean_mse"][0] for m in d["mean_mse"]]


def test_antinoise_default_rates_length():
    assert len(ExperimentConfig().rates) == 5
    with pytest.raises(ConfigError):
        run_antinoise(cfg(kind="antinoise", rates=[0.2, 1.0]))
    with pytest.raises(ConfigError):
        run_antinoise(cfg(kind="antinoise", noise={"kind": "gamma"}))


def test_active_learning_bookkeeping():
    rep = run_active_learning(cfg(kind="active", seeds=[0], cycles=2))
    row = rep.per_seed[0]
    u, r = row["uncertainty"], row["random"]
    assert u["labeled"] == r["labeled"] == [60, 84, 108]
    assert u["mse"][0] == r["mse"][0]
    assert u["pir"][0] == 0.0
    assert u["pir"] == [(u["mse"][0] - m) / u["mse"][0] for m in u["mse"]]
    assert rep.derived["uncertainty"]["mean_mse"] == u["mse"]


def test_active_learning_exhaustion_note():
    rep = run_active_learning(cfg(kind="active", seeds=[0], cycles=3, initial_fraction=0.5,
                                  query_fraction=0.9))
    assert rep.per_seed[0]["cycles_run"] == 2
    assert rep.notes


def test_ablation_rows():
    rep = run_ablation(cfg(kind="ablate", seeds=[0], variants=["mlp", "tsnet-full"]))
    assert set(rep.aggregate) == {"mlp", "tsnet-full"}
    rows = rep.per_seed[0]["variants"]
    for v in rows.values():
        n_in, n_ext = v["n_in"], v["n_ext"]
        assert n_in + n_ext == 300
        both = (v["mse_in"] * n_in + v["mse_ext"] * n_ext) / 300
        assert both == pytest.approx(v["mse_all"], rel=1e-12)


def test_default_ablation_has_eight_variants():
    assert len(ExperimentConfig().variants) == 8


def test_outputs_and_round_trip(tmp_path):
    c = cfg(seeds=[0], out=str(tmp_path))
    report, extras = run(c)
    files = emit_outputs(report, tmp_path, **extras)
    assert sorted(p.split("/")[-1] for p in files) == ["history.csv", "metrics.json",
                                                       "predictions.csv"]
    back = read_report(tmp_path / "metrics.json")
    assert back == RunReport.from_dict(json.loads(json.dumps(report.to_dict())))
    with open(tmp_path / "predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "mu_y", "var_y", "k_d"]
    assert len(rows) == 301
    assert all(float(v) == float(repr(float(v))) for v in rows[1])
    with open(tmp_path / "history.csv") as fh:
        assert next(csv.reader(fh)) == list(ex.HISTORY_COLUMNS)


def test_toy2d_prediction_rows(tmp_path):
    report, extras = run(cfg(kind="toy2d", source="toy2d", seeds=[0], out=str(tmp_path)))
    emit_outputs(report, tmp_path, **extras)
    with open(tmp_path / "predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "mu_z", "var_z", "k_d"] and len(rows) == 2501


def test_output_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rep = RunReport("toy1d", {}, [0])
    with pytest.raises(OSError, match="file"):
        emit_outputs(rep, blocker / "sub")


def test_metrics_json_is_deterministic(tmp_path):
    for name in ("a", "b"):
        report, extras = run(cfg(seeds=[3], out=str(tmp_path / name)))
        emit_outputs(report, tmp_path / name, **extras)
    assert (tmp_path / "a" / "metrics.json").read_bytes().replace(b"/a", b"") == \
        (tmp_path / "b" / "metrics.json").read_bytes().replace(b"/b", b"")
