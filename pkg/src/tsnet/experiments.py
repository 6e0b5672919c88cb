"""Experiment protocols: comparison, anti-noise, active learning, ablation, outputs."""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import VARIANTS, TrainConfig
from .data import (Dataset, EvalGrid, NoisePlan, gen_toy1d, gen_toy2d, inject_noise,
                   load_csv, load_schema, split)
from .errors import ConfigError, DivergenceError, TSNetError
from .training import TSNetModel, metrics, predict, train

KINDS = ("toy1d", "toy2d", "compare", "antinoise", "active", "ablate")
SOURCES = ("toy1d", "toy2d", "csv")
ANTINOISE_RATES = (0.0, 0.2, 0.4, 0.8, 1.0)

# Training overrides for the synthetic benchmarks, picked by a small grid over
# lr, embedding level and density-target form. The library defaults stay as documented.
TOY_TRAIN = {
    "model": {"embed_L": 2},
    "optim": {"lr": 1e-2},
    "dpm": {"target_form": "proportional"},
}
HISTORY_COLUMNS = ("epoch", "cl", "kl", "hmse", "total", "val_mse", "val_mae", "val_nll",
                   "wall_time")


@dataclass
class ExperimentConfig:
    kind: str = "toy1d"
    source: str = "toy1d"
    csv_path: str | None = None
    schema_path: str | None = None
    seeds: list = field(default_factory=lambda: [0])
    out: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    split_ratios: tuple = (0.6, 0.2, 0.2)
    # toy data has no test split: the noise-free grid is the test set
    toy_val_fraction: float = 0.2
    noise: dict = field(default_factory=dict)
    rates: tuple = ANTINOISE_RATES
    initial_fraction: float = 0.2
    cycles: int = 5
    query_fraction: float = 0.1
    variants: tuple = VARIANTS
    interp_quantiles: tuple = (0.01, 0.99)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown dataset source {self.source!r}; choose from {SOURCES}")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.source == "csv":
            for name in ("csv_path", "schema_path"):
                p = getattr(self, name)
                if not p or not Path(p).is_file():
                    raise ConfigError(f"{name} must name an existing file, got {p!r}")
        if self.kind in ("ablate", "toy1d", "toy2d") and self.source == "csv":
            raise ConfigError(f"experiment {self.kind!r} needs a toy dataset")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.rates = tuple(float(r) for r in self.rates)
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        if not 0 < self.initial_fraction < 1 or not 0 < self.query_fraction <= 1:
            raise ConfigError("active-learning fractions must lie in (0, 1)")
        if self.cycles < 0:
            raise ConfigError("cycles must be >= 0")
        if not 0 < self.toy_val_fraction < 1:
            raise ConfigError("toy_val_fraction must lie in (0, 1)")
        try:
            NoisePlan(**self.noise)
        except TypeError as exc:
            raise ConfigError(f"bad noise plan: {exc}") from None
        except TSNetError as exc:
            raise ConfigError(f"bad noise plan: {exc}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Build from a JSON-style dict.

        For toy sources the ``train`` section is layered over ``TOY_TRAIN``,
        so it only needs the keys that differ.
        """
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        if d.get("source", "toy1d") in ("toy1d", "toy2d") and not isinstance(
                d.get("train"), TrainConfig):
            train = copy.deepcopy(TOY_TRAIN)
            for section, values in (d.get("train") or {}).items():
                if not isinstance(values, dict):
                    raise ConfigError(f"train section {section!r} must be an object")
                train.setdefault(section, {}).update(values)
            d = {**d, "train": train}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["train"] = self.train.to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class RunReport:
    """Per-seed rows, mean/population-std aggregates, derived indices and files."""

    kind: str
    config: dict
    seeds: list
    per_seed: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def failed_seeds(self) -> list:
        return [r["seed"] for r in self.per_seed if r.get("status") != "ok"]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def aggregate(values) -> dict:
    """Mean and population standard deviation (ddof = 0)."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if not len(v):
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}


def _aggregate_rows(rows, keys) -> dict:
    ok = [r for r in rows if r.get("status") == "ok"]
    return {k: aggregate(r[k] for r in ok) for k in keys}


def ratio(a, b):
    """a / b, or None when b is zero or either side is missing."""
    if a is None or b is None or b == 0:
        return None
    return a / b


# datasets -------------------------------------------------------------------

@dataclass
class Prepared:
    dataset: Dataset
    grid: EvalGrid | None  # test points for toy sources


def prepare(cfg: ExperimentConfig, seed: int) -> Prepared:
    if cfg.source == "csv":
        ds = load_csv(cfg.csv_path, load_schema(cfg.schema_path), seed, cfg.split_ratios)
        return Prepared(ds, None)
    ds, grid = (gen_toy1d if cfg.source == "toy1d" else gen_toy2d)(seed)
    ds = split(ds, (1.0 - cfg.toy_val_fraction, cfg.toy_val_fraction, 0.0), seed)
    return Prepared(ds, grid)


def test_points(prep: Prepared) -> tuple[np.ndarray, np.ndarray]:
    """Test inputs and labels in original units."""
    if prep.grid is not None:
        return prep.grid.X, prep.grid.y
    X, Y = prep.dataset.part("test")
    return X, prep.dataset.inverse_labels(Y)


def evaluate(model: TSNetModel, prep: Prepared, X=None, Y=None) -> dict:
    """MSE/MAE/NLL on the test set in original label units.

    Standardized labels are mapped back through the transform log; NLL for a
    log-transformed target is computed in log space (the Gaussian lives there).
    """
    if X is None:
        X, Y = test_points(prep)
    pred = predict(model, X)
    ds = prep.dataset
    if prep.grid is not None or not ds.transform_log.get("label_mean"):
        return metrics(Y, pred.mean, pred.var)
    mu = ds.inverse_labels(pred.mean)
    out = metrics(Y, mu)
    scale = ds.label_scale()
    lm = np.asarray(ds.transform_log["label_mean"])
    logged = set(ds.transform_log.get("log_columns", []))
    y_nll = np.array(Y, dtype=float)
    for k, name in enumerate(ds.target_names):
        if name in logged:
            y_nll[:, k] = np.log1p(y_nll[:, k])
    out["nll"] = metrics(y_nll, pred.mean * scale + lm, pred.var * scale ** 2)["nll"]
    return out


# seed fan-out -------------------------------------------------------------------

def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TSNET_THREADS", "1")))
    except ValueError:
        return 1


def _map_seeds(fn, cfg, seeds) -> list:
    n = min(_workers(), len(seeds))
    if n <= 1:
        return [fn(cfg, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), seeds))


def _failure_row(exc: Exception, seed: int) -> dict:
    status = "diverged" if isinstance(exc, DivergenceError) else "failed"
    return {"seed": seed, "status": status, "error_type": type(exc).__name__, "error": str(exc)}


@dataclass(frozen=True)
class _guard:
    """Turn a per-seed failure into a failed row instead of aborting the run.

    A class rather than a closure so it pickles into worker processes.
    """

    fn: object

    def __call__(self, cfg, seed):
        try:
            return self.fn(cfg, seed)
        except (TSNetError, ValueError, FloatingPointError, RuntimeError) as exc:
            return _failure_row(exc, seed)


# comparison ---------------------------------------------------------------------

def _comparison_run(cfg: ExperimentConfig, seed: int):
    prep = prepare(cfg, seed)
    model, hist = train(cfg.train, prep.dataset, seed)
    row = {"seed": seed, "status": "ok", **evaluate(model, prep),
           "best_epoch": hist.best_epoch, "epochs_run": len(hist)}
    if prep.grid is not None:
        row.update(region_mse(model, prep, cfg))
    return row, (model, hist, prep)


def _one_comparison(cfg: ExperimentConfig, seed: int) -> dict:
    return _comparison_run(cfg, seed)[0]


def run_comparison(cfg: ExperimentConfig) -> RunReport:
    return _comparison(cfg)[0]


def _comparison(cfg: ExperimentConfig):
    kept = None
    if min(_workers(), len(cfg.seeds)) <= 1:
        rows = []
        for seed in cfg.seeds:
            try:
                row, fitted = _comparison_run(cfg, seed)
                kept = kept or fitted
            except (TSNetError, ValueError, FloatingPointError, RuntimeError) as exc:
                row = _failure_row(exc, seed)
            rows.append(row)
    else:
        rows = _map_seeds(_guard(_one_comparison), cfg, cfg.seeds)
    keys = ["mse", "mae", "nll"] + (["mse_in", "mse_ext"] if cfg.source != "csv" else [])
    report = RunReport(cfg.kind, cfg.to_dict(), list(cfg.seeds), rows,
                       _aggregate_rows(rows, keys))
    return report, kept


# anti-noise ---------------------------------------------------------------------

def _one_antinoise(cfg: ExperimentConfig, seed: int) -> dict:
    prep = prepare(cfg, seed)
    mse = []
    for i, rate in enumerate(cfg.rates):
        plan = NoisePlan(**{**cfg.noise, "rate": rate, "kind": cfg.noise.get("kind", "gaussian-additive")})
        noisy = inject_noise(prep.dataset, plan, np.random.default_rng([seed, i]))
        model, _ = train(cfg.train, noisy, seed)
        mse.append(evaluate(model, Prepared(noisy, prep.grid))["mse"])
    return {"seed": seed, "status": "ok", "rates": list(cfg.rates), "mse": mse,
            "rpi": [ratio(m, mse[0]) for m in mse]}


def run_antinoise(cfg: ExperimentConfig) -> RunReport:
    """MSE per noise rate and RPI = MSE_i / MSE_0, per seed and on the seed means."""
    if cfg.noise.get("kind", "gaussian-additive") != "gaussian-additive":
        raise ConfigError("the anti-noise protocol uses gaussian-additive noise")
    if not cfg.rates or cfg.rates[0] != 0.0:
        raise ConfigError("anti-noise rates must start at 0")
    rows = _map_seeds(_guard(_one_antinoise), cfg, cfg.seeds)
    ok = [r for r in rows if r["status"] == "ok"]
    mean_mse = [aggregate(r["mse"][i] for r in ok)["mean"] for i in range(len(cfg.rates))]
    agg = {f"mse@{rate!r}": aggregate(r["mse"][i] for r in ok)
           for i, rate in enumerate(cfg.rates)}
    derived = {"rates": list(cfg.rates), "mean_mse": mean_mse,
               "rpi": [ratio(m, mean_mse[0]) for m in mean_mse]}
    return RunReport(cfg.kind, cfg.to_dict(), list(cfg.seeds), rows, agg, derived)


# active learning ------------------------------------------------------------------

def budget_schedule(n_pool: int, initial_fraction: float, cycles: int,
                    query_fraction: float) -> tuple[int, list[int]]:
    """Initial labeled count and the per-cycle query sizes.

    Every cycle adds ceil(query_fraction * remaining_0) points, where
    remaining_0 is the unlabeled pool after the initial draw; the last cycles
    are truncated (or dropped) when the pool runs out.
    """
    n0 = max(2, int(round(initial_fraction * n_pool)))
    remaining = n_pool - n0
    step = max(1, math.ceil(query_fraction * remaining))
    sizes = []
    for _ in range(cycles):
        if remaining <= 0:
            break
        take = min(step, remaining)
        sizes.append(take)
        remaining -= take
    return n0, sizes


def _labeled_dataset(base: Dataset, rows, seed: int, val_fraction: float) -> Dataset:
    return split(base.subset(rows), (1.0 - val_fraction, val_fraction, 0.0), seed)


def _one_active(cfg: ExperimentConfig, seed: int) -> dict:
    prep = prepare(cfg, seed)
    ds = prep.dataset
    if prep.grid is not None:
        pool = np.arange(len(ds))
        base = ds
    else:
        # the test split stays fixed; the train and validation rows form the pool
        pool = np.sort(np.concatenate([ds.split_indices["train"], ds.split_indices["val"]]))
        base = ds
    X_test, Y_test = test_points(prep)
    rng = np.random.default_rng([seed, 7])
    n0, sizes = budget_schedule(len(pool), cfg.initial_fraction, cfg.cycles, cfg.query_fraction)
    first = np.sort(rng.choice(pool, size=n0, replace=False))
    val_fraction = cfg.toy_val_fraction if prep.grid is not None else 0.2

    def fit(rows):
        sub = _labeled_dataset(base, rows, seed, val_fraction)
        sub.transform_log = ds.transform_log
        model, _ = train(cfg.train, sub, seed)
        return model, evaluate(model, prep, X_test, Y_test)["mse"]

    model0, mse0 = fit(first)
    arms = {}
    for arm in ("uncertainty", "random"):
        labeled, model, mse = first, model0, mse0
        arm_rng = np.random.default_rng([seed, 11])
        series, counts = [mse0], [len(first)]
        for take in sizes:
            rest = np.setdiff1d(pool, labeled)
            if arm == "uncertainty":
                score = predict(model, ds.X[rest]).var.mean(axis=1)
                # stable sort so ties resolve by row index
                chosen = rest[np.argsort(-score, kind="stable")[:take]]
            else:
                chosen = arm_rng.choice(rest, size=take, replace=False)
            labeled = np.sort(np.concatenate([labeled, chosen]))
            model, mse = fit(labeled)
            series.append(mse)
            counts.append(len(labeled))
        arms[arm] = {"mse": series, "labeled": counts,
                     "pir": [ratio(mse0 - m, mse0) for m in series]}
    return {"seed": seed, "status": "ok", "cycles_run": len(sizes),
            "exhausted": len(sizes) < cfg.cycles, **arms}


def run_active_learning(cfg: ExperimentConfig) -> RunReport:
    """Uncertainty-driven selection against a random control with equal budgets."""
    rows = _map_seeds(_guard(_one_active), cfg, cfg.seeds)
    ok = [r for r in rows if r["status"] == "ok"]
    derived, agg, notes = {}, {}, []
    if ok:
        n_cycles = min(len(r["uncertainty"]["mse"]) for r in ok)
        for arm in ("uncertainty", "random"):
            mean = [aggregate(r[arm]["mse"][i] for r in ok)["mean"] for i in range(n_cycles)]
            derived[arm] = {"mean_mse": mean, "pir": [ratio(mean[0] - m, mean[0]) for m in mean]}
            agg[f"{arm}_final_mse"] = aggregate(r[arm]["mse"][n_cycles - 1] for r in ok)
        if any(r["exhausted"] for r in ok):
            notes.append("pool exhausted before all cycles completed")
    return RunReport(cfg.kind, cfg.to_dict(), list(cfg.seeds), rows, agg, derived, notes=notes)


# ablation ---------------------------------------------------------------------------

def interp_mask(train_X, eval_X, quantiles=(0.01, 0.99)) -> np.ndarray:
    """True for evaluation points in the interpolation region.

    One feature: inside the training [q_lo, q_hi] quantile interval. More
    features: inside the training bounding box.
    """
    train_X = np.asarray(train_X, dtype=float)
    eval_X = np.asarray(eval_X, dtype=float)
    if train_X.shape[1] == 1:
        lo, hi = np.quantile(train_X[:, 0], quantiles)
        return (eval_X[:, 0] >= lo) & (eval_X[:, 0] <= hi)
    lo, hi = train_X.min(axis=0), train_X.max(axis=0)
    return np.all((eval_X >= lo) & (eval_X <= hi), axis=1)


def region_mse(model: TSNetModel, prep: Prepared, cfg: ExperimentConfig) -> dict:
    X_tr, _ = prep.dataset.part("train")
    inside = interp_mask(X_tr, prep.grid.X, cfg.interp_quantiles)
    err = (predict(model, prep.grid.X).mean - prep.grid.y) ** 2
    part = lambda mask: float(err[mask].mean()) if mask.any() else None  # noqa: E731
    return {"mse_in": part(inside), "mse_ext": part(~inside), "mse_all": float(err.mean()),
            "n_in": int(inside.sum()), "n_ext": int((~inside).sum())}


def _one_ablation(cfg: ExperimentConfig, seed: int) -> dict:
    prep = prepare(cfg, seed)
    out = {"seed": seed, "status": "ok", "variants": {}}
    for v in cfg.variants:
        tc = cfg.train.with_updates(model={"variant": v})
        model, _ = train(tc, prep.dataset, seed)
        out["variants"][v] = region_mse(model, prep, cfg)
    return out


def run_ablation(cfg: ExperimentConfig) -> RunReport:
    """All variants on one toy; In / Ext / All MSE per variant, averaged over seeds."""
    rows = _map_seeds(_guard(_one_ablation), cfg, cfg.seeds)
    ok = [r for r in rows if r["status"] == "ok"]
    table = {}
    for v in cfg.variants:
        table[v] = {k: aggregate(r["variants"][v][k] for r in ok)
                    for k in ("mse_in", "mse_ext", "mse_all")}
    return RunReport(cfg.kind, cfg.to_dict(), list(cfg.seeds), rows, table)


# outputs ------------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_predictions(path, model: TSNetModel, X, feature_names, target_names) -> None:
    pred = predict(model, X)
    X = np.asarray(X, dtype=float)
    header = [*feature_names, *(f"mu_{t}" for t in target_names),
              *(f"var_{t}" for t in target_names), "k_d"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, mu, var, kd in zip(X, pred.mean, pred.var, pred.k_d):
            w.writerow([_fmt(v) for v in (*x, *mu, *var, kd)])


def write_history(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history.records:
            w.writerow([rec["epoch"] if k == "epoch" else
                        ("" if rec[k] is None else _fmt(rec[k])) for k in HISTORY_COLUMNS])


def emit_outputs(report: RunReport, out_dir, model: TSNetModel | None = None,
                 eval_points: np.ndarray | None = None, history=None,
                 feature_names=None, target_names=None) -> list[str]:
    """Write metrics.json and, when given, predictions.csv and history.csv."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = []
        if model is not None and eval_points is not None:
            m = np.asarray(eval_points).shape[1]
            write_predictions(out / "predictions.csv", model, eval_points,
                              feature_names or [f"x{j}" for j in range(m)],
                              target_names or [f"y{k}" for k in range(model.norm.y_mean.size)])
            files.append("predictions.csv")
        if history is not None:
            write_history(out / "history.csv", history)
            files.append("history.csv")
        report.files = ["metrics.json", *files]
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, allow_nan=False)
                                          + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return [str(out / f) for f in report.files]


def read_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


RUNNERS = {"toy1d": run_comparison, "toy2d": run_comparison, "compare": run_comparison,
           "antinoise": run_antinoise, "active": run_active_learning, "ablate": run_ablation}


def run(cfg: ExperimentConfig) -> tuple[RunReport, dict]:
    """Run the configured protocol; also returns a representative model for outputs.

    The representative is the first successful seed's model trained with
    ``cfg.train``. Protocols that train many models re-fit it deterministically.
    """
    kept = None
    if RUNNERS[cfg.kind] is run_comparison:
        report, kept = _comparison(cfg)
    else:
        report = RUNNERS[cfg.kind](cfg)
    ok = [r["seed"] for r in report.per_seed if r["status"] == "ok"]
    if cfg.out is None or not ok:
        return report, {}
    if kept is None:
        prep = prepare(cfg, ok[0])
        model, hist = train(cfg.train, prep.dataset, ok[0])
    else:
        model, hist, prep = kept
    X = prep.grid.X if prep.grid is not None else prep.dataset.part("test")[0]
    return report, {"model": model, "history": hist, "eval_points": X,
                    "feature_names": prep.dataset.feature_names,
                    "target_names": prep.dataset.target_names}
