"""Datasets: toy generators, CSV ingestion, splits, embedding and noise injection."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataParseError, SchemaError

STD_FLOOR = 1e-8
NOISE_KINDS = ("gaussian-additive", "gamma", "multiplicative", "salt-pepper",
               "gaussian-nonzero-mean")


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    target_names: list[str] = field(default_factory=list)
    transform_log: dict = field(default_factory=dict)
    split_indices: dict | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if len(self.X) != len(self.Y):
            raise ContractError("X and Y must have the same number of rows")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.X.shape[1])]
        if not self.target_names:
            self.target_names = [f"y{k}" for k in range(self.Y.shape[1])]

    def __len__(self):
        return len(self.X)

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if self.split_indices is None:
            raise ContractError("dataset has no split")
        idx = np.asarray(self.split_indices[name], dtype=int)
        return self.X[idx], self.Y[idx]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return replace(self, X=self.X[rows], Y=self.Y[rows], split_indices=None)

    def inverse_labels(self, Y) -> np.ndarray:
        """Undo standardization and log1p on labels (identity when none applied)."""
        Y = np.array(Y, dtype=float)
        log = self.transform_log
        if "label_mean" in log:
            Y = Y * np.asarray(log["label_std"]) + np.asarray(log["label_mean"])
        logged = set(log.get("log_columns", []))
        for k, name in enumerate(self.target_names):
            if name in logged:
                Y[..., k] = np.expm1(Y[..., k])
        return Y

    def label_scale(self) -> np.ndarray:
        """Multiplier taking standardized label variances back to label units."""
        return np.asarray(self.transform_log.get("label_std", np.ones(self.Y.shape[1])))


@dataclass
class EvalGrid:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.X)


@dataclass
class NoisePlan:
    kind: str = "gaussian-additive"
    feature_sigma: float = 0.4
    system_sigma: float = 0.8
    rate: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ContractError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError(f"noise rate must lie in [0, 1], got {self.rate}")
        if self.feature_sigma < 0 or self.system_sigma < 0:
            raise ContractError("noise sigmas must be nonnegative")


# toy functions --------------------------------------------------------------

def toy1d_function(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (np.exp(0.06 * x) + 0.5 * np.exp(0.2 * x)
            + np.sin(2 * x) + np.sin(4 * x) + np.sin(5 * x))


def toy1d_feature_std(x) -> np.ndarray:
    return 0.2 / (1.0 + np.exp(2.0 - np.asarray(x, dtype=float)))


def toy1d_system_std(x, clamp: float = 5.0) -> np.ndarray:
    # pole at x = -1; the factor is bounded in magnitude before squaring
    with np.errstate(divide="ignore"):
        s = 0.5 / (1.0 - np.exp(np.asarray(x, dtype=float) + 1.0))
    return np.minimum(np.abs(s), clamp)


def toy2d_function(x, y) -> np.ndarray:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return 0.5 * np.exp(0.03 * y) * np.sin(x) + np.exp(0.06 * x) * np.cos(0.8 * y)


def toy2d_feature_std(x, y) -> np.ndarray:
    return (0.2 * np.sin(0.3 * y) + 0.4) / (1.0 + np.exp(-(x + 1.0)))


def toy2d_system_std(x, y) -> np.ndarray:
    return (0.15 * np.sin(0.3 * x) * np.sin(0.8 * y) + 1.1) / (1.0 + np.exp(2.0 - y))


TOY2D_CLUSTERS = (
    (100, (-2.9, -3.4), ((2.5, 2.0), (0.5, 2.3))),
    (150, (2.5, 2.5), ((3.0, 0.0), (0.0, 2.5))),
    (50, (5.0, -5.0), ((1.2, -0.5), (-0.7, 1.7))),
)


def repair_covariance(A, floor: float = 1e-3) -> np.ndarray:
    """Symmetrize, then lift eigenvalues below ``floor``."""
    A = np.asarray(A, dtype=float)
    S = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= floor:
        return S
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def gen_toy1d(seed: int, n_eval: int = 300) -> tuple[Dataset, EvalGrid]:
    """300 noisy samples from two Gaussian clusters plus a noise-free grid on [-7, 7]."""
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-1.0, 1.5, 150), rng.normal(2.0, 1.1, 150)])
    x_noisy = x + toy1d_feature_std(x) * rng.standard_normal(x.size)
    y = toy1d_function(x_noisy) + toy1d_system_std(x) * rng.standard_normal(x.size)
    grid = np.linspace(-7.0, 7.0, n_eval)
    ds = Dataset(x[:, None], y[:, None], ["x"], ["y"])
    return ds, EvalGrid(grid[:, None], toy1d_function(grid)[:, None])


def gen_toy2d(seed: int, grid_side: int = 50) -> tuple[Dataset, EvalGrid]:
    """300 noisy samples from three Gaussian clusters plus a 50x50 grid on [-10, 10]^2.

    Both coordinates get independent feature-noise draws sharing one variance.
    """
    rng = np.random.default_rng(seed)
    parts = [rng.multivariate_normal(mean, repair_covariance(cov), size=n)
             for n, mean, cov in TOY2D_CLUSTERS]
    P = np.vstack(parts)
    px, py = P[:, 0], P[:, 1]
    s_i = toy2d_feature_std(px, py)
    xn = px + s_i * rng.standard_normal(len(P))
    yn = py + s_i * rng.standard_normal(len(P))
    z = toy2d_function(xn, yn) + toy2d_system_std(px, py) * rng.standard_normal(len(P))
    g = np.linspace(-10.0, 10.0, grid_side)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    G = np.column_stack([gx.ravel(), gy.ravel()])
    ds = Dataset(P, z[:, None], ["x", "y"], ["z"])
    return ds, EvalGrid(G, toy2d_function(G[:, 0], G[:, 1])[:, None])


# splitting and standardization ---------------------------------------------

def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError(f"split ratios must be three nonnegatives summing to 1, got {ratios}")
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Seeded shuffle; validation and test sizes are floored, the remainder trains."""
    n_train, n_val, _ = split_sizes(len(dataset), ratios)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    idx = {"train": np.sort(perm[:n_train]).tolist(),
           "val": np.sort(perm[n_train:n_train + n_val]).tolist(),
           "test": np.sort(perm[n_train + n_val:]).tolist()}
    return replace(dataset, split_indices=idx)


def standardize(dataset: Dataset) -> Dataset:
    """Standardize features and labels with training-split statistics."""
    if dataset.split_indices is None:
        raise ContractError("standardize needs a split; call split() first")
    tr = np.asarray(dataset.split_indices["train"], dtype=int)
    fx_mean, fx_std = dataset.X[tr].mean(axis=0), dataset.X[tr].std(axis=0)
    ly_mean, ly_std = dataset.Y[tr].mean(axis=0), dataset.Y[tr].std(axis=0)
    fx_std = np.where(fx_std > STD_FLOOR, fx_std, STD_FLOOR)
    ly_std = np.where(ly_std > STD_FLOOR, ly_std, STD_FLOOR)
    log = dict(dataset.transform_log)
    log.update(feature_mean=fx_mean.tolist(), feature_std=fx_std.tolist(),
               label_mean=ly_mean.tolist(), label_std=ly_std.tolist())
    return replace(dataset, X=(dataset.X - fx_mean) / fx_std,
                   Y=(dataset.Y - ly_mean) / ly_std, transform_log=log)


# CSV ingestion --------------------------------------------------------------

def load_schema(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        schema = json.load(fh)
    if "target" not in schema:
        raise SchemaError("schema must name a 'target' column")
    return schema


def load_csv(path, schema: dict, seed: int = 0, ratios=(0.6, 0.2, 0.2)) -> Dataset:
    """Read a headered CSV, apply the schema's transforms, split and standardize.

    Schema keys: ``target`` (name or list), ``categorical_maps`` ({column:
    {value: number}}), ``log_columns`` (log1p applied), ``drop_columns``.
    Rows with empty cells are rejected.
    """
    path = Path(path)
    targets = schema["target"]
    targets = [targets] if isinstance(targets, str) else list(targets)
    cat_maps = schema.get("categorical_maps", {})
    log_cols = list(schema.get("log_columns", []))
    drop = set(schema.get("drop_columns", []))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataParseError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    for col in [*targets, *cat_maps, *log_cols, *drop]:
        if col not in header:
            raise SchemaError(f"{path}: column {col!r} named in the schema is missing")
    keep = [c for c in header if c not in drop]
    values, rejected = [], 0
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataParseError(f"{path}: row {line_no} has {len(row)} cells, "
                                 f"header has {len(header)}")
        cells = dict(zip(header, (c.strip() for c in row)))
        if any(cells[c] == "" for c in keep):
            rejected += 1
            continue
        out = []
        for col in keep:
            cell = cells[col]
            if col in cat_maps:
                if cell not in cat_maps[col]:
                    raise DataParseError(f"{path}: row {line_no}, column {col!r}: "
                                         f"unmapped category {cell!r}")
                out.append(float(cat_maps[col][cell]))
                continue
            try:
                out.append(float(cell))
            except ValueError:
                raise DataParseError(f"{path}: row {line_no}, column {col!r}: "
                                     f"non-numeric value {cell!r}") from None
        values.append(out)
    if not values:
        raise DataParseError(f"{path}: no usable rows")
    table = np.array(values, dtype=float)
    for col in log_cols:
        j = keep.index(col)
        if (table[:, j] <= -1).any():
            raise DataParseError(f"{path}: column {col!r} has values <= -1, log1p undefined")
        table[:, j] = np.log1p(table[:, j])
    feat = [c for c in keep if c not in targets]
    X = table[:, [keep.index(c) for c in feat]]
    Y = table[:, [keep.index(c) for c in targets]]
    log = {"source": str(path), "log_columns": log_cols,
           "categorical_maps": cat_maps, "rejected_rows": rejected}
    ds = Dataset(X, Y, feat, targets, log)
    return standardize(split(ds, ratios, seed))


def dump_dataset(dataset: Dataset, csv_path, log_path=None) -> None:
    """Write the dataset as CSV plus a JSON sidecar with transforms and splits."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.feature_names, *dataset.target_names])
        for xr, yr in zip(dataset.X, dataset.Y):
            w.writerow([repr(float(v)) for v in (*xr, *yr)])
    log_path = Path(log_path) if log_path else csv_path.with_suffix(".transform.json")
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump({"feature_names": dataset.feature_names,
                   "target_names": dataset.target_names,
                   "transform_log": dataset.transform_log,
                   "split_indices": dataset.split_indices}, fh, indent=2)


def read_dataset_dump(csv_path, log_path=None) -> Dataset:
    csv_path = Path(csv_path)
    log_path = Path(log_path) if log_path else csv_path.with_suffix(".transform.json")
    with open(log_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    m = len(meta["feature_names"])
    return Dataset(table[:, :m], table[:, m:], meta["feature_names"], meta["target_names"],
                   meta["transform_log"], meta["split_indices"])


# feature lifting --------------------------------------------------------------

def positional_embed(X, L: int) -> np.ndarray:
    """(X, sin(2^0 pi X), cos(2^0 pi X), ..., sin(2^L pi X), cos(2^L pi X)).

    Blocks are ordered by frequency; output width is m * (2L + 3).
    """
    if L < 0:
        raise ContractError("embedding level L must be >= 0")
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    blocks = [X]
    for k in range(L + 1):
        z = (2.0 ** k) * np.pi * X
        blocks.extend((np.sin(z), np.cos(z)))
    out = np.concatenate(blocks, axis=1)
    return out[0] if single else out


# noise injection ------------------------------------------------------------

def _apply(kind, block, sigma, rng, extra):
    if np.all(np.asarray(sigma) == 0):
        return block
    shape = block.shape
    if kind == "gaussian-additive":
        return block + sigma * rng.standard_normal(shape)
    if kind == "gaussian-nonzero-mean":
        return block + extra.get("mean_shift", 0.5) * sigma + sigma * rng.standard_normal(shape)
    if kind == "gamma":
        k = extra.get("gamma_shape", 2.0)
        theta = sigma / np.sqrt(k)
        return block + rng.gamma(k, theta, size=shape) - k * theta
    if kind == "multiplicative":
        return block * (1.0 + sigma * rng.standard_normal(shape))
    raise ContractError(kind)


def inject_noise(dataset: Dataset, plan: NoisePlan, rng: np.random.Generator) -> Dataset:
    """Corrupt part of the training split; validation and test rows stay clean.

    Sigmas are in standardized units: they are multiplied by each column's
    training-split std, which is a no-op for already-standardized data.
    Row-wise kinds noise ``round(rate * n_train)`` uniformly chosen rows;
    salt-pepper replaces each training cell with probability ``rate`` by the
    column's training min or max.
    """
    if dataset.split_indices is None:
        raise ContractError("inject_noise needs a split dataset")
    X, Y = dataset.X.copy(), dataset.Y.copy()
    tr = np.asarray(dataset.split_indices["train"], dtype=int)
    if plan.rate == 0 or len(tr) == 0:
        return replace(dataset, X=X, Y=Y)
    x_std = np.maximum(X[tr].std(axis=0), STD_FLOOR)
    y_std = np.maximum(Y[tr].std(axis=0), STD_FLOOR)
    if plan.kind == "salt-pepper":
        for M in (X, Y):
            lo, hi = M[tr].min(axis=0), M[tr].max(axis=0)
            hit = rng.random((len(tr), M.shape[1])) < plan.rate
            salt = rng.random((len(tr), M.shape[1])) < 0.5
            block = M[tr]
            block = np.where(hit, np.where(salt, hi, lo), block)
            M[tr] = block
        return replace(dataset, X=X, Y=Y)
    n_hit = int(round(plan.rate * len(tr)))
    rows = np.sort(rng.choice(tr, size=n_hit, replace=False))
    if plan.kind == "multiplicative":
        # relative perturbation: the sigma is already dimensionless
        X[rows] = _apply(plan.kind, X[rows], plan.feature_sigma, rng, plan.extra)
        Y[rows] = _apply(plan.kind, Y[rows], plan.system_sigma, rng, plan.extra)
    else:
        X[rows] = _apply(plan.kind, X[rows], plan.feature_sigma * x_std, rng, plan.extra)
        Y[rows] = _apply(plan.kind, Y[rows], plan.system_sigma * y_std, rng, plan.extra)
    return replace(dataset, X=X, Y=Y)
